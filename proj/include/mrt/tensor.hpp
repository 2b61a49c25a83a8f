#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mrt {

// Dense row-major tensor of doubles. Mostly used as 2-D (rows x cols);
// scalars are shape {1}.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::vector<int> s, std::vector<double> d);

    static Tensor zeros(std::vector<int> s);
    static Tensor full(std::vector<int> s, double v);
    static Tensor scalar(double v);

    std::size_t numel() const;
    bool is_scalar() const { return numel() == 1; }

    // 2-D accessors
    int rows() const { return shape.at(0); }
    int cols() const { return shape.size() > 1 ? shape[1] : 1; }
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    double max_abs() const;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One autograd tape node. Leaves have no parents; interior nodes carry a
// closure that scatters this node's gradient into its parents.
struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    void accumulate(const Tensor& g);
    void zero_grad();
    bool has_grad() const { return !grad.data.empty(); }
};

// Handle type for graph construction.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad);

    const Tensor& value() const { return n_->value; }
    Tensor& value_mut() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    bool defined() const { return n_ != nullptr; }
    NodePtr node() const { return n_; }
    Node* raw() const { return n_.get(); }

private:
    NodePtr n_;
};

// When false, ops produce detached constant nodes (evaluation mode).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- primitive ops (all differentiable unless noted) ----

Var constant(Tensor t);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_rowvec(const Var& a, const Var& v);  // broadcast v over rows of a
Var gelu(const Var& a);
Var elem_pow(const Var& a, double p);  // requires positive entries for fractional p
Var softmax(const Var& a, int axis);
Var layernorm(const Var& a, const Var& gain, const Var& bias, double eps);
Var gather_rows(const Var& table, const std::vector<int>& ids);
Var slice_rows(const Var& a, int r0, int r1);
Var slice_cols(const Var& a, int c0, int c1);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

// Mean negative log-likelihood over positions where mask is true.
// targets/mask have one entry per row of logits.
Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<std::uint8_t>& mask);

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

}  // namespace mrt
