#include "mrt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mrt {

namespace {

std::size_t product(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void require_2d(const Tensor& t, const char* who) {
    if (t.shape.size() != 2) throw std::invalid_argument(std::string(who) + ": expected 2-D tensor");
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(product(shape), 0.0) {}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (product(shape) != data.size()) throw std::invalid_argument("tensor shape/data size mismatch");
}

Tensor Tensor::zeros(std::vector<int> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::numel() const { return data.size(); }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

void Node::accumulate(const Tensor& g) {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
    if (g.shape != grad.shape) throw std::runtime_error("gradient shape mismatch");
    for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += g.data[i];
}

void Node::zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(n);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var constant(Tensor t) { return Var::leaf(std::move(t), false); }

namespace {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool need = false;
    if (g_grad_enabled) {
        for (const Var& p : parents)
            if (p.requires_grad()) need = true;
    }
    n->requires_grad = need;
    if (need) {
        n->parents.reserve(parents.size());
        for (Var& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Var(n);
}

}  // namespace

Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor g = n.grad;
            for (double& v : g.data) v = -v;
            n.parents[1]->accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= n.parents[1]->value.data[i];
            n.parents[0]->accumulate(g);
        }
        if (n.parents[1]->requires_grad) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= n.parents[0]->value.data[i];
            n.parents[1]->accumulate(g);
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (double& v : out.data) v *= c;
    return make_node(std::move(out), {a}, [c](Node& n) {
        Tensor g = n.grad;
        for (double& v : g.data) v *= c;
        n.parents[0]->accumulate(g);
    });
}

namespace {

// C += A * B with A (m x k), B (k x n); transA/transB interpret A/B as transposed.
void gemm_acc(const Tensor& A, bool transA, const Tensor& B, bool transB, Tensor& C) {
    const int m = C.rows(), n = C.cols();
    const int k = transA ? A.rows() : A.cols();
    for (int i = 0; i < m; ++i) {
        double* crow = &C.data[static_cast<std::size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            const double a = transA ? A.at(p, i) : A.at(i, p);
            if (a == 0.0) continue;
            if (!transB) {
                const double* brow = &B.data[static_cast<std::size_t>(p) * n];
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += a * B.at(j, p);
            }
        }
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    require_2d(a.value(), "matmul");
    require_2d(b.value(), "matmul");
    if (a.value().cols() != b.value().rows())
        throw std::invalid_argument("matmul: inner dimensions disagree (" +
                                    std::to_string(a.value().cols()) + " vs " +
                                    std::to_string(b.value().rows()) + ")");
    Tensor out = Tensor::zeros({a.value().rows(), b.value().cols()});
    gemm_acc(a.value(), false, b.value(), false, out);
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node* A = n.parents[0].get();
        Node* B = n.parents[1].get();
        if (A->requires_grad) {
            Tensor ga = Tensor::zeros(A->value.shape);
            gemm_acc(n.grad, false, B->value, true, ga);  // dA = dC * B^T
            A->accumulate(ga);
        }
        if (B->requires_grad) {
            Tensor gb = Tensor::zeros(B->value.shape);
            gemm_acc(A->value, true, n.grad, false, gb);  // dB = A^T * dC
            B->accumulate(gb);
        }
    });
}

Var transpose(const Var& a) {
    require_2d(a.value(), "transpose");
    const Tensor& x = a.value();
    Tensor out({x.cols(), x.rows()});
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor g(n.parents[0]->value.shape);
        for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < g.cols(); ++j) g.at(i, j) = n.grad.at(j, i);
        n.parents[0]->accumulate(g);
    });
}

Var add_rowvec(const Var& a, const Var& v) {
    require_2d(a.value(), "add_rowvec");
    if (static_cast<int>(v.value().numel()) != a.value().cols())
        throw std::invalid_argument("add_rowvec: vector length mismatch");
    Tensor out = a.value();
    const int c = out.cols();
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) += v.value().data[j];
    return make_node(std::move(out), {a, v}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor gv = Tensor::zeros(n.parents[1]->value.shape);
            const int c = n.grad.cols();
            for (int i = 0; i < n.grad.rows(); ++i)
                for (int j = 0; j < c; ++j) gv.data[j] += n.grad.at(i, j);
            n.parents[1]->accumulate(gv);
        }
    });
}

namespace {
// tanh-approximation GELU; smooth everywhere so finite-difference checks behave.
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_val(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * x * (1.0 + t);
}

double gelu_deriv(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace

Var gelu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = gelu_val(v);
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] *= gelu_deriv(n.parents[0]->value.data[i]);
        n.parents[0]->accumulate(g);
    });
}

Var elem_pow(const Var& a, double p) {
    Tensor out = a.value();
    for (double& v : out.data) v = std::pow(v, p);
    return make_node(std::move(out), {a, constant(Tensor::scalar(p))}, [p](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] *= p * std::pow(n.parents[0]->value.data[i], p - 1.0);
        n.parents[0]->accumulate(g);
    });
}

Var softmax(const Var& a, int axis) {
    require_2d(a.value(), "softmax");
    if (axis < 0) axis += 2;
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: invalid axis");
    if (axis == 0) return transpose(softmax(transpose(a), 1));

    const Tensor& x = a.value();
    Tensor out = x;
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        double mx = x.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            out.at(i, j) = std::exp(x.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (int j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    return make_node(std::move(out), {a}, [](Node& n) {
        const Tensor& y = n.value;
        Tensor g = Tensor::zeros(y.shape);
        const int r = y.rows(), c = y.cols();
        for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += n.grad.at(i, j) * y.at(i, j);
            for (int j = 0; j < c; ++j) g.at(i, j) = y.at(i, j) * (n.grad.at(i, j) - dot);
        }
        n.parents[0]->accumulate(g);
    });
}

Var layernorm(const Var& a, const Var& gain, const Var& bias, double eps) {
    require_2d(a.value(), "layernorm");
    const Tensor& x = a.value();
    const int r = x.rows(), c = x.cols();
    if (c < 2) throw std::invalid_argument("layernorm: last axis must have length >= 2");
    if (static_cast<int>(gain.value().numel()) != c || static_cast<int>(bias.value().numel()) != c)
        throw std::invalid_argument("layernorm: gain/bias length mismatch");

    Tensor out({r, c});
    Tensor xhat({r, c});
    std::vector<double> inv_std(r);
    for (int i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= c;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) {
            xhat.at(i, j) = (x.at(i, j) - mean) * inv_std[i];
            out.at(i, j) = xhat.at(i, j) * gain.value().data[j] + bias.value().data[j];
        }
    }
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    return make_node(std::move(out), {a, gain, bias}, [xh, istd](Node& n) {
        Node* X = n.parents[0].get();
        Node* G = n.parents[1].get();
        Node* B = n.parents[2].get();
        const int r = n.value.rows(), c = n.value.cols();
        if (G->requires_grad) {
            Tensor gg = Tensor::zeros(G->value.shape);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gg.data[j] += n.grad.at(i, j) * xh->at(i, j);
            G->accumulate(gg);
        }
        if (B->requires_grad) {
            Tensor gb = Tensor::zeros(B->value.shape);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gb.data[j] += n.grad.at(i, j);
            B->accumulate(gb);
        }
        if (X->requires_grad) {
            Tensor gx = Tensor::zeros(X->value.shape);
            for (int i = 0; i < r; ++i) {
                // dxhat = dy * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double dxh = n.grad.at(i, j) * G->value.data[j];
                    m1 += dxh;
                    m2 += dxh * xh->at(i, j);
                }
                m1 /= c;
                m2 /= c;
                for (int j = 0; j < c; ++j) {
                    const double dxh = n.grad.at(i, j) * G->value.data[j];
                    gx.at(i, j) = (dxh - m1 - xh->at(i, j) * m2) * (*istd)[i];
                }
            }
            X->accumulate(gx);
        }
    });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
    require_2d(table.value(), "gather_rows");
    const int c = table.value().cols();
    Tensor out({static_cast<int>(ids.size()), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= table.value().rows())
            throw std::invalid_argument("gather_rows: index out of range");
        for (int j = 0; j < c; ++j) out.at(static_cast<int>(i), j) = table.value().at(id, j);
    }
    return make_node(std::move(out), {table}, [ids](Node& n) {
        Tensor g = Tensor::zeros(n.parents[0]->value.shape);
        const int c = g.cols();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < c; ++j) g.at(ids[i], j) += n.grad.at(static_cast<int>(i), j);
        n.parents[0]->accumulate(g);
    });
}

Var slice_rows(const Var& a, int r0, int r1) {
    require_2d(a.value(), "slice_rows");
    if (r0 < 0 || r1 > a.value().rows() || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    const int c = a.value().cols();
    Tensor out({r1 - r0, c});
    std::copy(a.value().data.begin() + static_cast<std::size_t>(r0) * c,
              a.value().data.begin() + static_cast<std::size_t>(r1) * c, out.data.begin());
    return make_node(std::move(out), {a}, [r0, r1](Node& n) {
        Tensor g = Tensor::zeros(n.parents[0]->value.shape);
        const int c = g.cols();
        std::copy(n.grad.data.begin(), n.grad.data.end(),
                  g.data.begin() + static_cast<std::size_t>(r0) * c);
        n.parents[0]->accumulate(g);
    });
}

Var slice_cols(const Var& a, int c0, int c1) {
    require_2d(a.value(), "slice_cols");
    if (c0 < 0 || c1 > a.value().cols() || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const int r = a.value().rows();
    Tensor out({r, c1 - c0});
    for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a.value().at(i, j);
    return make_node(std::move(out), {a}, [c0, c1](Node& n) {
        Tensor g = Tensor::zeros(n.parents[0]->value.shape);
        for (int i = 0; i < g.rows(); ++i)
            for (int j = c0; j < c1; ++j) g.at(i, j) = n.grad.at(i, j - c0);
        n.parents[0]->accumulate(g);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int c = parts[0].value().cols();
    int r = 0;
    for (const Var& p : parts) {
        require_2d(p.value(), "concat_rows");
        if (p.value().cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        r += p.value().rows();
    }
    Tensor out({r, c});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
        off += p.value().numel();
    }
    return make_node(std::move(out), parts, [](Node& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                Tensor g(p->value.shape);
                std::copy(n.grad.data.begin() + off, n.grad.data.begin() + off + g.numel(),
                          g.data.begin());
                p->accumulate(g);
            }
            off += p->value.numel();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int r = parts[0].value().rows();
    int c = 0;
    for (const Var& p : parts) {
        require_2d(p.value(), "concat_cols");
        if (p.value().rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p.value().cols();
    }
    Tensor out({r, c});
    int coff = 0;
    for (const Var& p : parts) {
        const int pc = p.value().cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < pc; ++j) out.at(i, coff + j) = p.value().at(i, j);
        coff += pc;
    }
    return make_node(std::move(out), parts, [](Node& n) {
        int coff = 0;
        for (auto& p : n.parents) {
            const int pc = p->value.cols();
            if (p->requires_grad) {
                Tensor g(p->value.shape);
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < pc; ++j) g.at(i, j) = n.grad.at(i, coff + j);
                p->accumulate(g);
            }
            coff += pc;
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<std::uint8_t>& mask) {
    require_2d(logits.value(), "cross_entropy");
    const Tensor& x = logits.value();
    const int r = x.rows(), V = x.cols();
    if (static_cast<int>(targets.size()) != r || static_cast<int>(mask.size()) != r)
        throw std::invalid_argument("cross_entropy: targets/mask length mismatch");
    int count = 0;
    double loss = 0.0;
    // probs kept for the backward closure
    auto probs = std::make_shared<Tensor>(Tensor::zeros({r, V}));
    for (int i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= V)
            throw std::invalid_argument("cross_entropy: target id out of range");
        double mx = x.at(i, 0);
        for (int j = 1; j < V; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < V; ++j) {
            probs->at(i, j) = std::exp(x.at(i, j) - mx);
            sum += probs->at(i, j);
        }
        for (int j = 0; j < V; ++j) probs->at(i, j) /= sum;
        loss -= std::log(probs->at(i, targets[i]));
        ++count;
    }
    if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
    loss /= count;
    return make_node(Tensor::scalar(loss), {logits},
                     [probs, targets, mask, count](Node& n) {
                         const double g0 = n.grad.data[0] / count;
                         Tensor g = Tensor::zeros(n.parents[0]->value.shape);
                         const int r = g.rows(), V = g.cols();
                         for (int i = 0; i < r; ++i) {
                             if (!mask[i]) continue;
                             for (int j = 0; j < V; ++j) g.at(i, j) = g0 * probs->at(i, j);
                             g.at(i, targets[i]) -= g0;
                         }
                         n.parents[0]->accumulate(g);
                     });
}

void backward(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (!root.value().is_scalar()) throw std::invalid_argument("backward: root must be scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root.raw()});
    visited.insert(root.raw());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root.raw()->accumulate(Tensor::scalar(1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->has_grad()) n->backprop(*n);
    }
}

}  // namespace mrt
