#include "mrt/editor.hpp"

#include <cmath>
#include <stdexcept>

#include "mrt/rng.hpp"

namespace mrt {

std::string site_name(Site s) {
    switch (s) {
        case Site::Visual: return "visual";
        case Site::Cross: return "cross_modality";
        case Site::Prefix: return "prefix";
        case Site::Suffix: return "suffix";
        case Site::ControlTarget: return "control_target";
    }
    throw std::logic_error("site_name: bad site");
}

Site site_from_name(const std::string& s) {
    if (s == "visual") return Site::Visual;
    if (s == "cross_modality") return Site::Cross;
    if (s == "prefix") return Site::Prefix;
    if (s == "suffix") return Site::Suffix;
    if (s == "control_target") return Site::ControlTarget;
    throw std::invalid_argument("unknown editor site: " + s);
}

long long param_count(const EditorParams& e) {
    return static_cast<long long>(e.rank) * (2LL * e.dim + 1);
}

EditorParams init_editor(int rank, int dim, std::uint64_t seed) {
    if (rank < 1) throw std::invalid_argument("init_editor: rank must be >= 1");
    if (rank > dim)
        throw std::invalid_argument("init_editor: rank " + std::to_string(rank) +
                                    " exceeds dim " + std::to_string(dim));
    Rng rng(seed);

    // Orthogonal init for raw_U: Gaussian rows followed by Gram-Schmidt.
    Tensor raw({rank, dim});
    for (double& v : raw.data) v = rng.normal();
    raw = orthonormalize_value(raw);

    // Standard linear-layer init for W and bias.
    const double k = 1.0 / std::sqrt(static_cast<double>(dim));
    Tensor w({rank, dim});
    for (double& v : w.data) v = rng.uniform(-k, k);
    Tensor b({1, rank});
    for (double& v : b.data) v = rng.uniform(-k, k);

    EditorParams e;
    e.rank = rank;
    e.dim = dim;
    e.raw_U = Var::leaf(std::move(raw), true);
    e.W = Var::leaf(std::move(w), true);
    e.bias = Var::leaf(std::move(b), true);
    return e;
}

Var orthonormalize(const Var& raw) {
    const int r = raw.value().rows();
    std::vector<Var> rows;
    rows.reserve(r);
    for (int i = 0; i < r; ++i) {
        Var v = slice_rows(raw, i, i + 1);
        for (int j = 0; j < i; ++j) {
            Var proj = matmul(v, transpose(rows[j]));  // 1x1
            Var pr = matmul(proj, rows[j]);
            v = sub(v, pr);
        }
        Var nsq = matmul(v, transpose(v));  // 1x1
        if (std::sqrt(nsq.value().data[0]) < 1e-10)
            throw std::runtime_error("orthonormalize: row " + std::to_string(i) +
                                     " is numerically dependent on earlier rows");
        Var inv = elem_pow(nsq, -0.5);
        // scale row by the 1x1 inverse norm
        Var invRow = matmul(transpose(inv), v);  // (1x1)^T * (1xd) = 1xd scaled
        rows.push_back(invRow);
    }
    return r == 1 ? rows[0] : concat_rows(rows);
}

Tensor orthonormalize_value(const Tensor& raw) {
    NoGradGuard ng;
    return orthonormalize(constant(raw)).value();
}

Var apply_editor_with_u(const EditorParams& e, const Var& u, const Var& x,
                        const std::vector<std::uint8_t>& row_mask) {
    if (x.value().cols() != e.dim)
        throw std::invalid_argument("apply_editor: input dim " + std::to_string(x.value().cols()) +
                                    " != editor dim " + std::to_string(e.dim));
    const int n = x.value().rows();
    if (!row_mask.empty() && static_cast<int>(row_mask.size()) != n)
        throw std::invalid_argument("apply_editor: row mask length mismatch");

    Var ut = transpose(u);
    Var proj = matmul(x, ut);                            // n x rank, Ux per row
    Var target = add_rowvec(matmul(x, transpose(e.W)), e.bias);  // Wx + b per row
    Var corr = matmul(sub(target, proj), u);             // n x dim

    if (!row_mask.empty()) {
        Tensor m({n, e.dim});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < e.dim; ++j) m.at(i, j) = row_mask[i] ? 1.0 : 0.0;
        corr = mul(corr, constant(std::move(m)));
    }
    return add(x, corr);
}

Var apply_editor(const EditorParams& e, const Var& x,
                 const std::vector<std::uint8_t>& row_mask) {
    return apply_editor_with_u(e, orthonormalize(e.raw_U), x, row_mask);
}

void configure_identity(EditorParams& e) {
    e.W.value_mut() = orthonormalize_value(e.raw_U.value());
    e.bias.value_mut() = Tensor::zeros({1, e.rank});
}

EditorParams* EditorSet::find(Site s, int layer) {
    auto it = editors.find({s, layer});
    return it == editors.end() ? nullptr : &it->second;
}

const EditorParams* EditorSet::find(Site s, int layer) const {
    auto it = editors.find({s, layer});
    return it == editors.end() ? nullptr : &it->second;
}

std::vector<Node*> EditorSet::trainable_leaves() const {
    std::vector<Node*> out;
    for (const auto& [key, e] : editors)
        for (Node* n : e.leaves()) out.push_back(n);
    return out;
}

long long EditorSet::total_params() const {
    long long n = 0;
    for (const auto& [key, e] : editors) n += param_count(e);
    return n;
}

}  // namespace mrt
