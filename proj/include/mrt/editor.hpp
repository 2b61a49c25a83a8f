#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrt/tensor.hpp"

namespace mrt {

// Attachment site of an editor within the model pipeline.
enum class Site { Visual, Cross, Prefix, Suffix, ControlTarget };

std::string site_name(Site s);
Site site_from_name(const std::string& s);

// One representation editor: x -> x + U^T (W x + b - U x), where U is the
// row-orthonormalization of the unconstrained trainable raw_U.
struct EditorParams {
    int rank = 0;  // subspace dimension, rows of U
    int dim = 0;   // hidden size of the host site
    Var raw_U;     // rank x dim, trainable
    Var W;         // rank x dim, trainable
    Var bias;      // 1 x rank, trainable

    std::vector<Node*> leaves() const { return {raw_U.raw(), W.raw(), bias.raw()}; }
};

// rank x (2*dim + 1)
long long param_count(const EditorParams& e);

EditorParams init_editor(int rank, int dim, std::uint64_t seed);

// Differentiable modified Gram-Schmidt over the rows of raw. Throws if a
// pivot norm falls below 1e-10, naming the offending row.
Var orthonormalize(const Var& raw);

// Plain-tensor variant for tests and serialization checks.
Tensor orthonormalize_value(const Tensor& raw);

// Applies the editor to every row of x (n x dim). Rows where row_mask is
// false pass through untouched; an empty mask edits all rows.
Var apply_editor(const EditorParams& e, const Var& x,
                 const std::vector<std::uint8_t>& row_mask = {});

// Same, but with the orthonormal U precomputed (shared across a batch).
Var apply_editor_with_u(const EditorParams& e, const Var& u, const Var& x,
                        const std::vector<std::uint8_t>& row_mask = {});

// Configures W == U, b == 0, so the editor is exactly the identity.
void configure_identity(EditorParams& e);

// The full collection of editors for one run, keyed by (site, layer).
// Layer indices are 1-based; sites without a layer notion use layer 0.
struct EditorSet {
    std::map<std::pair<Site, int>, EditorParams> editors;

    EditorParams* find(Site s, int layer);
    const EditorParams* find(Site s, int layer) const;
    std::vector<Node*> trainable_leaves() const;
    long long total_params() const;
};

}  // namespace mrt
