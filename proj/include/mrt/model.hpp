#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrt/data.hpp"
#include "mrt/editor.hpp"
#include "mrt/tensor.hpp"

namespace mrt {

struct ToyModelConfig {
    int d_v = 32;
    int d_t = 48;
    int vision_layers = 4;
    int decoder_layers = 4;
    int heads = 4;
    int patch_grid = 4;
    int vocab_size = 64;
    int max_seq = 32;
    int ffn_mult = 8;

    int patch_dim() const { return kPatchSide * kPatchSide; }
    int num_patches() const { return patch_grid * patch_grid; }
    void validate() const;
};

// Which layers and token spans receive editors. Layer indices are 1-based.
// Prefix/suffix spans are positions within the textual segment of the fused
// sequence; when control_token_index >= 0, decoder editing targets that
// single textual position instead of the spans.
struct EditPlan {
    std::vector<int> visual_layers;
    int visual_rank = 6;
    bool cross_modality = true;  // cross editor rank is tied to visual_rank
    std::vector<int> decoder_layers;
    int multimodal_rank = 4;
    int prefix_len = 4;
    int suffix_len = 4;
    int control_token_index = -1;
    bool roi_only = false;
    bool edit_all_text = false;  // segment-ablation "all" mode: spans cover every textual token

    void validate(const ToyModelConfig& cfg) const;

    // The standard plan: all eligible layers, visual rank 6,
    // multimodal rank 4, prefix = suffix = 4.
    static EditPlan default_plan(const ToyModelConfig& cfg);
};

struct BlockWeights {
    Var Wq, Wk, Wv, Wo;          // d x d
    Var bq, bk, bv, bo;          // 1 x d
    Var ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x d
    Var Wm1, bm1, Wm2, bm2;      // d x f, 1 x f, f x d, 1 x d
};

struct FrozenWeights {
    Var patch_embed, patch_bias;  // patch_dim x d_v, 1 x d_v
    Var vis_pos;                  // m x d_v
    std::vector<BlockWeights> vision;
    Var projector, proj_bias;     // d_v x d_t, 1 x d_t
    Var tok_embed;                // V x d_t
    Var dec_pos;                  // max_seq x d_t
    std::vector<BlockWeights> decoder;
    Var final_ln_g, final_ln_b;   // 1 x d_t
    Var head, head_bias;          // d_t x V, 1 x V

    std::vector<std::pair<std::string, Var>> named_tensors() const;
    void set_trainable(bool on);
    long long param_count() const;
    std::uint64_t hash() const;
};

// Caches the orthonormalized subspace of every editor so one batch shares
// a single Gram-Schmidt subgraph per editor.
struct EditorCtx {
    std::map<std::pair<Site, int>, Var> u;
};

class ToyModel {
public:
    ToyModel(ToyModelConfig cfg, std::uint64_t seed);

    const ToyModelConfig& config() const { return cfg_; }
    FrozenWeights& weights() { return w_; }
    const FrozenWeights& weights() const { return w_; }

    EditorCtx make_ctx(const EditorSet* editors) const;

    // Vision pipeline; feature is the hidden state after the second-to-last
    // encoder layer, so the final layer never hosts an editor.
    Var encode_image(const SynthImage& img, const EditorSet* editors, const EditPlan& plan,
                     EditorCtx& ctx) const;

    Var project_cross_modality(const Var& visual_tokens, const SynthImage& img,
                               const EditorSet* editors, const EditPlan& plan,
                               EditorCtx& ctx) const;

    // Causal decode over Concat(X_v, X_t); returns (m+n) x V logits.
    Var fuse_and_decode(const Var& projected, const std::vector<int>& token_ids,
                        const EditorSet* editors, const EditPlan& plan, EditorCtx& ctx) const;

    Var sample_loss(const Sample& s, const EditorSet* editors, const EditPlan& plan,
                    EditorCtx& ctx) const;

    // Mean cross-entropy over response tokens of the batch.
    Var forward_loss(const std::vector<const Sample*>& batch, const EditorSet* editors,
                     const EditPlan& plan) const;

    Tensor logits(const SynthImage& img, const std::vector<int>& token_ids,
                  const EditorSet* editors, const EditPlan& plan) const;

    std::vector<int> generate(const SynthImage& img, const std::vector<int>& prompt_ids,
                              const EditorSet* editors, const EditPlan& plan, int max_new) const;

private:
    Var block_forward(const Var& x, const BlockWeights& bw, bool causal, int heads) const;

    ToyModelConfig cfg_;
    FrozenWeights w_;
};

// Creates freshly initialized editors for every site the plan engages.
EditorSet make_editors(const EditPlan& plan, const ToyModelConfig& cfg, std::uint64_t seed);

}  // namespace mrt
