#include "mrt/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mrt/hash.hpp"
#include "mrt/rng.hpp"

namespace mrt {

void ToyModelConfig::validate() const {
    if (d_v <= 0 || d_t <= 0 || vision_layers < 1 || decoder_layers < 1 || heads < 1 ||
        patch_grid < 2 || vocab_size < vocab_size_words() || max_seq < 1 || ffn_mult < 1)
        throw std::invalid_argument("model config: value out of range");
    if (d_v % heads != 0 || d_t % heads != 0)
        throw std::invalid_argument("model config: hidden sizes must be divisible by heads");
}

void EditPlan::validate(const ToyModelConfig& cfg) const {
    for (int i : visual_layers) {
        if (i < 1 || i >= cfg.vision_layers)
            throw std::invalid_argument(
                "edit plan: visual layer " + std::to_string(i) +
                (i == cfg.vision_layers ? " is the final vision layer (never edited)"
                                        : " out of range"));
    }
    for (int j : decoder_layers)
        if (j < 1 || j > cfg.decoder_layers)
            throw std::invalid_argument("edit plan: decoder layer " + std::to_string(j) +
                                        " out of range");
    if (visual_rank < 1 || visual_rank > std::min(cfg.d_v, cfg.d_t))
        throw std::invalid_argument("edit plan: visual rank out of range");
    if (multimodal_rank < 1 || multimodal_rank > cfg.d_t)
        throw std::invalid_argument("edit plan: multimodal rank out of range");
    if (prefix_len < 0 || suffix_len < 0)
        throw std::invalid_argument("edit plan: negative span length");
}

EditPlan EditPlan::default_plan(const ToyModelConfig& cfg) {
    EditPlan p;
    for (int i = 1; i < cfg.vision_layers; ++i) p.visual_layers.push_back(i);
    for (int j = 1; j <= cfg.decoder_layers; ++j) p.decoder_layers.push_back(j);
    return p;
}

namespace {

Var init_matrix(Rng& rng, int r, int c, double scale) {
    Tensor t({r, c});
    for (double& v : t.data) v = rng.normal() * scale;
    return Var::leaf(std::move(t), false);
}

Var init_zeros(int r, int c) { return Var::leaf(Tensor::zeros({r, c}), false); }
Var init_ones(int r, int c) { return Var::leaf(Tensor::full({r, c}, 1.0), false); }

BlockWeights init_block(Rng& rng, int d, int f) {
    const double s = 0.08;
    BlockWeights b;
    b.Wq = init_matrix(rng, d, d, s);
    b.Wk = init_matrix(rng, d, d, s);
    b.Wv = init_matrix(rng, d, d, s);
    b.Wo = init_matrix(rng, d, d, s);
    b.bq = init_zeros(1, d);
    b.bk = init_zeros(1, d);
    b.bv = init_zeros(1, d);
    b.bo = init_zeros(1, d);
    b.ln1_g = init_ones(1, d);
    b.ln1_b = init_zeros(1, d);
    b.ln2_g = init_ones(1, d);
    b.ln2_b = init_zeros(1, d);
    b.Wm1 = init_matrix(rng, d, f, s);
    b.bm1 = init_zeros(1, f);
    b.Wm2 = init_matrix(rng, f, d, s);
    b.bm2 = init_zeros(1, d);
    return b;
}

void named_block(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix,
                 const BlockWeights& b) {
    out.emplace_back(prefix + ".Wq", b.Wq);
    out.emplace_back(prefix + ".Wk", b.Wk);
    out.emplace_back(prefix + ".Wv", b.Wv);
    out.emplace_back(prefix + ".Wo", b.Wo);
    out.emplace_back(prefix + ".bq", b.bq);
    out.emplace_back(prefix + ".bk", b.bk);
    out.emplace_back(prefix + ".bv", b.bv);
    out.emplace_back(prefix + ".bo", b.bo);
    out.emplace_back(prefix + ".ln1_g", b.ln1_g);
    out.emplace_back(prefix + ".ln1_b", b.ln1_b);
    out.emplace_back(prefix + ".ln2_g", b.ln2_g);
    out.emplace_back(prefix + ".ln2_b", b.ln2_b);
    out.emplace_back(prefix + ".Wm1", b.Wm1);
    out.emplace_back(prefix + ".bm1", b.bm1);
    out.emplace_back(prefix + ".Wm2", b.Wm2);
    out.emplace_back(prefix + ".bm2", b.bm2);
}

}  // namespace

std::vector<std::pair<std::string, Var>> FrozenWeights::named_tensors() const {
    std::vector<std::pair<std::string, Var>> out;
    out.emplace_back("patch_embed", patch_embed);
    out.emplace_back("patch_bias", patch_bias);
    out.emplace_back("vis_pos", vis_pos);
    for (std::size_t i = 0; i < vision.size(); ++i)
        named_block(out, "vision." + std::to_string(i), vision[i]);
    out.emplace_back("projector", projector);
    out.emplace_back("proj_bias", proj_bias);
    out.emplace_back("tok_embed", tok_embed);
    out.emplace_back("dec_pos", dec_pos);
    for (std::size_t i = 0; i < decoder.size(); ++i)
        named_block(out, "decoder." + std::to_string(i), decoder[i]);
    out.emplace_back("final_ln_g", final_ln_g);
    out.emplace_back("final_ln_b", final_ln_b);
    out.emplace_back("head", head);
    out.emplace_back("head_bias", head_bias);
    return out;
}

void FrozenWeights::set_trainable(bool on) {
    for (auto& [name, v] : named_tensors()) v.raw()->requires_grad = on;
}

long long FrozenWeights::param_count() const {
    long long n = 0;
    for (const auto& [name, v] : named_tensors()) n += static_cast<long long>(v.value().numel());
    return n;
}

std::uint64_t FrozenWeights::hash() const {
    Fnv1a h;
    for (const auto& [name, v] : named_tensors()) {
        h.update_string(name);
        h.update_doubles(v.value().data);
    }
    return h.digest();
}

ToyModel::ToyModel(ToyModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
    const int m = cfg_.num_patches();
    w_.patch_embed = init_matrix(rng, cfg_.patch_dim(), cfg_.d_v, 0.08);
    w_.patch_bias = init_zeros(1, cfg_.d_v);
    w_.vis_pos = init_matrix(rng, m, cfg_.d_v, 0.02);
    for (int i = 0; i < cfg_.vision_layers; ++i)
        w_.vision.push_back(init_block(rng, cfg_.d_v, cfg_.d_v * cfg_.ffn_mult));
    w_.projector = init_matrix(rng, cfg_.d_v, cfg_.d_t, 0.08);
    w_.proj_bias = init_zeros(1, cfg_.d_t);
    w_.tok_embed = init_matrix(rng, cfg_.vocab_size, cfg_.d_t, 0.08);
    w_.dec_pos = init_matrix(rng, cfg_.max_seq, cfg_.d_t, 0.02);
    for (int i = 0; i < cfg_.decoder_layers; ++i)
        w_.decoder.push_back(init_block(rng, cfg_.d_t, cfg_.d_t * cfg_.ffn_mult));
    w_.final_ln_g = init_ones(1, cfg_.d_t);
    w_.final_ln_b = init_zeros(1, cfg_.d_t);
    w_.head = init_matrix(rng, cfg_.d_t, cfg_.vocab_size, 0.08);
    w_.head_bias = init_zeros(1, cfg_.vocab_size);
}

EditorCtx ToyModel::make_ctx(const EditorSet* editors) const {
    EditorCtx ctx;
    if (editors)
        for (const auto& [key, e] : editors->editors) ctx.u[key] = orthonormalize(e.raw_U);
    return ctx;
}

Var ToyModel::block_forward(const Var& x, const BlockWeights& bw, bool causal, int heads) const {
    const int s = x.value().rows();
    const int d = x.value().cols();
    const int hd = d / heads;

    Var h = layernorm(x, bw.ln1_g, bw.ln1_b, 1e-5);
    Var q = add_rowvec(matmul(h, bw.Wq), bw.bq);
    Var k = add_rowvec(matmul(h, bw.Wk), bw.bk);
    Var v = add_rowvec(matmul(h, bw.Wv), bw.bv);

    Var mask;
    if (causal) {
        Tensor mt = Tensor::zeros({s, s});
        for (int i = 0; i < s; ++i)
            for (int j = i + 1; j < s; ++j) mt.at(i, j) = -1e9;
        mask = constant(std::move(mt));
    }

    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int hh = 0; hh < heads; ++hh) {
        Var qh = slice_cols(q, hh * hd, (hh + 1) * hd);
        Var kh = slice_cols(k, hh * hd, (hh + 1) * hd);
        Var vh = slice_cols(v, hh * hd, (hh + 1) * hd);
        Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (causal) scores = add(scores, mask);
        Var att = softmax(scores, 1);
        head_outs.push_back(matmul(att, vh));
    }
    Var attn = add_rowvec(matmul(concat_cols(head_outs), bw.Wo), bw.bo);
    Var x1 = add(x, attn);

    Var h2 = layernorm(x1, bw.ln2_g, bw.ln2_b, 1e-5);
    Var mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, bw.Wm1), bw.bm1)), bw.Wm2), bw.bm2);
    return add(x1, mlp);
}

namespace {

std::vector<std::uint8_t> roi_row_mask(const SynthImage& img, int m) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(m), 0);
    for (int p : img.roi_patches)
        if (p >= 0 && p < m) mask[static_cast<std::size_t>(p)] = 1;
    return mask;
}

Var maybe_edit(const EditorSet* editors, EditorCtx& ctx, Site site, int layer, const Var& x,
               const std::vector<std::uint8_t>& mask) {
    if (!editors) return x;
    const EditorParams* e = editors->find(site, layer);
    if (!e) return x;
    return apply_editor_with_u(*e, ctx.u.at({site, layer}), x, mask);
}

}  // namespace

Var ToyModel::encode_image(const SynthImage& img, const EditorSet* editors, const EditPlan& plan,
                           EditorCtx& ctx) const {
    plan.validate(cfg_);
    const int m = cfg_.num_patches();
    if (img.grid != cfg_.patch_grid)
        throw std::invalid_argument("encode_image: image grid does not match model patch grid");

    // patch rasterization: row-major pixels within each patch
    Tensor patches({m, cfg_.patch_dim()});
    for (int p = 0; p < m; ++p) {
        const int pr = (p / cfg_.patch_grid) * kPatchSide;
        const int pc = (p % cfg_.patch_grid) * kPatchSide;
        for (int r = 0; r < kPatchSide; ++r)
            for (int c = 0; c < kPatchSide; ++c)
                patches.at(p, r * kPatchSide + c) = img.px(pr + r, pc + c);
    }

    Var x = add(add_rowvec(matmul(constant(std::move(patches)), w_.patch_embed), w_.patch_bias),
                w_.vis_pos);

    std::vector<std::uint8_t> mask;
    if (plan.roi_only) mask = roi_row_mask(img, m);

    // features come from the second-to-last encoder layer; the final layer
    // is never run for fusion and never hosts an editor
    for (int layer = 1; layer < cfg_.vision_layers; ++layer) {
        x = block_forward(x, w_.vision[static_cast<std::size_t>(layer - 1)], false, cfg_.heads);
        if (std::find(plan.visual_layers.begin(), plan.visual_layers.end(), layer) !=
            plan.visual_layers.end())
            x = maybe_edit(editors, ctx, Site::Visual, layer, x, mask);
    }
    return x;
}

Var ToyModel::project_cross_modality(const Var& visual_tokens, const SynthImage& img,
                                     const EditorSet* editors, const EditPlan& plan,
                                     EditorCtx& ctx) const {
    Var xv = add_rowvec(matmul(visual_tokens, w_.projector), w_.proj_bias);
    if (!plan.cross_modality) return xv;
    std::vector<std::uint8_t> mask;
    if (plan.roi_only) mask = roi_row_mask(img, cfg_.num_patches());
    return maybe_edit(editors, ctx, Site::Cross, 0, xv, mask);
}

Var ToyModel::fuse_and_decode(const Var& projected, const std::vector<int>& token_ids,
                              const EditorSet* editors, const EditPlan& plan,
                              EditorCtx& ctx) const {
    const int m = projected.value().rows();
    const int n = static_cast<int>(token_ids.size());
    if (n < 1) throw std::invalid_argument("fuse_and_decode: empty token sequence");
    if (m + n > cfg_.max_seq)
        throw std::invalid_argument("fuse_and_decode: fused sequence exceeds max_seq");

    int a = plan.prefix_len;
    int sfx = plan.suffix_len;
    if (plan.edit_all_text) {
        sfx = std::min(sfx, n);
        a = n - sfx;
    }
    const bool single_token = plan.control_token_index >= 0;
    const bool spans_used = !plan.decoder_layers.empty();
    if (!single_token && spans_used && a + sfx > n)
        throw std::invalid_argument("fuse_and_decode: prefix+suffix spans (" + std::to_string(a) +
                                    "+" + std::to_string(sfx) + ") overlap text length " +
                                    std::to_string(n));
    if (single_token && spans_used && plan.control_token_index >= n)
        throw std::invalid_argument("fuse_and_decode: control token index out of range");

    Var emb = gather_rows(w_.tok_embed, token_ids);
    Var x = add(concat_rows({projected, emb}), slice_rows(w_.dec_pos, 0, m + n));

    // per-site row masks over the fused sequence; visual rows never edited
    std::vector<std::uint8_t> pmask, smask, cmask;
    if (single_token) {
        cmask.assign(static_cast<std::size_t>(m + n), 0);
        cmask[static_cast<std::size_t>(m + plan.control_token_index)] = 1;
    } else {
        pmask.assign(static_cast<std::size_t>(m + n), 0);
        for (int i = 0; i < a; ++i) pmask[static_cast<std::size_t>(m + i)] = 1;
        smask.assign(static_cast<std::size_t>(m + n), 0);
        for (int i = n - sfx; i < n; ++i) smask[static_cast<std::size_t>(m + i)] = 1;
    }

    for (int layer = 1; layer <= cfg_.decoder_layers; ++layer) {
        x = block_forward(x, w_.decoder[static_cast<std::size_t>(layer - 1)], true, cfg_.heads);
        if (std::find(plan.decoder_layers.begin(), plan.decoder_layers.end(), layer) ==
            plan.decoder_layers.end())
            continue;
        if (single_token) {
            x = maybe_edit(editors, ctx, Site::ControlTarget, layer, x, cmask);
        } else {
            if (a > 0) x = maybe_edit(editors, ctx, Site::Prefix, layer, x, pmask);
            if (sfx > 0) x = maybe_edit(editors, ctx, Site::Suffix, layer, x, smask);
        }
    }

    Var h = layernorm(x, w_.final_ln_g, w_.final_ln_b, 1e-5);
    return add_rowvec(matmul(h, w_.head), w_.head_bias);
}

Var ToyModel::sample_loss(const Sample& s, const EditorSet* editors, const EditPlan& plan,
                          EditorCtx& ctx) const {
    bool any = false;
    for (auto v : s.mask) any = any || v;
    if (!any) throw std::invalid_argument("sample_loss: no supervised positions");

    Var tv = encode_image(s.image, editors, plan, ctx);
    Var xv = project_cross_modality(tv, s.image, editors, plan, ctx);
    Var lg = fuse_and_decode(xv, s.token_ids, editors, plan, ctx);

    const int m = cfg_.num_patches();
    const int n = static_cast<int>(s.token_ids.size());
    std::vector<int> targets(static_cast<std::size_t>(m + n), 0);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(m + n), 0);
    for (int k = 1; k < n; ++k) {
        targets[static_cast<std::size_t>(m + k - 1)] = s.token_ids[static_cast<std::size_t>(k)];
        mask[static_cast<std::size_t>(m + k - 1)] = s.mask[static_cast<std::size_t>(k)];
    }
    return cross_entropy(lg, targets, mask);
}

Var ToyModel::forward_loss(const std::vector<const Sample*>& batch, const EditorSet* editors,
                           const EditPlan& plan) const {
    if (batch.empty()) throw std::invalid_argument("forward_loss: empty batch");
    EditorCtx ctx = make_ctx(editors);
    Var total;
    for (const Sample* s : batch) {
        Var l = sample_loss(*s, editors, plan, ctx);
        total = total.defined() ? add(total, l) : l;
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

Tensor ToyModel::logits(const SynthImage& img, const std::vector<int>& token_ids,
                        const EditorSet* editors, const EditPlan& plan) const {
    NoGradGuard ng;
    EditorCtx ctx = make_ctx(editors);
    Var tv = encode_image(img, editors, plan, ctx);
    Var xv = project_cross_modality(tv, img, editors, plan, ctx);
    return fuse_and_decode(xv, token_ids, editors, plan, ctx).value();
}

std::vector<int> ToyModel::generate(const SynthImage& img, const std::vector<int>& prompt_ids,
                                    const EditorSet* editors, const EditPlan& plan,
                                    int max_new) const {
    NoGradGuard ng;
    const int m = cfg_.num_patches();
    if (m + static_cast<int>(prompt_ids.size()) >= cfg_.max_seq)
        throw std::invalid_argument("generate: prompt does not fit max_seq");

    EditorCtx ctx = make_ctx(editors);
    Var tv = encode_image(img, editors, plan, ctx);
    Var xv = project_cross_modality(tv, img, editors, plan, ctx);

    std::vector<int> ids = prompt_ids;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (m + static_cast<int>(ids.size()) >= cfg_.max_seq) break;
        Tensor lg = fuse_and_decode(xv, ids, editors, plan, ctx).value();
        const int last = lg.rows() - 1;
        int best = 0;
        for (int j = 1; j < lg.cols(); ++j)
            if (lg.at(last, j) > lg.at(last, best)) best = j;
        if (best == eos_id()) break;
        out.push_back(best);
        ids.push_back(best);
    }
    return out;
}

EditorSet make_editors(const EditPlan& plan, const ToyModelConfig& cfg, std::uint64_t seed) {
    plan.validate(cfg);
    EditorSet set;
    std::uint64_t k = 0;
    auto sub = [&](Site s, int layer) {
        return Rng::mix(seed, (static_cast<std::uint64_t>(s) << 32) |
                                  static_cast<std::uint64_t>(layer) | (++k << 40));
    };
    for (int i : plan.visual_layers)
        set.editors[{Site::Visual, i}] = init_editor(plan.visual_rank, cfg.d_v, sub(Site::Visual, i));
    if (plan.cross_modality)
        set.editors[{Site::Cross, 0}] = init_editor(plan.visual_rank, cfg.d_t, sub(Site::Cross, 0));
    for (int j : plan.decoder_layers) {
        if (plan.control_token_index >= 0) {
            set.editors[{Site::ControlTarget, j}] =
                init_editor(plan.multimodal_rank, cfg.d_t, sub(Site::ControlTarget, j));
        } else {
            set.editors[{Site::Prefix, j}] =
                init_editor(plan.multimodal_rank, cfg.d_t, sub(Site::Prefix, j));
            set.editors[{Site::Suffix, j}] =
                init_editor(plan.multimodal_rank, cfg.d_t, sub(Site::Suffix, j));
        }
    }
    return set;
}

}  // namespace mrt
