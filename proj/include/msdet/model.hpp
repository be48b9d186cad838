#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "msdet/autodiff.hpp"
#include "msdet/boxes.hpp"
#include "msdet/params.hpp"
#include "msdet/rng.hpp"

namespace msdet {

enum class Modality { visible = 0, infrared = 1 };

inline const char* modality_name(Modality m) {
  return m == Modality::visible ? "visible" : "infrared";
}

enum class ModalityMode { both, visible_only, infrared_only };

struct ModelConfig {
  size_t channels = 32;      // C
  size_t heads = 2;          // H
  size_t points = 4;         // K sampling points
  size_t levels = 3;         // L semantic levels
  size_t layers = 3;         // D decoder layers
  size_t num_queries = 60;   // N
  size_t num_classes = 4;
  size_t image_size = 64;
  size_t ffn_dim = 64;
  ModalityMode modality_mode = ModalityMode::both;
  // Ablation switches. mcqs: competitive selection over the concatenated
  // two-modality token sequence (off: selection on the added features).
  // mdca: deformable attention over both modality pyramids (off: over the
  // element-wise added pyramid). cqs: selected token features as query
  // content (off: learnable content embeddings).
  bool mcqs = true;
  bool mdca = true;
  bool cqs = true;

  size_t stride(size_t level) const { return size_t{1} << (level + 2); }  // 8,16,32 for 1..3
  size_t grid(size_t level) const { return image_size / stride(level); }
  // Effective modality count inside the deformable attention.
  size_t attn_modalities() const {
    return (modality_mode == ModalityMode::both && mdca) ? 2 : 1;
  }
  bool uses_modality(Modality m) const {
    if (modality_mode == ModalityMode::both) return true;
    return (modality_mode == ModalityMode::visible_only) ==
           (m == Modality::visible);
  }
  double base_anchor_size(size_t level) const {
    return 0.05 * static_cast<double>(size_t{1} << (level - 1));
  }
};

// Maps a normalized point to level pixel coordinates with the pixel-center
// convention.
inline std::pair<double, double> phi_scale(double x, double y, size_t level_w,
                                           size_t level_h) {
  return {x * static_cast<double>(level_w) - 0.5,
          y * static_cast<double>(level_h) - 0.5};
}

// Bounds a raw predicted offset inside the anchor box and scales it to level
// pixels: tanh(raw) * (w/2, h/2) in normalized units.
inline std::pair<double, double> psi_constrain(double raw_x, double raw_y,
                                               const Box& anchor,
                                               size_t level_w, size_t level_h) {
  return {std::tanh(raw_x) * 0.5 * anchor.w * static_cast<double>(level_w),
          std::tanh(raw_y) * 0.5 * anchor.h * static_cast<double>(level_h)};
}

struct TokenInfo {
  Modality modality;
  size_t level;  // 1-based
  size_t row, col;
  double px, py;  // normalized grid-center position
};

struct TokenSequence {
  Value feats;  // [T x C]
  std::vector<TokenInfo> info;
};

// One modality's (or the fused) feature pyramid as tape values.
struct Pyramid {
  std::vector<Value> levels;  // each [H_l x W_l x C]
};

struct LayerOutput {
  Value content;       // [Nq x C]
  Value anchors;       // [Nq x 4], the sampling anchors used by this layer
  Value class_logits;  // [Nq x num_classes]
  Value boxes;         // [Nq x 4], head-refined
};

// Detached per-layer sampling diagnostics for invariant checks and viz.
struct SamplingDiag {
  Tensor weights;      // [Nq x H x M*L*K]
  Tensor points;       // [Nq x M x H x L x K x 2], normalized coordinates
  Tensor anchors;      // [Nq x 4]
};

struct ForwardResult {
  std::vector<LayerOutput> layers;   // one per decoder layer; back() is final
  Value enc_scores;                  // [T x 1] token score logits
  Value sel_scores;                  // [N x 1] selected token logits
  Value sel_boxes;                   // [N x 4] proposal boxes (differentiable)
  std::vector<size_t> sel_tokens;    // token indices of the N selected queries
  std::vector<TokenInfo> token_info;
  size_t n_matching = 0;             // N
  size_t n_dn = 0;
  std::vector<SamplingDiag> diags;   // filled when record_diags
};

// Frozen selection state for finite-difference gradient checks: the chosen
// token set and the detached proposal anchors are values the autodiff
// deliberately treats as constants, so the check must hold them fixed too.
struct PinnedSelection {
  std::vector<size_t> tokens;
  Tensor anchors;  // [N x 4]
};

// Training-only denoising query batch; anchors are constants on the tape.
struct DnBatch {
  std::vector<size_t> labels;  // per dn query, class id for the content embedding
  Tensor anchors;              // [nd x 4]
  Tensor attn_mask;            // [(N+nd) x (N+nd)], 1 = blocked
};

// Two-branch multispectral detector: toy strided-patch backbones, modality
// competitive query selection, a cascaded decoder with multispectral
// deformable cross-attention, and a sigmoid classification head.
class Model {
 public:
  explicit Model(const ModelConfig& cfg, uint64_t init_seed = 1)
      : cfg_(cfg) {
    MSDET_CHECK(cfg.image_size % (size_t{1} << (cfg.levels + 2)) == 0,
                "image size ", cfg.image_size, " not divisible by 2^(L+2)=",
                size_t{1} << (cfg.levels + 2));
    MSDET_CHECK(cfg.channels % cfg.heads == 0, "channels ", cfg.channels,
                " not divisible by heads ", cfg.heads);
    Rng rng(init_seed, 0xB0D0);
    const size_t C = cfg.channels;
    for (Modality m : {Modality::visible, Modality::infrared}) {
      if (!cfg.uses_modality(m)) continue;
      const size_t ch = m == Modality::visible ? 3 : 1;
      for (size_t l = 1; l <= cfg.levels; ++l) {
        const size_t s = cfg.stride(l);
        const std::string base =
            std::string("backbone.") + modality_name(m) + ".l" + std::to_string(l);
        params_.create_glorot(base + ".w", {s * s * ch, C}, rng);
        params_.create(base + ".b", {C});
      }
    }
    params_.create_glorot("select.score.w", {C, 1}, rng);
    params_.create("select.score.b", {1});
    params_.create_glorot("select.proposal.w", {C, 4}, rng);
    params_.create("select.proposal.b", {4});
    if (!cfg.cqs) {
      Parameter& e = params_.create("select.content_embed", {cfg.num_queries, C});
      for (double& v : e.value.data) v = 0.02 * rng.normal();
    }
    {
      Parameter& e = params_.create("dn.class_embed", {cfg.num_classes, C});
      for (double& v : e.value.data) v = 0.02 * rng.normal();
    }
    params_.create_glorot("posembed.w1", {4, C}, rng);
    params_.create("posembed.b1", {C});
    params_.create_glorot("posembed.w2", {C, C}, rng);
    params_.create("posembed.b2", {C});

    const size_t M = cfg.attn_modalities();
    const size_t HLK = cfg.heads * cfg.levels * cfg.points;
    for (size_t d = 1; d <= cfg.layers; ++d) {
      const std::string base = "dec" + std::to_string(d);
      for (const char* n : {"q", "k", "v", "o"}) {
        params_.create_glorot(base + ".sa." + n + ".w", {C, C}, rng);
        params_.create(base + ".sa." + std::string(n) + ".b", {C});
      }
      // Offset/weight predictors start near zero so early sampling stays at
      // the reference point.
      Parameter& ow = params_.create(base + ".ca.offset.w", {C, M * HLK * 2});
      for (double& v : ow.value.data) v = 0.01 * rng.normal();
      params_.create(base + ".ca.offset.b", {M * HLK * 2});
      Parameter& aw = params_.create(base + ".ca.weight.w", {C, M * HLK});
      for (double& v : aw.value.data) v = 0.01 * rng.normal();
      params_.create(base + ".ca.weight.b", {M * HLK});
      params_.create_glorot(base + ".ca.value.w", {C, C}, rng);
      params_.create(base + ".ca.value.b", {C});
      params_.create_glorot(base + ".ca.out.w", {C, C}, rng);
      params_.create(base + ".ca.out.b", {C});
      if (d >= 2) {
        params_.create_glorot(base + ".refine.w1", {C, C}, rng);
        params_.create(base + ".refine.b1", {C});
        params_.create(base + ".refine.w2", {C, 4});  // zero init: identity refine
        params_.create(base + ".refine.b2", {4});
      }
      params_.create_glorot(base + ".ffn.w1", {C, cfg.ffn_dim}, rng);
      params_.create(base + ".ffn.b1", {cfg.ffn_dim});
      params_.create_glorot(base + ".ffn.w2", {cfg.ffn_dim, C}, rng);
      params_.create(base + ".ffn.b2", {C});
      for (const char* n : {"ln1", "ln2", "ln3"}) {
        Parameter& g = params_.create(base + "." + n + ".g", {C});
        std::fill(g.value.data.begin(), g.value.data.end(), 1.0);
        params_.create(base + "." + std::string(n) + ".b", {C});
      }
    }
    params_.create_glorot("head.cls.w", {C, cfg.num_classes}, rng);
    Parameter& cb = params_.create("head.cls.b", {cfg.num_classes});
    std::fill(cb.value.data.begin(), cb.value.data.end(), -2.0);  // low prior
    params_.create_glorot("head.box.w1", {C, C}, rng);
    params_.create("head.box.b1", {C});
    params_.create("head.box.w2", {C, 4});  // zero init: identity refine
    params_.create("head.box.b2", {4});
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }

  // -------------------------------------------------------------------------
  // Components
  // -------------------------------------------------------------------------

  Value linear(Tape& t, Value x, const std::string& w, const std::string& b) {
    return add(matmul(x, t.leaf(params_.at(w))), t.leaf(params_.at(b)));
  }

  // Strided patch projection pyramid for one modality. image is [H x W x ch].
  Pyramid toy_backbone_forward(Tape& t, const Tensor& image, Modality m) {
    MSDET_CHECK(image.ndim() == 3, "backbone: image must be HxWxch, got ",
                shape_str(image.shape));
    const size_t ih = image.shape[0], iw = image.shape[1], ch = image.shape[2];
    MSDET_CHECK(ch == (m == Modality::visible ? 3u : 1u), "backbone: ",
                modality_name(m), " expects ",
                (m == Modality::visible ? 3 : 1), " channels, got ", ch);
    Pyramid pyr;
    for (size_t l = 1; l <= cfg_.levels; ++l) {
      const size_t s = cfg_.stride(l);
      MSDET_CHECK(ih % s == 0 && iw % s == 0, "backbone: image ",
                  shape_str(image.shape), " not divisible by stride ", s);
      const size_t gh = ih / s, gw = iw / s;
      Tensor patches({gh * gw, s * s * ch});
      for (size_t gy = 0; gy < gh; ++gy)
        for (size_t gx = 0; gx < gw; ++gx) {
          double* row = &patches.data[(gy * gw + gx) * s * s * ch];
          for (size_t py = 0; py < s; ++py)
            for (size_t px = 0; px < s; ++px)
              for (size_t c = 0; c < ch; ++c)
                row[(py * s + px) * ch + c] =
                    image.data[((gy * s + py) * iw + gx * s + px) * ch + c];
        }
      const std::string base =
          std::string("backbone.") + modality_name(m) + ".l" + std::to_string(l);
      Value feat = vtanh(linear(t, t.constant(std::move(patches)), base + ".w",
                                base + ".b"));
      pyr.levels.push_back(reshape(feat, {gh, gw, cfg_.channels}));
    }
    return pyr;
  }

  // Flattens both pyramids into one tagged token sequence, visible first.
  TokenSequence flatten_and_tag(const std::vector<std::pair<Modality, Pyramid>>& pyrs) {
    TokenSequence seq;
    std::vector<Value> parts;
    for (const auto& [m, pyr] : pyrs) {
      MSDET_CHECK(pyr.levels.size() == cfg_.levels, "flatten: pyramid has ",
                  pyr.levels.size(), " levels, config says ", cfg_.levels);
      for (size_t l = 1; l <= cfg_.levels; ++l) {
        const Shape& s = pyr.levels[l - 1].shape();
        MSDET_CHECK(s[2] == cfg_.channels, "flatten: channel mismatch: ", s[2],
                    " vs ", cfg_.channels);
        const size_t gh = s[0], gw = s[1];
        parts.push_back(reshape(pyr.levels[l - 1], {gh * gw, cfg_.channels}));
        for (size_t r = 0; r < gh; ++r)
          for (size_t c = 0; c < gw; ++c)
            seq.info.push_back(TokenInfo{
                m, l, r, c, (static_cast<double>(c) + 0.5) / static_cast<double>(gw),
                (static_cast<double>(r) + 0.5) / static_cast<double>(gh)});
      }
    }
    seq.feats = concat(parts, 0);
    return seq;
  }

  // Two-layer MLP position embedding of 4D anchors: [n x 4] -> [n x C].
  Value position_embed(Tape& t, Value anchors) {
    Value h = relu(linear(t, anchors, "posembed.w1", "posembed.b1"));
    return linear(t, h, "posembed.w2", "posembed.b2");
  }

  // Scores all tokens, picks the Top-K_sel (ties to the lower index) and
  // builds initial queries. Outputs are written into `fr`.
  void competitive_query_selection(Tape& t, const TokenSequence& seq,
                                   size_t k_sel, ForwardResult& fr,
                                   const std::vector<size_t>* pinned = nullptr) {
    const size_t n_tokens = seq.info.size();
    MSDET_CHECK(k_sel <= n_tokens, "selection: K=", k_sel, " exceeds ",
                n_tokens, " tokens");
    fr.enc_scores = linear(t, seq.feats, "select.score.w", "select.score.b");
    if (pinned) {
      MSDET_CHECK(pinned->size() == k_sel, "selection: pinned token count ",
                  pinned->size(), " != K=", k_sel);
      fr.sel_tokens = *pinned;
    } else {
      const Tensor& sc = fr.enc_scores.val();
      std::vector<size_t> order(n_tokens);
      for (size_t i = 0; i < n_tokens; ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return sc.data[a] > sc.data[b];  // stable: ties keep lower index first
      });
      fr.sel_tokens.assign(order.begin(), order.begin() + k_sel);
    }
    fr.sel_scores = gather_rows(fr.enc_scores, fr.sel_tokens);

    // Proposal boxes: level-dependent base anchor refined in logit space.
    Tensor base({k_sel, 4});
    for (size_t i = 0; i < k_sel; ++i) {
      const TokenInfo& ti = seq.info[fr.sel_tokens[i]];
      const double sz = cfg_.base_anchor_size(ti.level);
      base.data[i * 4 + 0] = ti.px;
      base.data[i * 4 + 1] = ti.py;
      base.data[i * 4 + 2] = sz;
      base.data[i * 4 + 3] = sz;
    }
    Value sel_feats = gather_rows(seq.feats, fr.sel_tokens);
    Value delta = linear(t, sel_feats, "select.proposal.w", "select.proposal.b");
    fr.sel_boxes = logit_shift(t.constant(std::move(base)), delta);
  }

  // Eq.-2-style refinement: sigma(mlp(content) + logit(prev)).
  Value anchor_refine(Tape& t, Value content, Value prev_anchors,
                      const std::string& w1, const std::string& b1,
                      const std::string& w2, const std::string& b2) {
    Value h = relu(linear(t, content, w1, b1));
    Value delta = linear(t, h, w2, b2);
    return logit_shift(prev_anchors, delta);
  }

  // Multispectral deformable cross-attention for all queries at once.
  // pyrs_eff holds the attn_modalities() effective pyramids.
  Value ms_deformable_attention(Tape& t, Value content, Value pos,
                                Value anchors,
                                const std::vector<Pyramid>& pyrs_eff,
                                size_t layer, SamplingDiag* diag) {
    const size_t nq = content.shape()[0];
    const size_t C = cfg_.channels, H = cfg_.heads, L = cfg_.levels,
                 K = cfg_.points;
    const size_t M = cfg_.attn_modalities();
    MSDET_CHECK(pyrs_eff.size() == M, "mdca: expected ", M, " pyramids, got ",
                pyrs_eff.size());
    const std::string base = "dec" + std::to_string(layer) + ".ca";
    Value zp = add(content, pos);
    Value raw_off = linear(t, zp, base + ".offset.w", base + ".offset.b");
    Value raw_w = linear(t, zp, base + ".weight.w", base + ".weight.b");
    // Joint softmax over modalities x levels x points, per (query, head).
    Value weights = softmax(reshape(raw_w, {nq, H, M * L * K}), 2);

    // Normalized sampling points: center + tanh(offset) * (w/2, h/2).
    Value center = reshape(slice(anchors, 1, 0, 2), {nq, 1, 1, 1, 1, 2});
    Value half_wh = scale(reshape(slice(anchors, 1, 2, 2), {nq, 1, 1, 1, 1, 2}), 0.5);
    Value toff = vtanh(reshape(raw_off, {nq, M, H, L, K, 2}));
    Value pts_norm = add(center, mul(toff, half_wh));

    if (diag) {
      diag->weights = weights.val();
      diag->points = pts_norm.val();
      diag->anchors = anchors.val();
    }

    // Value projection once per effective pyramid level.
    Value accum;  // [nq x H x C]
    for (size_t m = 0; m < M; ++m)
      for (size_t l = 0; l < L; ++l) {
        const Shape& ms = pyrs_eff[m].levels[l].shape();
        const size_t gh = ms[0], gw = ms[1];
        Value vmap = linear(t, reshape(pyrs_eff[m].levels[l], {gh * gw, C}),
                            base + ".value.w", base + ".value.b");
        vmap = reshape(vmap, {gh, gw, C});
        Value pml = slice(slice(pts_norm, 1, m, 1), 3, l, 1);  // [nq,1,H,1,K,2]
        pml = reshape(pml, {nq * H * K, 2});
        Tensor sc({2}, {static_cast<double>(gw), static_cast<double>(gh)});
        Value pix = add_const(mul(pml, t.constant(std::move(sc))), -0.5);
        Value sampled = reshape(bilinear_sample(vmap, pix), {nq, H, K, C});
        Value wml = reshape(slice(weights, 2, (m * L + l) * K, K), {nq, H, K, 1});
        Value contrib = reduce_sum(mul(sampled, wml), 2);  // [nq x H x C]
        accum = accum.valid() ? add(accum, contrib) : contrib;
      }

    // Per-head channel selection, then the output projection.
    const size_t dh = C / H;
    std::vector<Value> head_outs;
    for (size_t h = 0; h < H; ++h) {
      Value hv = slice(slice(accum, 1, h, 1), 2, h * dh, dh);
      head_outs.push_back(reshape(hv, {nq, dh}));
    }
    return linear(t, concat(head_outs, 1), base + ".out.w", base + ".out.b");
  }

  // Masked multi-head self-attention; position embeddings enter queries/keys.
  Value self_attention(Tape& t, Value content, Value pos, const Tensor* mask,
                       size_t layer) {
    const size_t nq = content.shape()[0];
    const size_t C = cfg_.channels, H = cfg_.heads, dh = C / H;
    const std::string base = "dec" + std::to_string(layer) + ".sa";
    Value zp = add(content, pos);
    Value Q = linear(t, zp, base + ".q.w", base + ".q.b");
    Value Kv = linear(t, zp, base + ".k.w", base + ".k.b");
    Value V = linear(t, content, base + ".v.w", base + ".v.b");
    Value mask_add;
    if (mask) {
      MSDET_CHECK(mask->ndim() == 2 && mask->shape[0] == nq && mask->shape[1] == nq,
                  "self_attention: mask shape ", shape_str(mask->shape),
                  " does not match ", nq, " queries");
      Tensor ma(mask->shape);
      for (size_t i = 0; i < ma.data.size(); ++i)
        ma.data[i] = mask->data[i] != 0.0 ? -1e9 : 0.0;
      mask_add = t.constant(std::move(ma));
    }
    std::vector<Value> heads;
    for (size_t h = 0; h < H; ++h) {
      Value qh = slice(Q, 1, h * dh, dh);
      Value kh = slice(Kv, 1, h * dh, dh);
      Value vh = slice(V, 1, h * dh, dh);
      Value scores = scale(matmul(qh, transpose2d(kh)),
                           1.0 / std::sqrt(static_cast<double>(dh)));
      if (mask_add.valid()) scores = add(scores, mask_add);
      heads.push_back(matmul(softmax(scores, 1), vh));
    }
    return linear(t, concat(heads, 1), base + ".o.w", base + ".o.b");
  }

  Value decoder_layer_forward(Tape& t, Value content, Value anchors,
                              const std::vector<Pyramid>& pyrs_eff,
                              const Tensor* mask, size_t layer,
                              SamplingDiag* diag) {
    const std::string base = "dec" + std::to_string(layer);
    Value pos = position_embed(t, anchors);
    Value x = content;
    x = layer_norm(add(x, self_attention(t, x, pos, mask, layer)),
                   t.leaf(params_.at(base + ".ln1.g")),
                   t.leaf(params_.at(base + ".ln1.b")));
    x = layer_norm(
        add(x, ms_deformable_attention(t, x, pos, anchors, pyrs_eff, layer, diag)),
        t.leaf(params_.at(base + ".ln2.g")),
        t.leaf(params_.at(base + ".ln2.b")));
    Value ff = linear(t, relu(linear(t, x, base + ".ffn.w1", base + ".ffn.b1")),
                      base + ".ffn.w2", base + ".ffn.b2");
    return layer_norm(add(x, ff), t.leaf(params_.at(base + ".ln3.g")),
                      t.leaf(params_.at(base + ".ln3.b")));
  }

  // Shared detection head: per-class sigmoid logits + a box refinement of the
  // incoming anchor.
  std::pair<Value, Value> detection_head_forward(Tape& t, Value content,
                                                 Value anchors) {
    Value logits = linear(t, content, "head.cls.w", "head.cls.b");
    Value boxes = anchor_refine(t, content, anchors, "head.box.w1",
                                "head.box.b1", "head.box.w2", "head.box.b2");
    return {logits, boxes};
  }

  // Full forward pass. visible is [S x S x 3], infrared [S x S x 1]; either
  // may be unused depending on modality_mode.
  ForwardResult model_forward(Tape& t, const Tensor& visible,
                              const Tensor& infrared,
                              const DnBatch* dn = nullptr,
                              bool record_diags = false,
                              const PinnedSelection* pin = nullptr) {
    ForwardResult fr;
    Pyramid vis, ir;
    std::vector<std::pair<Modality, Pyramid>> tagged;
    if (cfg_.modality_mode == ModalityMode::both)
      MSDET_CHECK(visible.shape[0] == infrared.shape[0] &&
                      visible.shape[1] == infrared.shape[1],
                  "model_forward: modality images must share spatial extents");
    if (cfg_.uses_modality(Modality::visible))
      vis = toy_backbone_forward(t, visible, Modality::visible);
    if (cfg_.uses_modality(Modality::infrared))
      ir = toy_backbone_forward(t, infrared, Modality::infrared);

    // Effective pyramids for cross-attention.
    std::vector<Pyramid> pyrs_eff;
    if (cfg_.modality_mode == ModalityMode::both) {
      if (cfg_.mdca) {
        pyrs_eff = {vis, ir};
      } else {
        Pyramid fused;
        for (size_t l = 0; l < cfg_.levels; ++l)
          fused.levels.push_back(add(vis.levels[l], ir.levels[l]));
        pyrs_eff = {fused};
      }
    } else if (cfg_.modality_mode == ModalityMode::visible_only) {
      pyrs_eff = {vis};
    } else {
      pyrs_eff = {ir};
    }

    // Token sequence for selection.
    TokenSequence seq;
    if (cfg_.modality_mode == ModalityMode::both) {
      if (cfg_.mcqs) {
        seq = flatten_and_tag({{Modality::visible, vis}, {Modality::infrared, ir}});
      } else {
        // Standard selection on the added features; provenance discarded.
        Pyramid fused;
        for (size_t l = 0; l < cfg_.levels; ++l)
          fused.levels.push_back(add(vis.levels[l], ir.levels[l]));
        seq = flatten_and_tag({{Modality::visible, fused}});
      }
    } else {
      const Modality m = cfg_.modality_mode == ModalityMode::visible_only
                             ? Modality::visible
                             : Modality::infrared;
      seq = flatten_and_tag({{m, cfg_.modality_mode == ModalityMode::visible_only ? vis : ir}});
    }
    fr.token_info = seq.info;

    competitive_query_selection(t, seq, cfg_.num_queries, fr,
                                pin ? &pin->tokens : nullptr);
    fr.n_matching = cfg_.num_queries;

    Value content;
    if (cfg_.cqs) {
      content = gather_rows(seq.feats, fr.sel_tokens);
    } else {
      content = t.leaf(params_.at("select.content_embed"));
    }
    // Initial anchors are constants: decoder box gradients do not reach the
    // proposal head; the encoder auxiliary loss trains it instead.
    Value anchors = pin ? t.constant(pin->anchors) : t.detach(fr.sel_boxes);

    const Tensor* mask = nullptr;
    if (dn && !dn->labels.empty()) {
      fr.n_dn = dn->labels.size();
      MSDET_CHECK(dn->anchors.shape[0] == fr.n_dn, "dn anchors/labels mismatch");
      Value dn_content = gather_rows(t.leaf(params_.at("dn.class_embed")), dn->labels);
      content = concat({content, dn_content}, 0);
      anchors = concat({anchors, t.constant(dn->anchors)}, 0);
      mask = &dn->attn_mask;
    }

    for (size_t d = 1; d <= cfg_.layers; ++d) {
      if (d >= 2) {
        const std::string base = "dec" + std::to_string(d) + ".refine";
        anchors = anchor_refine(t, content, anchors, base + ".w1", base + ".b1",
                                base + ".w2", base + ".b2");
      }
      SamplingDiag diag;
      content = decoder_layer_forward(t, content, anchors, pyrs_eff, mask, d,
                                      record_diags ? &diag : nullptr);
      if (record_diags) fr.diags.push_back(std::move(diag));
      auto [logits, boxes] = detection_head_forward(t, content, anchors);
      fr.layers.push_back(LayerOutput{content, anchors, logits, boxes});
    }
    return fr;
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace msdet
