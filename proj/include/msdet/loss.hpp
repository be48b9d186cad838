#pragma once

#include <vector>

#include "msdet/boxes.hpp"
#include "msdet/hungarian.hpp"
#include "msdet/model.hpp"
#include "msdet/rng.hpp"

namespace msdet {

struct GtObject {
  size_t class_id = 0;
  Box box;
};
using GroundTruthSet = std::vector<GtObject>;

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double dn = 1.0;
  double enc = 1.0;
};

// Varifocal loss constants (published defaults of the cited formulation).
inline constexpr double kVflAlpha = 0.75;
inline constexpr double kVflGamma = 2.0;
inline constexpr double kProbEps = 1e-7;

// Scalar IoU-aware classification loss. For a positive target q > 0 the BCE
// is scaled by q; negatives get the focal down-weighting alpha * p^gamma.
inline double vfl_loss(double p, double q) {
  p = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
  if (q > 0.0) return -q * (q * std::log(p) + (1.0 - q) * std::log(1.0 - p));
  return -kVflAlpha * std::pow(p, kVflGamma) * std::log(1.0 - p);
}

// Elementwise VFL over a probability tensor with constant targets.
// Returns the sum of per-element losses as a scalar Value.
inline Value vfl_sum(Value probs, const Tensor& targets) {
  MSDET_CHECK(probs.shape() == targets.shape, "vfl_sum: shape mismatch: ",
              shape_str(probs.shape()), " vs ", shape_str(targets.shape));
  Tape& t = *probs.tape;
  Tensor pos_mask(targets.shape), qv(targets.shape), neg_mask(targets.shape);
  for (size_t i = 0; i < targets.data.size(); ++i) {
    const bool pos = targets.data[i] > 0.0;
    pos_mask.data[i] = pos ? 1.0 : 0.0;
    neg_mask.data[i] = pos ? 0.0 : 1.0;
    qv.data[i] = targets.data[i];
  }
  Value p = clampv(probs, kProbEps, 1.0 - kProbEps);
  Value logp = vlog(p);
  Value log1mp = vlog(add_const(neg(p), 1.0));
  Value q = t.constant(qv);
  Value pos_term = neg(mul(q, add(mul(q, logp), mul(add_const(neg(q), 1.0), log1mp))));
  Value neg_term = scale(neg(mul(mul(p, p), log1mp)), kVflAlpha);
  Value loss = add(mul(t.constant(pos_mask), pos_term),
                   mul(t.constant(neg_mask), neg_term));
  return sum_all(loss);
}

// ---------------------------------------------------------------------------
// Denoising query construction
// ---------------------------------------------------------------------------

enum class DnKind { positive, negative };

struct DnSupervision {
  DnKind kind;
  size_t origin_gt;
  size_t noised_label;  // label used for the content embedding (possibly flipped)
};

struct DnPlan {
  DnBatch batch;                     // consumed by Model::model_forward
  std::vector<DnSupervision> sup;    // one entry per dn query
  std::vector<size_t> group_of;      // group id per dn query
};

// Builds `pairs` (positive, negative) denoising groups from the ground truth.
// Positive groups jitter centers within lambda * extent / 2 and scale sizes in
// [1-lambda, 1+lambda]; negative groups use doubled jitter. The attention mask
// blocks dn <-> matching attention and attention across distinct dn groups.
inline DnPlan build_denoise_groups(const GroundTruthSet& gt, size_t n_matching,
                                   size_t pairs, double box_noise,
                                   double label_flip, size_t num_classes,
                                   Rng& rng) {
  MSDET_CHECK(box_noise >= 0.0, "build_denoise_groups: lambda must be >= 0");
  MSDET_CHECK(label_flip >= 0.0 && label_flip <= 1.0,
              "build_denoise_groups: flip probability must be in [0,1]");
  DnPlan plan;
  const size_t ng = gt.size();
  const size_t nd = 2 * pairs * ng;
  const size_t total = n_matching + nd;
  plan.batch.attn_mask = Tensor({total, total});
  if (nd == 0) return plan;
  plan.batch.anchors = Tensor({nd, 4});

  const double eps = kInverseSigmoidEps;
  size_t qi = 0;
  for (size_t pair = 0; pair < pairs; ++pair) {
    for (DnKind kind : {DnKind::positive, DnKind::negative}) {
      const size_t group = 2 * pair + (kind == DnKind::negative ? 1 : 0);
      const double lam = kind == DnKind::positive ? box_noise : 2.0 * box_noise;
      for (size_t g = 0; g < ng; ++g, ++qi) {
        const Box& b = gt[g].box;
        Box nb;
        nb.cx = b.cx + rng.uniform(-lam * b.w / 2.0, lam * b.w / 2.0);
        nb.cy = b.cy + rng.uniform(-lam * b.h / 2.0, lam * b.h / 2.0);
        nb.w = b.w * rng.uniform(1.0 - lam, 1.0 + lam);
        nb.h = b.h * rng.uniform(1.0 - lam, 1.0 + lam);
        size_t label = gt[g].class_id;
        if (num_classes > 1 && rng.uniform() < label_flip) {
          size_t other = rng.below(num_classes - 1);
          if (other >= label) ++other;
          label = other;
        }
        const double vals[4] = {nb.cx, nb.cy, nb.w, nb.h};
        for (size_t c = 0; c < 4; ++c)
          plan.batch.anchors.data[qi * 4 + c] =
              std::min(std::max(vals[c], eps), 1.0 - eps);
        plan.batch.labels.push_back(label);
        plan.sup.push_back(DnSupervision{kind, g, label});
        plan.group_of.push_back(group);
      }
    }
  }

  Tensor& mask = plan.batch.attn_mask;
  for (size_t i = 0; i < total; ++i)
    for (size_t j = 0; j < total; ++j) {
      const bool i_dn = i >= n_matching, j_dn = j >= n_matching;
      if (i_dn != j_dn) {
        mask.data[i * total + j] = 1.0;
      } else if (i_dn && j_dn &&
                 plan.group_of[i - n_matching] != plan.group_of[j - n_matching]) {
        mask.data[i * total + j] = 1.0;
      }
    }
  return plan;
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

// Frozen assignments and IoU targets for finite-difference gradient checks.
// The Hungarian assignment is discrete and the VFL targets are detached
// values; both change under parameter perturbation without contributing
// analytic gradient, so a check must hold them fixed. Filled by passing
// `record` to total_loss on a reference evaluation.
struct LossPins {
  std::vector<MatchResult> layer_match;
  std::vector<Tensor> layer_targets;
  std::vector<Tensor> dn_targets;
  MatchResult enc_match;
  Tensor enc_targets;
};

struct LossBreakdown {
  double cls = 0, l1 = 0, giou = 0;  // final decoder layer, unweighted
  std::vector<double> aux;           // weighted per earlier decoder layer
  double dn = 0;                     // weighted denoising loss, all layers
  double enc = 0;                    // weighted encoder-proposal auxiliary
  double total = 0;
  Value total_value;                 // scalar on the tape
  MatchResult final_match;           // final-layer assignment
};

namespace detail {

// Matching cost for one decoder layer, built from detached predictions.
inline Tensor match_cost(const Tensor& probs, const Tensor& boxes,
                         const GroundTruthSet& gt, const LossWeights& w,
                         size_t nq) {
  Tensor cost({nq, gt.size()});
  for (size_t q = 0; q < nq; ++q) {
    Box pb{boxes.data[q * 4], boxes.data[q * 4 + 1], boxes.data[q * 4 + 2],
           boxes.data[q * 4 + 3]};
    for (size_t g = 0; g < gt.size(); ++g) {
      const Box& gb = gt[g].box;
      const double p = probs.data[q * probs.shape[1] + gt[g].class_id];
      const double l1 = std::fabs(pb.cx - gb.cx) + std::fabs(pb.cy - gb.cy) +
                        std::fabs(pb.w - gb.w) + std::fabs(pb.h - gb.h);
      cost.at(q, g) =
          w.cls * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - giou(pb, gb));
    }
  }
  return cost;
}

struct LayerLoss {
  Value weighted;  // scalar
  double cls = 0, l1 = 0, giou = 0;
  MatchResult match;
  Tensor targets;
};

// Classification (VFL, IoU-aware targets) + box loss for one set of
// predictions against the ground truth under Hungarian assignment.
inline LayerLoss matched_set_loss(Tape& t, Value logits, Value boxes,
                                  const GroundTruthSet& gt,
                                  const LossWeights& w, size_t nq,
                                  size_t num_classes,
                                  const MatchResult* pin_match = nullptr,
                                  const Tensor* pin_targets = nullptr) {
  LayerLoss out;
  Value probs = sigmoid(slice(logits, 0, 0, nq));
  Value pboxes = slice(boxes, 0, 0, nq);
  if (pin_match)
    out.match = *pin_match;
  else if (!gt.empty())
    out.match = hungarian_match(match_cost(probs.val(), pboxes.val(), gt, w, nq));

  // IoU-aware targets: matched queries get IoU(pred, gt) at the gt class.
  Tensor targets({nq, num_classes});
  if (pin_targets) {
    targets = *pin_targets;
  } else {
    const Tensor& bv = pboxes.val();
    for (const auto& [q, g] : out.match.pairs) {
      Box pb{bv.data[q * 4], bv.data[q * 4 + 1], bv.data[q * 4 + 2],
             bv.data[q * 4 + 3]};
      targets.data[q * num_classes + gt[g].class_id] = iou(pb, gt[g].box);
    }
  }
  out.targets = targets;
  Value cls = scale(vfl_sum(probs, targets), 1.0 / static_cast<double>(nq));
  out.cls = cls.val()[0];

  Value weighted = scale(cls, w.cls);
  if (!out.match.pairs.empty()) {
    std::vector<size_t> qrows;
    Tensor gt_boxes({out.match.pairs.size(), 4});
    for (size_t i = 0; i < out.match.pairs.size(); ++i) {
      const auto& [q, g] = out.match.pairs[i];
      qrows.push_back(q);
      gt_boxes.data[i * 4 + 0] = gt[g].box.cx;
      gt_boxes.data[i * 4 + 1] = gt[g].box.cy;
      gt_boxes.data[i * 4 + 2] = gt[g].box.w;
      gt_boxes.data[i * 4 + 3] = gt[g].box.h;
    }
    Value mb = gather_rows(pboxes, qrows);
    Value gb = t.constant(std::move(gt_boxes));
    const double inv_ng = 1.0 / static_cast<double>(gt.size());
    Value l1 = scale(sum_all(l1_rows(mb, gb)), inv_ng);
    Value gi = scale(sum_all(add_const(neg(giou_rows(mb, gb)), 1.0)), inv_ng);
    out.l1 = l1.val()[0];
    out.giou = gi.val()[0];
    weighted = add(weighted, add(scale(l1, w.l1), scale(gi, w.giou)));
  }
  out.weighted = weighted;
  return out;
}

// Denoising loss for one layer: known assignment, no matching.
inline Value dn_layer_loss(Tape& t, Value logits, Value boxes,
                           const GroundTruthSet& gt, const DnPlan& dn,
                           const LossWeights& w, size_t n_matching,
                           size_t num_classes,
                           const Tensor* pin_targets = nullptr,
                           Tensor* rec_targets = nullptr) {
  const size_t nd = dn.sup.size();
  Value probs = sigmoid(slice(logits, 0, n_matching, nd));
  Value pboxes = slice(boxes, 0, n_matching, nd);
  Tensor targets({nd, num_classes});
  std::vector<size_t> pos_rows;
  std::vector<size_t> pos_gt;
  const Tensor& bv = pboxes.val();
  for (size_t i = 0; i < nd; ++i) {
    if (dn.sup[i].kind != DnKind::positive) continue;
    const GtObject& o = gt[dn.sup[i].origin_gt];
    Box pb{bv.data[i * 4], bv.data[i * 4 + 1], bv.data[i * 4 + 2],
           bv.data[i * 4 + 3]};
    targets.data[i * num_classes + o.class_id] = iou(pb, o.box);
    pos_rows.push_back(i);
    pos_gt.push_back(dn.sup[i].origin_gt);
  }
  if (pin_targets) targets = *pin_targets;
  if (rec_targets) *rec_targets = targets;
  Value loss = scale(vfl_sum(probs, targets),
                     w.cls / static_cast<double>(nd));
  if (!pos_rows.empty()) {
    Tensor gt_boxes({pos_rows.size(), 4});
    for (size_t i = 0; i < pos_rows.size(); ++i) {
      const Box& b = gt[pos_gt[i]].box;
      gt_boxes.data[i * 4 + 0] = b.cx;
      gt_boxes.data[i * 4 + 1] = b.cy;
      gt_boxes.data[i * 4 + 2] = b.w;
      gt_boxes.data[i * 4 + 3] = b.h;
    }
    Value mb = gather_rows(pboxes, pos_rows);
    Value gb = t.constant(std::move(gt_boxes));
    const double inv = 1.0 / static_cast<double>(pos_rows.size());
    loss = add(loss, scale(sum_all(l1_rows(mb, gb)), w.l1 * inv));
    loss = add(loss,
               scale(sum_all(add_const(neg(giou_rows(mb, gb)), 1.0)), w.giou * inv));
  }
  return loss;
}

}  // namespace detail

// Eq.-4-style total: final-layer cls+box, per-layer auxiliary losses, the
// denoising loss, and the encoder-proposal auxiliary loss.
inline LossBreakdown total_loss(Tape& t, const ForwardResult& fr,
                                const GroundTruthSet& gt, const LossWeights& w,
                                size_t num_classes, const DnPlan* dn = nullptr,
                                const LossPins* pins = nullptr,
                                LossPins* record = nullptr) {
  for (const GtObject& o : gt)
    MSDET_CHECK(o.box.w > 0 && o.box.h > 0, "total_loss: ground-truth box with "
                "non-positive extent");
  LossBreakdown out;
  const size_t nq = fr.n_matching;
  Value total;
  for (size_t d = 0; d < fr.layers.size(); ++d) {
    auto ll = detail::matched_set_loss(
        t, fr.layers[d].class_logits, fr.layers[d].boxes, gt, w, nq,
        num_classes, pins ? &pins->layer_match[d] : nullptr,
        pins ? &pins->layer_targets[d] : nullptr);
    if (record) {
      record->layer_match.push_back(ll.match);
      record->layer_targets.push_back(ll.targets);
    }
    if (d + 1 == fr.layers.size()) {
      out.cls = ll.cls;
      out.l1 = ll.l1;
      out.giou = ll.giou;
      out.final_match = std::move(ll.match);
    } else {
      out.aux.push_back(ll.weighted.val()[0]);
    }
    total = total.valid() ? add(total, ll.weighted) : ll.weighted;
  }

  if (dn && !dn->sup.empty()) {
    Value dn_total;
    for (size_t d = 0; d < fr.layers.size(); ++d) {
      const LayerOutput& lo = fr.layers[d];
      Tensor rec_t;
      Value l = detail::dn_layer_loss(t, lo.class_logits, lo.boxes, gt, *dn, w,
                                      nq, num_classes,
                                      pins ? &pins->dn_targets[d] : nullptr,
                                      record ? &rec_t : nullptr);
      if (record) record->dn_targets.push_back(std::move(rec_t));
      dn_total = dn_total.valid() ? add(dn_total, l) : l;
    }
    dn_total = scale(dn_total, w.dn);
    out.dn = dn_total.val()[0];
    total = add(total, dn_total);
  }

  // Encoder auxiliary: class-agnostic objectness + proposal boxes of the
  // Top-K selected tokens, same recipe with a single "class".
  {
    GroundTruthSet agn = gt;
    for (GtObject& o : agn) o.class_id = 0;
    auto el = detail::matched_set_loss(t, fr.sel_scores, fr.sel_boxes, agn, w,
                                       nq, 1, pins ? &pins->enc_match : nullptr,
                                       pins ? &pins->enc_targets : nullptr);
    if (record) {
      record->enc_match = el.match;
      record->enc_targets = el.targets;
    }
    Value enc = scale(el.weighted, w.enc);
    out.enc = enc.val()[0];
    total = add(total, enc);
  }

  out.total_value = total;
  out.total = total.val()[0];
  return out;
}

}  // namespace msdet
