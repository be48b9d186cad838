#pragma once

#include <algorithm>
#include <vector>

#include "msdet/loss.hpp"
#include "msdet/scenes.hpp"

namespace msdet {

struct Detection {
  size_t class_id = 0;
  Box box;
  double confidence = 0.0;
};

struct EvalReport {
  double ap50 = 0, ap75 = 0, ap = 0;  // ap = mean over IoU 0.50:0.95:0.05
  std::vector<double> per_class_ap;   // mean over thresholds, indexed by class
  size_t n_detections = 0, n_gt = 0;
};

inline const std::vector<double>& coco_iou_thresholds() {
  static const std::vector<double> th = [] {
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.push_back(0.5 + 0.05 * i);
    return v;
  }();
  return th;
}

// 101-point interpolated AP from (recall, precision) operating points given
// as cumulative TP/FP flags in confidence order.
inline double interpolated_ap(const std::vector<char>& tp_flags, size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> recalls, precisions;
  size_t tp = 0, fp = 0;
  for (char f : tp_flags) {
    if (f) ++tp; else ++fp;
    recalls.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precisions.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    double best = 0.0;
    for (size_t j = 0; j < recalls.size(); ++j)
      if (recalls[j] >= r) best = std::max(best, precisions[j]);
    ap += best / 101.0;
  }
  return ap;
}

// COCO-style evaluation: greedy matching in confidence order, per class and
// IoU threshold; no NMS, no confidence threshold. Ties in confidence break by
// (image index, detection index) for determinism.
inline EvalReport evaluate_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const std::vector<GroundTruthSet>& gt_per_image, size_t num_classes) {
  MSDET_CHECK(dets_per_image.size() == gt_per_image.size(),
              "evaluate_detections: image count mismatch");
  EvalReport rep;
  rep.per_class_ap.assign(num_classes, 0.0);
  const auto& thresholds = coco_iou_thresholds();

  std::vector<double> ap_at_thr(thresholds.size(), 0.0);
  std::vector<size_t> classes_with_gt;
  for (size_t c = 0; c < num_classes; ++c) {
    size_t n_gt = 0;
    for (const auto& gts : gt_per_image)
      for (const auto& g : gts)
        if (g.class_id == c) ++n_gt;
    if (n_gt > 0) classes_with_gt.push_back(c);
  }

  for (const auto& dets : dets_per_image) rep.n_detections += dets.size();
  for (const auto& gts : gt_per_image) rep.n_gt += gts.size();

  for (size_t c : classes_with_gt) {
    // (confidence, image, det index), sorted descending with stable ties.
    struct Entry { double conf; size_t img, di; };
    std::vector<Entry> entries;
    for (size_t i = 0; i < dets_per_image.size(); ++i)
      for (size_t d = 0; d < dets_per_image[i].size(); ++d)
        if (dets_per_image[i][d].class_id == c)
          entries.push_back({dets_per_image[i][d].confidence, i, d});
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.conf > b.conf; });
    size_t n_gt = 0;
    std::vector<std::vector<size_t>> gt_idx(gt_per_image.size());
    for (size_t i = 0; i < gt_per_image.size(); ++i)
      for (size_t g = 0; g < gt_per_image[i].size(); ++g)
        if (gt_per_image[i][g].class_id == c) {
          gt_idx[i].push_back(g);
          ++n_gt;
        }

    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      const double thr = thresholds[ti];
      std::vector<std::vector<char>> used(gt_per_image.size());
      for (size_t i = 0; i < used.size(); ++i) used[i].assign(gt_idx[i].size(), 0);
      std::vector<char> tp_flags;
      for (const Entry& e : entries) {
        const Detection& d = dets_per_image[e.img][e.di];
        double best_iou = 0.0;
        size_t best_g = gt_idx[e.img].size();
        for (size_t gi = 0; gi < gt_idx[e.img].size(); ++gi) {
          if (used[e.img][gi]) continue;
          const double v = iou(d.box, gt_per_image[e.img][gt_idx[e.img][gi]].box);
          if (v > best_iou) {
            best_iou = v;
            best_g = gi;
          }
        }
        if (best_g < gt_idx[e.img].size() && best_iou >= thr) {
          used[e.img][best_g] = 1;
          tp_flags.push_back(1);
        } else {
          tp_flags.push_back(0);
        }
      }
      const double ap = interpolated_ap(tp_flags, n_gt);
      ap_at_thr[ti] += ap;
      rep.per_class_ap[c] += ap / static_cast<double>(thresholds.size());
      if (ti == 0) rep.ap50 += ap;
      if (thresholds[ti] == 0.75) rep.ap75 += ap;
    }
  }

  const double nc = static_cast<double>(std::max<size_t>(1, classes_with_gt.size()));
  rep.ap50 /= nc;
  rep.ap75 /= nc;
  double mean = 0.0;
  for (double v : ap_at_thr) mean += v / nc;
  rep.ap = mean / static_cast<double>(thresholds.size());
  return rep;
}

// Turns one forward pass into detections: per query, argmax class probability
// as confidence. No NMS or thresholding.
inline std::vector<Detection> detections_from_output(const Tensor& probs,
                                                     const Tensor& boxes) {
  const size_t nq = probs.shape[0], nc = probs.shape[1];
  std::vector<Detection> dets;
  for (size_t q = 0; q < nq; ++q) {
    Detection d;
    d.class_id = 0;
    for (size_t c = 1; c < nc; ++c)
      if (probs.data[q * nc + c] > probs.data[q * nc + d.class_id]) d.class_id = c;
    d.confidence = probs.data[q * nc + d.class_id];
    d.box = Box{boxes.data[q * 4], boxes.data[q * 4 + 1], boxes.data[q * 4 + 2],
                boxes.data[q * 4 + 3]};
    dets.push_back(d);
  }
  return dets;
}

}  // namespace msdet
