#pragma once

#include <fstream>
#include <numeric>
#include <ostream>
#include <vector>

#include "msdet/eval.hpp"
#include "msdet/loss.hpp"
#include "msdet/model.hpp"
#include "msdet/scenes.hpp"

namespace msdet {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
  // Linear warmup over the first `lr_warmup_steps` steps, then cosine decay
  // towards lr * lr_final_scale at `lr_total_steps`. lr_total_steps == 0
  // keeps the rate constant after warmup.
  size_t lr_warmup_steps = 0;
  size_t lr_total_steps = 0;
  double lr_final_scale = 0.1;
  size_t epochs = 8;
  uint64_t seed = 0;
  // Translation jitter applied independently per modality during training,
  // as a fraction of image size (0 disables). Content moves, boxes do not,
  // so nonzero values augment the dataset's modality misalignment.
  double aug_shift = 0.0;
  double aug_prob = 1.0;  // fraction of steps the jitter is applied to
  bool dn_enabled = false;
  size_t dn_pairs = 1;
  double dn_box_noise = 0.4;
  double dn_label_flip = 0.25;
  LossWeights loss_weights;
};

// Adam over a ParamStore, with optional global-norm gradient clipping.
class Adam {
 public:
  Adam(ParamStore& store, const TrainConfig& cfg) : store_(store), cfg_(cfg) {
    m_.resize(store.count());
    v_.resize(store.count());
    for (size_t i = 0; i < store.count(); ++i) {
      m_[i].assign(store[i].value.numel(), 0.0);
      v_[i].assign(store[i].value.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    if (cfg_.clip_norm > 0) {
      double sq = 0.0;
      for (size_t i = 0; i < store_.count(); ++i)
        for (double g : store_[i].grad.data) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) {
        const double s = cfg_.clip_norm / norm;
        for (size_t i = 0; i < store_.count(); ++i)
          for (double& g : store_[i].grad.data) g *= s;
      }
    }
    double lr = cfg_.lr;
    if (cfg_.lr_warmup_steps > 0 && t_ <= cfg_.lr_warmup_steps) {
      lr *= static_cast<double>(t_) / static_cast<double>(cfg_.lr_warmup_steps);
    } else if (cfg_.lr_total_steps > cfg_.lr_warmup_steps) {
      const double frac =
          std::min(1.0, static_cast<double>(t_ - cfg_.lr_warmup_steps) /
                            static_cast<double>(cfg_.lr_total_steps -
                                                cfg_.lr_warmup_steps));
      const double lo = cfg_.lr_final_scale;
      lr *= lo + (1.0 - lo) * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < store_.count(); ++i) {
      Parameter& p = store_[i];
      for (size_t j = 0; j < p.value.numel(); ++j) {
        const double g = p.grad.data[j];
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m_[i][j] / bc1;
        const double vh = v_[i][j] / bc2;
        p.value.data[j] -= lr * mh / (std::sqrt(vh) + cfg_.adam_eps);
      }
    }
  }

  size_t step_count() const { return t_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    MSDET_CHECK(f.good(), "cannot open for write: ", path);
    f << "msdet-adam v1\n" << t_ << "\n" << m_.size() << "\nDATA\n";
    for (const auto& vec : m_)
      f.write(reinterpret_cast<const char*>(vec.data()),
              static_cast<std::streamsize>(vec.size() * sizeof(double)));
    for (const auto& vec : v_)
      f.write(reinterpret_cast<const char*>(vec.data()),
              static_cast<std::streamsize>(vec.size() * sizeof(double)));
    MSDET_CHECK(f.good(), "write failed: ", path);
  }

  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    MSDET_CHECK(f.good(), "cannot open: ", path);
    std::string line;
    std::getline(f, line);
    MSDET_CHECK(line == "msdet-adam v1", path, ": bad magic");
    std::getline(f, line);
    t_ = std::stoull(line);
    std::getline(f, line);
    MSDET_CHECK(std::stoul(line) == m_.size(), path, ": parameter count mismatch");
    std::getline(f, line);
    MSDET_CHECK(line == "DATA", path, ": missing DATA marker");
    for (auto& vec : m_)
      f.read(reinterpret_cast<char*>(vec.data()),
             static_cast<std::streamsize>(vec.size() * sizeof(double)));
    for (auto& vec : v_)
      f.read(reinterpret_cast<char*>(vec.data()),
             static_cast<std::streamsize>(vec.size() * sizeof(double)));
    MSDET_CHECK(f.good(), path, ": truncated optimizer state");
  }

 private:
  ParamStore& store_;
  TrainConfig cfg_;
  size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Single-threaded training driver. Sample order is a seeded per-epoch
// permutation, denoising draws are seeded per step, so runs with equal seeds
// are bit-identical.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), opt_(model.params(), cfg) {}

  // One optimization step on one sample; returns the loss breakdown.
  LossBreakdown train_step(const Sample& sample) {
    Tape tape;
    Tensor vis = image_to_tensor(sample.visible);
    Tensor ir = image_to_tensor(sample.infrared);
    if (cfg_.aug_shift > 0.0) {
      // Misalignment jitter: translate one randomly chosen modality's content
      // relative to the (unchanged) box annotations, like the generator's
      // per-modality shifts but resampled every step. Only one modality moves
      // so the other stays consistent with the supervision boxes.
      Rng rng(cfg_.seed ^ 0xA6, step_);
      const bool active = rng.uniform(0.0, 1.0) < cfg_.aug_prob;
      const int r = static_cast<int>(std::lround(
          cfg_.aug_shift * static_cast<double>(sample.visible.w)));
      if (active && r > 0) {
        const bool move_ir = rng.below(2) == 1;
        const int dx = static_cast<int>(rng.below(2 * r + 1)) - r;
        const int dy = static_cast<int>(rng.below(2 * r + 1)) - r;
        Tensor& target = move_ir ? ir : vis;
        target = image_to_tensor(translate_image(
            move_ir ? sample.infrared : sample.visible, dx, dy));
      }
    }
    DnPlan dn;
    const DnBatch* dnb = nullptr;
    if (cfg_.dn_enabled && !sample.gt.empty()) {
      Rng rng(cfg_.seed ^ 0xD4, step_);
      dn = build_denoise_groups(sample.gt, model_.config().num_queries,
                                cfg_.dn_pairs, cfg_.dn_box_noise,
                                cfg_.dn_label_flip, model_.config().num_classes,
                                rng);
      if (!dn.sup.empty()) dnb = &dn.batch;
    }
    ForwardResult fr = model_.model_forward(tape, vis, ir, dnb);
    LossBreakdown lb = total_loss(tape, fr, sample.gt, cfg_.loss_weights,
                                  model_.config().num_classes,
                                  dnb ? &dn : nullptr);
    model_.params().zero_grads();
    tape.backward(lb.total_value);
    opt_.step();
    ++step_;
    return lb;
  }

  // One epoch over a seeded permutation of the dataset; appends one key=value
  // line per step to `log` when non-null. Returns the mean total loss.
  double run_epoch(const Dataset& data, size_t epoch, std::ostream* log) {
    std::vector<size_t> order(data.samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg_.seed ^ 0x0E, epoch);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    double sum = 0.0;
    for (size_t idx : order) {
      LossBreakdown lb = train_step(data.samples[idx]);
      sum += lb.total;
      if (log) {
        (*log) << "step=" << step_ << " epoch=" << epoch << " sample=" << idx
               << " total=" << lb.total << " cls=" << lb.cls << " l1=" << lb.l1
               << " giou=" << lb.giou << " dn=" << lb.dn << " enc=" << lb.enc
               << "\n";
      }
    }
    return order.empty() ? 0.0 : sum / static_cast<double>(order.size());
  }

  void run(const Dataset& data, std::ostream* log) {
    for (size_t epoch = 0; epoch < cfg_.epochs; ++epoch) run_epoch(data, epoch, log);
  }

  void save_state(const std::string& path) const { opt_.save(path); }
  void load_state(const std::string& path) {
    opt_.load(path);
    step_ = opt_.step_count();
  }

  size_t step() const { return step_; }
  Adam& optimizer() { return opt_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  Adam opt_;
  size_t step_ = 0;
};

// Runs the model over a split and scores it.
inline EvalReport evaluate_model(Model& model, const Dataset& data) {
  std::vector<std::vector<Detection>> dets;
  std::vector<GroundTruthSet> gts;
  for (const Sample& s : data.samples) {
    Tape tape;
    ForwardResult fr = model.model_forward(tape, image_to_tensor(s.visible),
                                           image_to_tensor(s.infrared));
    const LayerOutput& fin = fr.layers.back();
    Tensor logits = fin.class_logits.val();
    Tensor probs(logits.shape);
    for (size_t i = 0; i < probs.data.size(); ++i)
      probs.data[i] = 1.0 / (1.0 + std::exp(-logits.data[i]));
    dets.push_back(detections_from_output(probs, fin.boxes.val()));
    gts.push_back(s.gt);
  }
  return evaluate_detections(dets, gts, model.config().num_classes);
}

}  // namespace msdet
