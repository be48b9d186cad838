// Command-line driver: dataset generation, training, COCO-style evaluation,
// ablation grid, and query/sampling visualizations.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "msdet/config.hpp"
#include "msdet/eval.hpp"
#include "msdet/gradcheck.hpp"
#include "msdet/train.hpp"
#include "msdet/viz.hpp"

namespace fs = std::filesystem;
using namespace msdet;

namespace {

RunConfig load_config_or_default(const std::string& path, uint64_t seed_override,
                                 bool have_seed) {
  RunConfig cfg;
  if (!path.empty()) cfg = load_run_config(path);
  if (have_seed) cfg.seed = seed_override;
  cfg.apply_seed();
  return cfg;
}

void validate_gen(const RunConfig& cfg) {
  MSDET_CHECK(cfg.train_scenes > 0 && cfg.val_scenes > 0,
              "config error: train/val scene counts must be positive");
  MSDET_CHECK(cfg.gen.p_full + cfg.gen.p_partial + cfg.gen.p_absent > 0,
              "config error: visibility mix sums to zero");
  MSDET_CHECK(cfg.gen.image_size == cfg.model.image_size,
              "config error: gen.image_size (", cfg.gen.image_size,
              ") must match model.image_size (", cfg.model.image_size, ")");
}

int cmd_gen(const RunConfig& cfg) {
  validate_gen(cfg);
  auto train_man = write_dataset(cfg.dataset_root, "train", cfg.gen, cfg.seed,
                                 cfg.train_scenes);
  auto val_man = write_dataset(cfg.dataset_root, "val", cfg.gen,
                               cfg.seed + 1000003, cfg.val_scenes);
  size_t train_obj = 0, val_obj = 0;
  for (const auto& s : train_man.scenes) train_obj += s.gt.size();
  for (const auto& s : val_man.scenes) val_obj += s.gt.size();
  std::printf("wrote %zu train scenes (%zu objects), %zu val scenes (%zu objects) under %s\n",
              train_man.scenes.size(), train_obj, val_man.scenes.size(), val_obj,
              cfg.dataset_root.c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg_in, const std::string& out_prefix,
              const std::string& resume_prefix, bool do_grad_check) {
  RunConfig cfg = cfg_in;
  Dataset data = read_dataset(cfg.dataset_root, "train");
  Model model(cfg.model, cfg.seed + 1);

  if (do_grad_check) {
    const Sample& s = data.samples.front();
    const Tensor vis = image_to_tensor(s.visible);
    const Tensor ir = image_to_tensor(s.infrared);
    // Pin the discrete state (token selection, detached anchors, Hungarian
    // assignments, IoU targets) so the probe measures differentiable paths.
    PinnedSelection pin;
    LossPins pins;
    {
      Tape t;
      ForwardResult fr = model.model_forward(t, vis, ir);
      pin.tokens = fr.sel_tokens;
      pin.anchors = fr.sel_boxes.val();
      total_loss(t, fr, s.gt, cfg.train.loss_weights, cfg.model.num_classes,
                 nullptr, nullptr, &pins);
    }
    auto f = [&](bool bw) -> double {
      Tape t;
      ForwardResult fr = model.model_forward(t, vis, ir, nullptr, false, &pin);
      LossBreakdown lb = total_loss(t, fr, s.gt, cfg.train.loss_weights,
                                    cfg.model.num_classes, nullptr, &pins);
      if (bw) t.backward(lb.total_value);
      return lb.total;
    };
    // Two step sizes: 3e-4 defeats cancellation noise on tiny gradients,
    // 1e-5 stays inside the smooth region between ReLU kinks; a coordinate
    // passes on its better agreement.
    auto res = grad_check_steps(model.params(), f, 200, {3e-4, 1e-5},
                                cfg.seed + 11);
    std::printf("grad_check: max relative error %.3e over %zu coordinates (worst %s[%zu])\n",
                res.max_rel_error, res.coords_checked, res.worst_param.c_str(),
                res.worst_coord);
    return res.max_rel_error < 1e-4 ? 0 : 1;
  }

  Trainer trainer(model, cfg.train);
  size_t start_epoch = 0;
  if (!resume_prefix.empty()) {
    model.params().load(resume_prefix + ".params");
    trainer.load_state(resume_prefix + ".opt");
    start_epoch = trainer.step() / std::max<size_t>(1, data.samples.size());
    std::printf("resumed from %s at step %zu (epoch %zu)\n",
                resume_prefix.c_str(), trainer.step(), start_epoch);
  }
  fs::create_directories(fs::path(out_prefix).parent_path().empty()
                             ? "."
                             : fs::path(out_prefix).parent_path().string());
  std::ofstream log(out_prefix + ".log",
                    resume_prefix.empty() ? std::ios::trunc : std::ios::app);
  MSDET_CHECK(log.good(), "cannot open loss log for ", out_prefix);

  double best_epoch_loss = 1e300;
  for (size_t epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    const double mean = trainer.run_epoch(data, epoch, &log);
    std::printf("epoch %zu: mean loss %.4f\n", epoch, mean);
    if (mean < best_epoch_loss) {
      best_epoch_loss = mean;
      save_checkpoint(model, cfg, out_prefix + ".best");
    }
  }
  save_checkpoint(model, cfg, out_prefix + ".final");
  trainer.save_state(out_prefix + ".final.opt");
  std::printf("final checkpoint: %s.final.{params,config}\n", out_prefix.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split) {
  auto [model, cfg] = load_checkpoint(ckpt);
  Dataset data = read_dataset(cfg.dataset_root, split);
  for (const Sample& s : data.samples)
    for (const GtObject& o : s.gt)
      MSDET_CHECK(o.class_id < cfg.model.num_classes,
                  "class-count mismatch: dataset has class ", o.class_id,
                  ", checkpoint supports ", cfg.model.num_classes);
  EvalReport rep = evaluate_model(*model, data);
  std::printf("AP50=%.4f AP75=%.4f AP=%.4f detections=%zu gt=%zu\n", rep.ap50,
              rep.ap75, rep.ap, rep.n_detections, rep.n_gt);
  for (size_t c = 0; c < rep.per_class_ap.size(); ++c)
    std::printf("class%zu.ap=%.4f\n", c, rep.per_class_ap[c]);
  std::ofstream f(ckpt + ".eval_" + split + ".txt");
  f << "ap50=" << rep.ap50 << "\nap75=" << rep.ap75 << "\nap=" << rep.ap
    << "\ndetections=" << rep.n_detections << "\ngt=" << rep.n_gt << "\n";
  for (size_t c = 0; c < rep.per_class_ap.size(); ++c)
    f << "class" << c << ".ap=" << rep.per_class_ap[c] << "\n";
  return 0;
}

Sample load_scene(const RunConfig& cfg, const std::string& split, size_t index) {
  Dataset data = read_dataset(cfg.dataset_root, split);
  MSDET_CHECK(index < data.samples.size(), "scene ", index, " out of range ",
              data.samples.size());
  return data.samples[index];
}

int cmd_ablate(const RunConfig& base, size_t n_seeds) {
  struct Variant {
    const char* name;
    void (*apply)(RunConfig&);
  };
  const Variant variants[] = {
      {"full", [](RunConfig&) {}},
      {"vis-only", [](RunConfig& c) { c.model.modality_mode = ModalityMode::visible_only; }},
      {"ir-only", [](RunConfig& c) { c.model.modality_mode = ModalityMode::infrared_only; }},
      {"no-mcqs", [](RunConfig& c) { c.model.mcqs = false; }},
      {"no-mdca", [](RunConfig& c) { c.model.mdca = false; }},
      {"no-cqs", [](RunConfig& c) { c.model.cqs = false; }},
      {"add-fusion", [](RunConfig& c) { c.model.mcqs = c.model.mdca = false; }},
  };
  validate_gen(base);
  write_dataset(base.dataset_root, "train", base.gen, base.seed, base.train_scenes);
  write_dataset(base.dataset_root, "val", base.gen, base.seed + 1000003, base.val_scenes);
  Dataset train = read_dataset(base.dataset_root, "train");
  Dataset val = read_dataset(base.dataset_root, "val");
  std::printf("%-12s", "variant");
  for (size_t s = 0; s < n_seeds; ++s) std::printf("  seed%zu-AP50", s);
  std::printf("\n");
  for (const Variant& v : variants) {
    std::printf("%-12s", v.name);
    for (size_t s = 0; s < n_seeds; ++s) {
      RunConfig cfg = base;
      v.apply(cfg);
      cfg.seed = base.seed + 17 * (s + 1);
      cfg.apply_seed();
      Model model(cfg.model, cfg.seed + 1);
      Trainer trainer(model, cfg.train);
      trainer.run(train, nullptr);
      EvalReport rep = evaluate_model(model, val);
      std::printf("  %9.4f", rep.ap50);
      std::fflush(stdout);
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale multispectral detection transformer"};
  app.require_subcommand(1);

  std::string config_path, out_prefix = "runs/run", ckpt, split = "val";
  std::string resume_prefix, viz_out = "viz";
  uint64_t seed = 0;
  bool have_seed = false;
  size_t scene_index = 0, query_index = 0, n_seeds = 3;
  bool do_grad_check = false;

  app.add_option("--config", config_path, "run config file (key=value lines)");
  auto seed_opt = app.add_option("--seed", seed, "seed override");

  auto* gen = app.add_subcommand("gen", "generate train/val datasets");
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--out", out_prefix, "output prefix for checkpoints/logs");
  train->add_option("--resume", resume_prefix, "checkpoint prefix to resume from");
  train->add_flag("--grad-check", do_grad_check,
                  "run a finite-difference gradient check on one batch and exit");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
  eval->add_option("--split", split, "dataset split");
  auto* vq = app.add_subcommand("viz-queries", "render selected-query overlays");
  vq->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
  vq->add_option("--scene", scene_index, "val scene index");
  vq->add_option("--out", viz_out, "output prefix");
  auto* vs = app.add_subcommand("viz-sampling", "render sampling-point overlays");
  vs->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
  vs->add_option("--scene", scene_index, "val scene index");
  vs->add_option("--query", query_index, "query index");
  vs->add_option("--out", viz_out, "output prefix");
  auto* ab = app.add_subcommand("ablate", "run the ablation grid");
  ab->add_option("--seeds", n_seeds, "number of seeds per variant");

  CLI11_PARSE(app, argc, argv);
  have_seed = seed_opt->count() > 0;

  try {
    if (gen->parsed())
      return cmd_gen(load_config_or_default(config_path, seed, have_seed));
    if (train->parsed())
      return cmd_train(load_config_or_default(config_path, seed, have_seed),
                       out_prefix, resume_prefix, do_grad_check);
    if (eval->parsed()) return cmd_eval(ckpt, split);
    if (vq->parsed()) {
      auto [model, cfg] = load_checkpoint(ckpt);
      Sample s = load_scene(cfg, split, scene_index);
      viz_queries(*model, s.visible, s.infrared, viz_out);
      std::printf("wrote %s_vis.ppm and %s_ir.ppm\n", viz_out.c_str(), viz_out.c_str());
      return 0;
    }
    if (vs->parsed()) {
      auto [model, cfg] = load_checkpoint(ckpt);
      Sample s = load_scene(cfg, split, scene_index);
      auto paths = viz_sampling(*model, s.visible, s.infrared, query_index, viz_out);
      for (const auto& p : paths) std::printf("wrote %s\n", p.c_str());
      return 0;
    }
    if (ab->parsed())
      return cmd_ablate(load_config_or_default(config_path, seed, have_seed),
                        n_seeds);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
