#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <string>

#include "msdet/model.hpp"
#include "msdet/scenes.hpp"
#include "msdet/train.hpp"

namespace msdet {

// Everything one run needs: model hyperparameters, loss/optimizer settings,
// dataset generation parameters, and the Tab.-5-style ablation switches.
// Serialized as plain key=value lines.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenParams gen;
  std::string dataset_root = "data";
  size_t train_scenes = 400;
  size_t val_scenes = 100;
  uint64_t seed = 0;

  void apply_seed() {
    train.seed = seed;
  }
};

namespace detail {

struct FieldMap {
  std::map<std::string, std::function<std::string()>> get;
  std::map<std::string, std::function<void(const std::string&)>> set;

  void num(const std::string& key, size_t& ref) {
    get[key] = [&ref] { return std::to_string(ref); };
    set[key] = [&ref](const std::string& v) { ref = std::stoul(v); };
  }
  void num64(const std::string& key, uint64_t& ref) {
    get[key] = [&ref] { return std::to_string(ref); };
    set[key] = [&ref](const std::string& v) { ref = std::stoull(v); };
  }
  void real(const std::string& key, double& ref) {
    get[key] = [&ref] {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", ref);
      return std::string(buf);
    };
    set[key] = [&ref](const std::string& v) { ref = std::stod(v); };
  }
  void flag(const std::string& key, bool& ref) {
    get[key] = [&ref] { return ref ? std::string("on") : std::string("off"); };
    set[key] = [&ref, key](const std::string& v) {
      MSDET_CHECK(v == "on" || v == "off", "config: flag '", key,
                  "' must be on/off, got '", v, "'");
      ref = v == "on";
    };
  }
  void str(const std::string& key, std::string& ref) {
    get[key] = [&ref] { return ref; };
    set[key] = [&ref](const std::string& v) { ref = v; };
  }
};

inline FieldMap run_config_fields(RunConfig& c) {
  FieldMap f;
  f.num("model.channels", c.model.channels);
  f.num("model.heads", c.model.heads);
  f.num("model.points", c.model.points);
  f.num("model.levels", c.model.levels);
  f.num("model.layers", c.model.layers);
  f.num("model.queries", c.model.num_queries);
  f.num("model.classes", c.model.num_classes);
  f.num("model.image_size", c.model.image_size);
  f.num("model.ffn_dim", c.model.ffn_dim);
  f.flag("ablate.mcqs", c.model.mcqs);
  f.flag("ablate.mdca", c.model.mdca);
  f.flag("ablate.cqs", c.model.cqs);
  f.get["model.modality"] = [&c] {
    switch (c.model.modality_mode) {
      case ModalityMode::both: return std::string("both");
      case ModalityMode::visible_only: return std::string("visible");
      default: return std::string("infrared");
    }
  };
  f.set["model.modality"] = [&c](const std::string& v) {
    if (v == "both") c.model.modality_mode = ModalityMode::both;
    else if (v == "visible") c.model.modality_mode = ModalityMode::visible_only;
    else if (v == "infrared") c.model.modality_mode = ModalityMode::infrared_only;
    else fail("config: model.modality must be both/visible/infrared, got '", v, "'");
  };
  f.real("train.lr", c.train.lr);
  f.real("train.beta1", c.train.beta1);
  f.real("train.beta2", c.train.beta2);
  f.real("train.adam_eps", c.train.adam_eps);
  f.real("train.clip_norm", c.train.clip_norm);
  f.num("train.lr_warmup_steps", c.train.lr_warmup_steps);
  f.num("train.lr_total_steps", c.train.lr_total_steps);
  f.real("train.lr_final_scale", c.train.lr_final_scale);
  f.num("train.epochs", c.train.epochs);
  f.real("train.aug_shift", c.train.aug_shift);
  f.real("train.aug_prob", c.train.aug_prob);
  f.flag("train.dn", c.train.dn_enabled);
  f.num("train.dn_pairs", c.train.dn_pairs);
  f.real("train.dn_box_noise", c.train.dn_box_noise);
  f.real("train.dn_label_flip", c.train.dn_label_flip);
  f.real("loss.cls", c.train.loss_weights.cls);
  f.real("loss.l1", c.train.loss_weights.l1);
  f.real("loss.giou", c.train.loss_weights.giou);
  f.real("loss.dn", c.train.loss_weights.dn);
  f.real("loss.enc", c.train.loss_weights.enc);
  f.num("gen.image_size", c.gen.image_size);
  f.num("gen.min_objects", c.gen.min_objects);
  f.num("gen.max_objects", c.gen.max_objects);
  f.real("gen.min_size", c.gen.min_size);
  f.real("gen.max_size", c.gen.max_size);
  f.real("gen.max_overlap_iou", c.gen.max_overlap_iou);
  f.real("gen.p_full", c.gen.p_full);
  f.real("gen.p_partial", c.gen.p_partial);
  f.real("gen.p_absent", c.gen.p_absent);
  f.real("gen.max_shift", c.gen.max_shift);
  f.str("dataset_root", c.dataset_root);
  f.num("train_scenes", c.train_scenes);
  f.num("val_scenes", c.val_scenes);
  f.num64("seed", c.seed);
  return f;
}

}  // namespace detail

inline void save_run_config(const RunConfig& cfg, std::ostream& os) {
  auto fields = detail::run_config_fields(const_cast<RunConfig&>(cfg));
  for (const auto& [key, getter] : fields.get) os << key << "=" << getter() << "\n";
}

inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  MSDET_CHECK(f.good(), "cannot open for write: ", path);
  save_run_config(cfg, f);
  MSDET_CHECK(f.good(), "write failed: ", path);
}

inline void load_run_config(RunConfig& cfg, std::istream& is,
                            const std::string& origin = "<stream>") {
  auto fields = detail::run_config_fields(cfg);
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    MSDET_CHECK(eq != std::string::npos, origin, ":", lineno,
                ": expected key=value, got '", line, "'");
    const std::string key = line.substr(0, eq);
    auto it = fields.set.find(key);
    MSDET_CHECK(it != fields.set.end(), origin, ":", lineno,
                ": unknown config key '", key, "'");
    it->second(line.substr(eq + 1));
  }
  cfg.apply_seed();
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  MSDET_CHECK(f.good(), "cannot open config: ", path);
  RunConfig cfg;
  load_run_config(cfg, f, path);
  return cfg;
}

// Checkpoint = parameter snapshot + config block (two files sharing a prefix).
inline void save_checkpoint(Model& model, const RunConfig& cfg,
                            const std::string& prefix) {
  model.params().save(prefix + ".params");
  save_run_config(cfg, prefix + ".config");
}

// Rebuilds the model from <prefix>.config and loads <prefix>.params into it.
inline std::pair<std::unique_ptr<Model>, RunConfig> load_checkpoint(
    const std::string& prefix) {
  RunConfig cfg = load_run_config(prefix + ".config");
  auto model = std::make_unique<Model>(cfg.model, cfg.seed + 1);
  model->params().load(prefix + ".params");
  return {std::move(model), cfg};
}

}  // namespace msdet
