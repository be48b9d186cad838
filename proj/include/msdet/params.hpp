#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "msdet/autodiff.hpp"
#include "msdet/rng.hpp"

namespace msdet {

// Ordered collection of named parameters. Creation order defines the snapshot
// layout.
class ParamStore {
 public:
  Parameter& create(const std::string& name, Shape shape) {
    MSDET_CHECK(!index_.count(name), "parameter already exists: ", name);
    params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape))));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  // Glorot-style uniform init over the last two extents.
  Parameter& create_glorot(const std::string& name, Shape shape, Rng& rng) {
    Parameter& p = create(name, std::move(shape));
    const Shape& s = p.value.shape;
    double fan_in = s.size() >= 2 ? static_cast<double>(s[s.size() - 2])
                                  : static_cast<double>(s[0]);
    double fan_out = static_cast<double>(s.back());
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : p.value.data) v = rng.uniform(-bound, bound);
    return p;
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    MSDET_CHECK(it != index_.end(), "unknown parameter: ", name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  size_t count() const { return params_.size(); }
  Parameter& operator[](size_t i) { return *params_[i]; }
  const Parameter& operator[](size_t i) const { return *params_[i]; }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  // Snapshot: text manifest of (name, shape) in creation order, then "DATA\n"
  // followed by all values as flat little-endian 64-bit floats.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    MSDET_CHECK(f.good(), "cannot open for write: ", path);
    f << "msdet-params v1\n" << params_.size() << "\n";
    for (const auto& p : params_) {
      f << p->name;
      for (size_t e : p->value.shape) f << " " << e;
      f << "\n";
    }
    f << "DATA\n";
    for (const auto& p : params_)
      f.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    MSDET_CHECK(f.good(), "write failed: ", path);
  }

  // Loads values into an already-constructed store; manifest must match.
  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    MSDET_CHECK(f.good(), "cannot open: ", path);
    std::string line;
    std::getline(f, line);
    MSDET_CHECK(line == "msdet-params v1", path, ": bad magic line '", line, "'");
    std::getline(f, line);
    const size_t n = std::stoul(line);
    MSDET_CHECK(n == params_.size(), path, ": snapshot has ", n,
                " parameters, store has ", params_.size());
    for (size_t i = 0; i < n; ++i) {
      std::getline(f, line);
      std::istringstream is(line);
      std::string name;
      is >> name;
      MSDET_CHECK(name == params_[i]->name, path, ": parameter ", i, " is '",
                  name, "', expected '", params_[i]->name, "'");
      Shape s;
      size_t e;
      while (is >> e) s.push_back(e);
      MSDET_CHECK(s == params_[i]->value.shape, path, ": shape mismatch for ",
                  name);
    }
    std::getline(f, line);
    MSDET_CHECK(line == "DATA", path, ": missing DATA marker");
    for (auto& p : params_) {
      f.read(reinterpret_cast<char*>(p->value.data.data()),
             static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
      MSDET_CHECK(f.good(), path, ": truncated data for ", p->name);
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, size_t> index_;
};

}  // namespace msdet
