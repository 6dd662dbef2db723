#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include "sonoseg/tensor.hpp"

namespace sonoseg {

// Named handle to a weight tensor. Copies alias the same storage, so modules
// keep their own Tensor members and export Parameters that share them.
struct Parameter {
  std::string name;
  Tensor value;
};

using ParamList = std::vector<Parameter>;

inline void check_unique_names(const ParamList& params) {
  std::unordered_set<std::string> seen;
  for (const auto& p : params)
    if (!seen.insert(p.name).second)
      throw ContractViolation("duplicate parameter name '" + p.name + "'");
}

// Tuning behaviour is keyed purely off parameter name paths: adapters ride
// inside encoder stages and stay trainable, decoder and prompt heads are
// trainable, and everything else in the encoder is backbone.
inline bool peft_trainable(const std::string& name) {
  if (name.rfind("decoder.", 0) == 0) return true;
  if (name.rfind("prompt.", 0) == 0) return true;
  if (name.find(".adapter.") != std::string::npos) return true;
  return false;
}

inline void apply_peft_freeze(ParamList& params) {
  for (auto& p : params) p.value.set_requires_grad(peft_trainable(p.name));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter list. Frozen entries (requires_grad unset) are
// skipped entirely; a trainable entry with no populated gradient at step()
// time means the caller forgot a backward pass, which is a bug, not a state
// to silently tolerate.
class Adam {
 public:
  explicit Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    check_unique_names(params_);
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      size_t n = params_[i].value.data().size();
      m_[i].assign(n, 0.0);
      v_[i].assign(n, 0.0);
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t step_count() const { return t_; }
  const ParamList& params() const { return params_; }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = params_[i];
      if (!p.value.requires_grad()) continue;
      if (!p.value.has_grad())
        throw ContractViolation("adam step: trainable parameter '" + p.name +
                                "' has no gradient");
      const std::vector<double>& g = p.value.grad();
      std::vector<double>& w = p.value.raw_data();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    zero_grad();
  }

  void zero_grad() {
    for (Parameter& p : params_) p.value.clear_grad();
  }

 private:
  ParamList params_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace sonoseg
