// Adam optimizer over Param groups.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dst/modules.hpp"
#include "dst/tensor.hpp"

namespace dst {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.lr < 0.0) throw std::invalid_argument("adam: learning rate must be positive");
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t step_count() const { return step_; }

  // One update over a parameter group; grads[i] pairs with params[i].
  void step(const std::vector<Param*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size())
      throw std::invalid_argument("adam: " + std::to_string(params.size()) + " params vs " +
                                  std::to_string(grads.size()) + " grads");
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      const Tensor& g = grads[i];
      if (!p.value.same_shape(g)) fail_shape("adam step for " + p.name, p.value, g);
      if (!g.all_finite())
        throw std::runtime_error("adam: non-finite gradient for parameter " + p.name);
      Slot& s = slot(p);
      for (size_t j = 0; j < g.data.size(); ++j) {
        double gj = g.data[j];
        s.m.data[j] = cfg_.beta1 * s.m.data[j] + (1.0 - cfg_.beta1) * gj;
        s.v.data[j] = cfg_.beta2 * s.v.data[j] + (1.0 - cfg_.beta2) * gj * gj;
        double mhat = s.m.data[j] / bc1;
        double vhat = s.v.data[j] / bc2;
        p.value.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  // Moment buffers exposed for checkpointing, keyed by parameter name.
  struct Slot {
    Tensor m, v;
  };

  Slot& slot(const Param& p) {
    auto it = slots_.find(p.name);
    if (it == slots_.end()) {
      it = slots_.emplace(p.name, Slot{Tensor::zeros(p.value.shape), Tensor::zeros(p.value.shape)}).first;
    }
    return it->second;
  }

  const std::unordered_map<std::string, Slot>& slots() const { return slots_; }
  void restore_slot(const std::string& name, Tensor m, Tensor v) {
    slots_[name] = Slot{std::move(m), std::move(v)};
  }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace dst
