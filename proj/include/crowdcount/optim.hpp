#pragma once

// Adam with bias correction, batch size 1. Gradients are consumed and zeroed
// by each step.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "crowdcount/model.hpp"

namespace crowdcount {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  void ensure(const ModelParams& params) {
    if (!slots_.empty()) {
      if (slots_.size() != params.items().size())
        throw std::invalid_argument("adam state does not match the parameter set");
      return;
    }
    slots_.resize(params.items().size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const std::size_t n = params.items()[i].second.numel();
      slots_[i].m.assign(n, 0.0);
      slots_[i].v.assign(n, 0.0);
    }
  }

  long step_count() const { return step_; }

  friend void adam_step(ModelParams& params, AdamState& state, const AdamConfig& cfg);

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  long step_ = 0;
};

inline void adam_step(ModelParams& params, AdamState& state, const AdamConfig& cfg) {
  state.ensure(params);
  ++state.step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step_);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step_);
  for (std::size_t i = 0; i < params.items().size(); ++i) {
    Tensor& p = params.items()[i].second;
    AdamState::Slot& slot = state.slots_[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double g = p.grad()[j];
      slot.m[j] = cfg.beta1 * slot.m[j] + (1.0 - cfg.beta1) * g;
      slot.v[j] = cfg.beta2 * slot.v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = slot.m[j] / bc1;
      const double v_hat = slot.v[j] / bc2;
      p.data()[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    p.zero_grad();
  }
}

}  // namespace crowdcount
