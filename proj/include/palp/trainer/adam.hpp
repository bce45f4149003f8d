#pragma once

#include <cmath>
#include <vector>

#include "palp/denoiser/denoiser.hpp"

namespace palp {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a trainable set. Entries restricted to rows only touch those rows
/// (moments of the other rows stay zero). Per-entry step scales are taken
/// from the set at construction.
class Adam {
 public:
  Adam() = default;
  Adam(const TrainableSet& set, AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0.0)) throw Error("learning rate must be positive");
    for (const auto& e : set.entries) {
      m_.emplace_back(e.tensor->shape(), 0.0);
      v_.emplace_back(e.tensor->shape(), 0.0);
      if (!(e.lr_scale > 0.0)) throw Error("learning rate scale must be positive");
      scale_.push_back(e.lr_scale);
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// `set` must list the same tensors, in the same order, as at construction.
  void step(const TrainableSet& set, const std::vector<Tensor>& grads) {
    if (set.size() != m_.size() || grads.size() != m_.size()) {
      throw Error("optimizer state does not match the trainable set");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < m_.size(); ++k) {
      Tensor& p = *set.entries[k].tensor;
      p.require_same_shape(grads[k], "adam");
      p.require_same_shape(m_[k], "adam");
      const double lr = cfg_.lr * scale_[k];
      auto update = [&](std::size_t i) {
        const double g = grads[k][i];
        double& m = m_[k][i];
        double& v = v_[k][i];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        p[i] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      };
      const auto& rows = set.entries[k].rows;
      if (rows.empty()) {
        for (std::size_t i = 0; i < p.size(); ++i) update(i);
      } else {
        const std::size_t w = p.size() / p.shape()[0];
        for (std::size_t r : rows)
          for (std::size_t c = 0; c < w; ++c) update(r * w + c);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::vector<double> scale_;
  std::size_t t_ = 0;
};

}  // namespace palp
