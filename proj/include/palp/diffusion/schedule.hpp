#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "palp/diffcore/tensor.hpp"

namespace palp {

/// Discrete DDPM noise schedule: beta_t, alpha_t = 1 - beta_t and the running
/// product alpha_bar_t, indexed 0..T-1.
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  std::size_t steps() const noexcept { return beta.size(); }

  void check_step(std::size_t t) const {
    if (t >= steps()) {
      throw Error("timestep " + std::to_string(t) + " out of range [0," +
                  std::to_string(steps()) + ")");
    }
  }

  double sqrt_ab(std::size_t t) const { return std::sqrt(alpha_bar[t]); }
  double sqrt_one_minus_ab(std::size_t t) const { return std::sqrt(1.0 - alpha_bar[t]); }
};

/// Linear beta schedule between beta_min and beta_max.
inline NoiseSchedule build_schedule(std::size_t steps, double beta_min, double beta_max) {
  if (steps < 2) throw Error("schedule needs at least 2 steps");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw Error("schedule requires 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(steps - 1);
    s.beta[t] = beta_min + (beta_max - beta_min) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

/// Schedule from an explicit beta table (tests and imported checkpoints).
inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.size() < 2) throw Error("schedule needs at least 2 steps");
  NoiseSchedule s;
  s.beta = std::move(betas);
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double running = 1.0;
  for (std::size_t t = 0; t < s.beta.size(); ++t) {
    if (!(s.beta[t] > 0.0 && s.beta[t] < 1.0)) throw Error("beta outside (0,1)");
    if (t > 0 && s.beta[t] < s.beta[t - 1]) throw Error("beta must be non-decreasing");
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

}  // namespace palp
