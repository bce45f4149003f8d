#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palp/denoiser/prompt.hpp"
#include "palp/diffcore/rng.hpp"
#include "palp/diffcore/tape.hpp"
#include "palp/diffusion/diffusion.hpp"

namespace palp {

enum class GuidanceMode {
  kNone,
  kSds,
  kPalp,
  kReserved,  // slot for other score estimators; not implemented
};

inline const char* mode_name(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::kNone: return "none";
    case GuidanceMode::kSds: return "sds";
    case GuidanceMode::kPalp: return "palp";
    case GuidanceMode::kReserved: return "reserved";
  }
  return "?";
}

inline GuidanceMode parse_mode(const std::string& s) {
  if (s == "none" || s == "baseline") return GuidanceMode::kNone;
  if (s == "sds") return GuidanceMode::kSds;
  if (s == "palp") return GuidanceMode::kPalp;
  throw Error("unknown guidance mode '" + s + "'");
}

/// Timestep weighting of the score direction. Only the constant weight exists.
enum class Weighting { kConstant };

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::kNone;
  double alpha = 15.0;  // clean branch guidance scale
  double beta = 7.5;    // personalized branch guidance scale
  Weighting weighting = Weighting::kConstant;
  bool share_noise = true;
  bool rescale = true;

  double weight(std::size_t /*t*/) const { return 1.0; }

  void validate() const {
    if (mode == GuidanceMode::kReserved) throw Error("guidance mode is reserved and not implemented");
    if (!(alpha > 0.0)) throw Error("guidance alpha must be positive");
    if (!(beta >= 0.0)) throw Error("guidance beta must be non-negative");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (mode == GuidanceMode::kPalp && alpha < beta) {
      out.push_back("alpha < beta: the clean branch is weaker than the personalized branch");
    }
    return out;
  }
};

/// x_hat_t = sqrt(ab_t2) x0_hat + sqrt(1 - ab_t2) eps2, row-wise.
inline Tensor renoise(const Tensor& x0_hat_val, std::span<const std::size_t> t2, const Tensor& eps2,
                      const NoiseSchedule& s) {
  return q_sample(x0_hat_val, t2, eps2, s);
}

namespace detail {

inline void require_clean(std::span<const Prompt> ps) {
  for (const auto& p : ps)
    if (p.has_placeholder()) throw Error("clean prompt contains a placeholder: " + p.str());
}

inline void require_personal(std::span<const Prompt> ps) {
  for (const auto& p : ps)
    if (!p.has_placeholder()) throw Error("personalization prompt has no placeholder: " + p.str());
}

inline void apply_weight(Tensor& d, std::span<const std::size_t> ts, const GuidanceConfig& cfg) {
  const std::size_t w = d.cols();
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const double k = cfg.weight(ts[r]);
    if (k != 1.0)
      for (std::size_t c = 0; c < w; ++c) d(r, c) *= k;
  }
}

}  // namespace detail

/// w(t) (G^alpha(x_t, y_c) - eps), evaluated without gradients.
template <NoisePredictor M>
Tensor sds_direction(const M& base, const Tensor& x_t, std::span<const std::size_t> ts,
                     std::span<const Prompt> y_c, double alpha, const Tensor& eps,
                     const GuidanceConfig& cfg = {}) {
  detail::require_clean(y_c);
  Tensor d = cfg_eval(base, x_t, ts, y_c, alpha);
  d -= eps;
  detail::apply_weight(d, ts, cfg);
  return d;
}

/// w(t) (G^alpha_base(x_hat_t, y_c) - G^beta_personal(x_hat_t, y_P)), without gradients.
template <NoisePredictor B, NoisePredictor P>
Tensor palp_direction(const B& base, const P& personal, const Tensor& x_hat_t,
                      std::span<const std::size_t> ts, std::span<const Prompt> y_c,
                      std::span<const Prompt> y_p, const GuidanceConfig& cfg) {
  detail::require_clean(y_c);
  detail::require_personal(y_p);
  Tensor d = cfg_eval(base, x_hat_t, ts, y_c, cfg.alpha);
  d -= cfg_eval(personal, x_hat_t, ts, y_p, cfg.beta);
  detail::apply_weight(d, ts, cfg);
  return d;
}

/// Per-row factor sqrt(ab_t) / sqrt(1 - ab_t) that cancels the x0 chain-rule
/// coefficient.
inline double rescale_factor(const NoiseSchedule& s, std::size_t t) {
  return s.sqrt_ab(t) / s.sqrt_one_minus_ab(t);
}

/// Scalar node whose gradient is the guidance update: the element mean of
/// direction * x0_hat, with the direction held constant. With rescale on, each
/// row's contribution is multiplied by its rescale factor.
inline Var guidance_objective(const Tensor& direction, Var x0_hat, std::span<const std::size_t> ts,
                              const NoiseSchedule& s, bool rescale) {
  if (!x0_hat.tape) throw Error("x0 estimate is not on a tape");
  const Tensor& xv = x0_hat.value();
  xv.require_same_shape(direction, "guidance objective");
  if (xv.rank() != 2 || xv.shape()[0] != ts.size()) throw ShapeError("one t per row required");
  Tensor d = direction;
  if (rescale) {
    const std::size_t w = d.cols();
    for (std::size_t r = 0; r < ts.size(); ++r) {
      const double k = rescale_factor(s, ts[r]);
      for (std::size_t c = 0; c < w; ++c) d(r, c) *= k;
    }
  }
  d *= 1.0 / static_cast<double>(d.size());
  return dot(x0_hat.tape->constant(std::move(d)), x0_hat);
}

/// Gradients of the guidance objective with respect to `leaves`.
inline std::vector<Tensor> apply_palp_grad(const Tensor& direction, Var x0_hat,
                                           std::span<const std::size_t> ts, const NoiseSchedule& s,
                                           bool rescale, std::span<const Var> leaves) {
  return grad(guidance_objective(direction, x0_hat, ts, s, rescale), leaves);
}

/// Everything the guidance branch produced in one step.
struct GuidanceBranch {
  Var objective;          // scalar; add lambda * objective to the step root
  Tensor direction;       // constant direction, before rescale
  Tensor x_hat_t;         // re-noised estimate fed to the guidance models
  const Tensor* noise = nullptr;  // noise used for re-noising
  std::optional<Tensor> fresh_noise;
};

/// Guidance branch on top of a live personalization forward pass. `eps_pred`
/// is the personalized prediction at `x_t` (same tape); re-noising reuses the
/// branch timestep and, if `share_noise`, the branch noise `eps`, else draws
/// fresh noise from `fresh`.
template <NoisePredictor B, NoisePredictor P>
GuidanceBranch guidance_branch(const B& base, const P& personal, Var x_t, Var eps_pred,
                               std::span<const std::size_t> ts, const Tensor& eps,
                               std::span<const Prompt> y_c, std::span<const Prompt> y_p,
                               const GuidanceConfig& cfg, const NoiseSchedule& s, Rng& fresh) {
  cfg.validate();
  if (cfg.mode == GuidanceMode::kNone) throw Error("guidance branch requested with mode none");
  GuidanceBranch out;
  Var x0 = x0_hat(x_t, eps_pred, ts, s);
  if (cfg.share_noise) {
    out.noise = &eps;
  } else {
    out.fresh_noise = fresh.normal_tensor(eps.shape());
    out.noise = &*out.fresh_noise;
  }
  out.x_hat_t = renoise(x0.value(), ts, *out.noise, s);
  if (cfg.mode == GuidanceMode::kSds) {
    out.direction = sds_direction(base, out.x_hat_t, ts, y_c, cfg.alpha, *out.noise, cfg);
  } else {
    out.direction = palp_direction(base, personal, out.x_hat_t, ts, y_c, y_p, cfg);
  }
  out.objective = guidance_objective(out.direction, x0, ts, s, cfg.rescale);
  return out;
}

/// Score-sampling contribution on its own: noises x0, predicts with the
/// personalized model under y_P, forms x0_hat and applies the SDS direction.
template <NoisePredictor B, NoisePredictor P>
GuidanceBranch guidance_loss_sds(const B& base, const P& personal, Tape& tape, const Tensor& x0,
                                 std::span<const std::size_t> ts, const Tensor& eps,
                                 std::span<const Prompt> y_c, std::span<const Prompt> y_p,
                                 const GuidanceConfig& cfg, const NoiseSchedule& s, Rng& fresh) {
  if (cfg.mode != GuidanceMode::kSds) throw Error("guidance_loss_sds requires mode sds");
  Var x_t = tape.constant(q_sample(x0, ts, eps, s));
  Var eps_pred = personal.predict(x_t, ts, y_p);
  return guidance_branch(base, personal, x_t, eps_pred, ts, eps, y_c, y_p, cfg, s, fresh);
}

}  // namespace palp
