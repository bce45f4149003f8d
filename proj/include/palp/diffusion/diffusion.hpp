#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "palp/denoiser/prompt.hpp"
#include "palp/diffcore/rng.hpp"
#include "palp/diffcore/tape.hpp"
#include "palp/diffusion/schedule.hpp"

namespace palp {

/// Anything that predicts noise for a batch of rows: x_t is [n, pixels], one
/// timestep and one prompt per row. The null prompt selects the
/// unconditional branch.
template <class M>
concept NoisePredictor = requires(const M& m, Var x, std::span<const std::size_t> ts,
                                  std::span<const Prompt> ps) {
  { m.predict(x, ts, ps) } -> std::convertible_to<Var>;
};

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, elementwise for any shape.
inline Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  x0.require_same_shape(eps, "q_sample");
  s.check_step(t);
  const double a = s.sqrt_ab(t), b = s.sqrt_one_minus_ab(t);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Row-wise q_sample with one timestep per row of a [n, pixels] batch.
inline Tensor q_sample(const Tensor& x0, std::span<const std::size_t> ts, const Tensor& eps,
                       const NoiseSchedule& s) {
  x0.require_same_shape(eps, "q_sample");
  if (x0.rank() != 2 || x0.shape()[0] != ts.size()) throw ShapeError("q_sample: one t per row");
  const std::size_t w = x0.shape()[1];
  Tensor out(x0.shape());
  for (std::size_t r = 0; r < ts.size(); ++r) {
    s.check_step(ts[r]);
    const double a = s.sqrt_ab(ts[r]), b = s.sqrt_one_minus_ab(ts[r]);
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = a * x0[r * w + c] + b * eps[r * w + c];
  }
  return out;
}

namespace detail {

inline void check_alpha_bar(const NoiseSchedule& s, std::size_t t) {
  s.check_step(t);
  if (!(s.alpha_bar[t] > 0.0)) throw NumericError("alpha_bar is zero; x0 estimate undefined");
}

// Per-row constant broadcast to the full [n, w] shape.
inline Tensor row_constant(std::span<const std::size_t> ts, std::size_t width,
                           double (*f)(const NoiseSchedule&, std::size_t), const NoiseSchedule& s) {
  Tensor out(Shape{ts.size(), width});
  for (std::size_t r = 0; r < ts.size(); ++r) {
    check_alpha_bar(s, ts[r]);
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(r * width), width, f(s, ts[r]));
  }
  return out;
}

inline double noise_coef(const NoiseSchedule& s, std::size_t t) { return s.sqrt_one_minus_ab(t); }
inline double inv_signal_coef(const NoiseSchedule& s, std::size_t t) { return 1.0 / s.sqrt_ab(t); }

}  // namespace detail

/// One-step clean estimate (x_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t).
inline Tensor x0_hat(const Tensor& x_t, const Tensor& eps_pred, std::size_t t,
                     const NoiseSchedule& s) {
  x_t.require_same_shape(eps_pred, "x0_hat");
  detail::check_alpha_bar(s, t);
  const double b = detail::noise_coef(s, t), inv_a = detail::inv_signal_coef(s, t);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - eps_pred[i] * b) * inv_a;
  return out;
}

/// Row-wise x0 estimate recorded on the tape, differentiable through eps_pred.
inline Var x0_hat(Var x_t, Var eps_pred, std::span<const std::size_t> ts, const NoiseSchedule& s) {
  const Tensor& xv = x_t.value();
  if (xv.rank() != 2 || xv.shape()[0] != ts.size()) throw ShapeError("x0_hat: one t per row");
  Tape& tape = *x_t.tape;
  const std::size_t w = xv.shape()[1];
  Var noise = tape.constant(detail::row_constant(ts, w, detail::noise_coef, s));
  Var inv = tape.constant(detail::row_constant(ts, w, detail::inv_signal_coef, s));
  return mul(sub(x_t, mul(eps_pred, noise)), inv);
}

/// Mean over elements of ||G(x_t, t, y) - eps||^2 for a batch.
template <NoisePredictor M>
Var denoise_loss(Tape& tape, const M& model, const Tensor& x0, std::span<const Prompt> prompts,
                 std::span<const std::size_t> ts, const Tensor& eps, const NoiseSchedule& s) {
  Var x_t = tape.constant(q_sample(x0, ts, eps, s));
  Var pred = model.predict(x_t, ts, prompts);
  return mse(pred, tape.constant(eps));
}

/// (1 - alpha) G(x_t, null) + alpha G(x_t, y), recorded on the tape. Written as
/// u + alpha (c - u) so identical branches cancel exactly; alpha = 1 returns c.
template <NoisePredictor M>
Var cfg_predict(const M& model, Var x_t, std::span<const std::size_t> ts,
                std::span<const Prompt> prompts, double alpha) {
  const std::vector<Prompt> nulls(prompts.size(), Prompt::null());
  Var uncond = model.predict(x_t, ts, nulls);
  Var cond = model.predict(x_t, ts, prompts);
  if (alpha == 1.0) return cond;
  return add(uncond, scale(sub(cond, uncond), alpha));
}

/// Gradient-free guided prediction. Conditional and unconditional rows run in
/// a single stacked batch; rows are independent so the values match
/// `cfg_predict` bit for bit.
template <NoisePredictor M>
Tensor cfg_eval(const M& model, const Tensor& x_t, std::span<const std::size_t> ts,
                std::span<const Prompt> prompts, double alpha) {
  const std::size_t n = ts.size(), w = x_t.shape()[1];
  Tensor stacked(Shape{2 * n, w});
  std::copy(x_t.data().begin(), x_t.data().end(), stacked.data().begin());
  std::copy(x_t.data().begin(), x_t.data().end(),
            stacked.data().begin() + static_cast<std::ptrdiff_t>(n * w));
  std::vector<std::size_t> ts2(ts.begin(), ts.end());
  ts2.insert(ts2.end(), ts.begin(), ts.end());
  std::vector<Prompt> ps(n, Prompt::null());
  ps.insert(ps.end(), prompts.begin(), prompts.end());
  Tape tape;
  const Tensor& pred = model.predict(tape.constant(std::move(stacked)), ts2, ps).value();
  if (pred.shape() != Shape{2 * n, w}) throw ShapeError("model output shape " + shape_str(pred.shape()));
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n * w; ++i)
    out[i] = alpha == 1.0 ? pred[n * w + i] : pred[i] + alpha * (pred[n * w + i] - pred[i]);
  return out;
}

/// Gradient-free prediction without guidance.
template <NoisePredictor M>
Tensor predict_eval(const M& model, const Tensor& x_t, std::span<const std::size_t> ts,
                    std::span<const Prompt> prompts) {
  Tape tape;
  return model.predict(tape.constant(x_t), ts, prompts).value();
}

struct SampleOptions {
  double guidance = 3.0;
  bool clip_x0 = true;  // clamp the x0 estimate to the data range [-1, 1]
};

/// Ancestral DDPM sampling from x_T ~ N(0, I) down to t = 0, guided at every
/// step. Returns [count, pixels] in model space [-1, 1].
template <NoisePredictor M>
Tensor sample(const M& model, const Prompt& prompt, std::size_t count, std::size_t pixels,
              const NoiseSchedule& s, std::uint64_t seed, const SampleOptions& opt = {}) {
  Rng rng(seed);
  Tensor x = rng.normal_tensor({count, pixels});
  const std::vector<Prompt> prompts(count, prompt);
  for (std::size_t t = s.steps(); t-- > 0;) {
    const std::vector<std::size_t> ts(count, t);
    const Tensor eps = cfg_eval(model, x, ts, prompts, opt.guidance);
    Tensor x0 = x0_hat(x, eps, t, s);
    if (opt.clip_x0)
      for (double& v : x0.data()) v = std::clamp(v, -1.0, 1.0);
    const double ab = s.alpha_bar[t];
    const double ab_prev = t > 0 ? s.alpha_bar[t - 1] : 1.0;
    // posterior q(x_{t-1} | x_t, x0)
    const double c0 = std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab);
    const double ct = std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = t > 0 ? std::sqrt(s.beta[t] * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = t > 0 ? rng.normal() : 0.0;
      x[i] = c0 * x0[i] + ct * x[i] + sigma * z;
    }
  }
  return x;
}

}  // namespace palp
