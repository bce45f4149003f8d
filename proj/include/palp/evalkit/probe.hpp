#pragma once

#include <limits>
#include <span>
#include <vector>

#include "palp/denoiser/denoiser.hpp"
#include "palp/diffusion/diffusion.hpp"
#include "palp/evalkit/oracle.hpp"
#include "palp/evalkit/render.hpp"

namespace palp::evalkit {

struct ProbeResult {
  std::vector<std::size_t> t_grid;
  Tensor strip;                              // [|t_grid|, pixels], first draw, image space
  std::vector<double> background_whiteness;  // per t, mean over draws
  std::vector<Tensor> estimates;             // per t: [draws, pixels] image space
};

/// One-step clean estimates from pure noise. For each t, x_t is a noised
/// mid-gray canvas (sqrt(1 - ab_t) eps), the model predicts once and x0_hat is
/// decoded. `draws` independent noise draws share `seed`.
inline ProbeResult x0hat_probe(const Denoiser& model, const NoiseSchedule& s, const Prompt& prompt,
                               std::span<const std::size_t> t_grid, std::uint64_t seed,
                               double guidance = 1.0, std::size_t draws = 1) {
  if (t_grid.empty()) throw Error("probe needs at least one timestep");
  if (draws < 1) throw Error("probe needs at least one draw");
  ProbeResult out;
  out.t_grid.assign(t_grid.begin(), t_grid.end());
  const std::size_t w = model.params.image_pixels;
  out.strip = Tensor(Shape{t_grid.size(), w});
  Rng rng(seed);
  const Tensor eps = rng.normal_tensor({draws, w});
  const std::vector<Prompt> ps(draws, prompt);
  for (std::size_t k = 0; k < t_grid.size(); ++k) {
    const std::size_t t = t_grid[k];
    s.check_step(t);
    const std::vector<std::size_t> ts(draws, t);
    Tensor x_t = eps;
    x_t *= s.sqrt_one_minus_ab(t);
    const Tensor pred = cfg_eval(view(model), x_t, ts, ps, guidance);
    const Tensor x0 = x0_hat(x_t, pred, t, s);
    Tensor imgs(Shape{draws, w});
    double white = 0.0;
    for (std::size_t d = 0; d < draws; ++d) {
      const Tensor img = to_image_space(x0.row(d));
      std::copy(img.data().begin(), img.data().end(), imgs.data().begin() + static_cast<std::ptrdiff_t>(d * w));
      white += border_mean(img.data());
      if (d == 0) std::copy(img.data().begin(), img.data().end(), out.strip.data().begin() + static_cast<std::ptrdiff_t>(k * w));
    }
    out.background_whiteness.push_back(white / static_cast<double>(draws));
    out.estimates.push_back(std::move(imgs));
  }
  return out;
}

/// Smallest mean squared error between `img` and any of `refs`.
inline double nearest_mse(std::span<const double> img, const std::vector<Tensor>& refs) {
  if (refs.empty()) throw Error("nearest_mse needs at least one reference");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : refs) {
    if (r.size() != img.size()) throw ShapeError("nearest_mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) s += (img[i] - r[i]) * (img[i] - r[i]);
    best = std::min(best, s / static_cast<double>(img.size()));
  }
  return best;
}

/// Mean over the rows of `images` of nearest_mse.
inline double mean_nearest_mse(const Tensor& images, const std::vector<Tensor>& refs) {
  double s = 0.0;
  for (std::size_t r = 0; r < images.shape()[0]; ++r) s += nearest_mse(images.row(r), refs);
  return s / static_cast<double>(images.shape()[0]);
}

}  // namespace palp::evalkit
