#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palp/denoiser/embedding.hpp"
#include "palp/diffcore/rng.hpp"
#include "palp/diffcore/tape.hpp"

namespace palp {

struct AffineLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.shape()[1]; }
  std::size_t out_dim() const { return weight.shape()[0]; }
};

/// Fixed linear least-squares estimate of eps from x_t under a Gaussian fit
/// of the training pixels (mean m, covariance U diag(var) U^T):
///   eps_lin = s U diag(1 / (a^2 var + s^2)) U^T (x_t - a m),
/// with a = sqrt(alpha_bar_t), s = sqrt(1 - alpha_bar_t). Empty when unused.
struct LinearPrior {
  std::vector<double> mean;           // [pixels]
  Tensor basis;                       // [pixels, pixels], rows are eigenvectors
  std::vector<double> variance;       // [pixels], eigenvalue of each row
  std::vector<double> signal, noise;  // per timestep a and s

  bool empty() const noexcept { return signal.empty(); }
  std::size_t steps() const noexcept { return signal.size(); }

  void validate(std::size_t pixels) const {
    if (empty()) return;
    if (mean.size() != pixels || variance.size() != pixels || basis.shape() != Shape{pixels, pixels} ||
        noise.size() != signal.size()) {
      throw ShapeError("linear prior shapes inconsistent with " + std::to_string(pixels) + " pixels");
    }
  }
};

/// MLP epsilon-predictor over concat(flatten(x_t), time features, condition).
/// SiLU between layers, none after the last. With a linear prior the output
/// is prior estimate + MLP, so the layers only learn the nonlinear residual;
/// the MLP alone cannot produce the t-dependent, image-wide linear filter
/// that low-noise denoising needs.
struct DenoiserParams {
  std::size_t image_pixels = 0;
  std::size_t time_width = 0;
  std::size_t cond_dim = 0;
  LinearPrior prior;
  std::vector<AffineLayer> layers;

  std::size_t input_width() const { return image_pixels + time_width + cond_dim; }

  /// Layers followed by a nonlinearity (everything except the output layer).
  std::vector<std::size_t> hidden_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) out.push_back(i);
    return out;
  }

  void validate() const {
    if (layers.empty()) throw ShapeError("denoiser has no layers");
    if (time_width % 2 != 0) throw ShapeError("time feature width must be even");
    std::size_t width = input_width();
    for (const auto& l : layers) {
      if (l.weight.rank() != 2 || l.in_dim() != width || l.bias.shape() != Shape{l.out_dim()}) {
        throw ShapeError("layer shapes inconsistent: weight " + shape_str(l.weight.shape()) +
                         " after width " + std::to_string(width));
      }
      width = l.out_dim();
    }
    if (width != image_pixels) throw ShapeError("output width must equal image_pixels");
    prior.validate(image_pixels);
  }
};

struct DenoiserConfig {
  std::size_t image_pixels = 256;
  std::size_t time_width = 32;
  std::size_t cond_dim = 32;
  std::vector<std::size_t> hidden = {256, 256};
  bool linear_prior = false;  // pretraining fits the prior to the training set
};

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  DenoiserParams p;
  p.image_pixels = cfg.image_pixels;
  p.time_width = cfg.time_width;
  p.cond_dim = cfg.cond_dim;
  std::vector<std::size_t> widths{p.input_width()};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(cfg.image_pixels);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(widths[i]));
    p.layers.push_back({rng.normal_tensor({widths[i + 1], widths[i]}, stddev),
                        Tensor(Shape{widths[i + 1]}, 0.0)});
  }
  p.validate();
  return p;
}

/// Sinusoidal features [sin(t w_k), cos(t w_k)] with geometric frequencies.
inline Tensor time_features(std::span<const std::size_t> ts, std::size_t width) {
  const std::size_t half = width / 2;
  Tensor out(Shape{ts.size(), width});
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq =
          std::exp(-std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(ts[i]) * freq;
      out(i, k) = std::sin(arg);
      out(i, half + k) = std::cos(arg);
    }
  }
  return out;
}

struct LoraLayer {
  std::size_t layer = 0;
  Tensor a;  // [rank, in]
  Tensor b;  // [out, rank]
};

/// Low-rank deltas W + scale * B A on selected layers.
struct LoraAdapter {
  std::size_t rank = 0;
  double scale = 1.0;
  std::vector<LoraLayer> layers;

  const LoraLayer* find(std::size_t layer) const {
    for (const auto& l : layers)
      if (l.layer == layer) return &l;
    return nullptr;
  }

  /// Dense effective delta for one adapted layer.
  Tensor delta(std::size_t layer) const {
    const LoraLayer* l = find(layer);
    if (!l) throw Error("layer " + std::to_string(layer) + " is not adapted");
    const std::size_t out = l->b.shape()[0], in = l->a.shape()[1];
    Tensor d(Shape{out, in}, 0.0);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t r = 0; r < rank; ++r)
        kernels::axpy(d.data().data() + o * in, scale * l->b(o, r), l->a.row(r).data(), in);
    return d;
  }
};

/// A ~ N(0, 1/d_in), B = 0, so the adapted model starts exactly at the base.
inline LoraAdapter init_lora(const DenoiserParams& params, std::size_t rank, double scale, Rng& rng,
                             std::optional<std::vector<std::size_t>> layers = std::nullopt) {
  if (rank < 1) throw Error("LoRA rank must be at least 1");
  LoraAdapter lora;
  lora.rank = rank;
  lora.scale = scale;
  for (std::size_t idx : layers.value_or(params.hidden_layers())) {
    if (idx >= params.layers.size()) throw Error("LoRA layer index out of range");
    const auto& l = params.layers[idx];
    if (rank > std::min(l.in_dim(), l.out_dim())) {
      throw Error("LoRA rank " + std::to_string(rank) + " exceeds layer dims " +
                  shape_str(l.weight.shape()));
    }
    const double stddev = 1.0 / std::sqrt(static_cast<double>(l.in_dim()));
    lora.layers.push_back(
        {idx, rng.normal_tensor({rank, l.in_dim()}, stddev), Tensor(Shape{l.out_dim(), rank}, 0.0)});
  }
  return lora;
}

/// Tensors that receive gradients, optionally restricted to some rows.
struct TrainableTensor {
  Tensor* tensor = nullptr;
  std::vector<std::size_t> rows;  // empty: every row
  std::string name;
  double lr_scale = 1.0;  // multiplies the optimizer step size
};

struct TrainableSet {
  std::vector<TrainableTensor> entries;

  bool contains(const Tensor* t) const {
    return std::any_of(entries.begin(), entries.end(),
                       [t](const TrainableTensor& e) { return e.tensor == t; });
  }
  std::size_t size() const noexcept { return entries.size(); }
};

/// Binds tensors onto a tape as trainable leaves or frozen inputs.
struct Binding {
  const TrainableSet* trainable = nullptr;

  Var bind(Tape& tape, const Tensor& t) const {
    return trainable && trainable->contains(&t) ? tape.leaf(t) : tape.frozen(t);
  }
};

/// G(x_t, t, cond). `x_t` is [n, pixels], `cond` is [n, cond_dim].
inline Var forward(const DenoiserParams& params, const LoraAdapter* lora, Var x_t,
                   std::span<const std::size_t> ts, Var cond, const Binding& binding = {}) {
  Tape& tape = *x_t.tape;
  const Tensor& xv = x_t.value();
  if (xv.rank() != 2 || xv.shape()[1] != params.image_pixels) {
    throw ShapeError("denoiser input must be [n, " + std::to_string(params.image_pixels) +
                     "], got " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.shape()[0];
  if (ts.size() != n) throw ShapeError("one timestep per row required");
  if (cond.value().shape() != Shape{n, params.cond_dim}) {
    throw ShapeError("condition must be [n, cond_dim], got " + shape_str(cond.value().shape()));
  }
  Var h = concat({x_t, tape.constant(time_features(ts, params.time_width)), cond});
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    Var y = affine(h, binding.bind(tape, layer.weight), binding.bind(tape, layer.bias));
    if (const LoraLayer* l = lora ? lora->find(i) : nullptr) {
      Var low = affine(affine(h, binding.bind(tape, l->a)), binding.bind(tape, l->b));
      y = add(y, scale(low, lora->scale));
    }
    h = i + 1 < params.layers.size() ? silu(y) : y;
  }
  if (params.prior.empty()) return h;
  const LinearPrior& lp = params.prior;
  const std::size_t w = params.image_pixels;
  Tensor offset(Shape{n, w}), gain(Shape{n, w});
  for (std::size_t r = 0; r < n; ++r) {
    if (ts[r] >= lp.steps()) throw Error("timestep outside the linear prior");
    const double a = lp.signal[ts[r]], s = lp.noise[ts[r]];
    for (std::size_t j = 0; j < w; ++j) {
      offset(r, j) = -a * lp.mean[j];
      gain(r, j) = s / (a * a * lp.variance[j] + s * s);
    }
  }
  Var basis = tape.constant(lp.basis);
  Var coeff = mul(affine(add(x_t, tape.constant(std::move(offset))), basis), tape.constant(std::move(gain)));
  return add(h, matmul(coeff, basis));
}

/// Everything a checkpoint holds: base weights, vocabulary, optional adapter.
struct Denoiser {
  DenoiserParams params;
  EmbeddingTable embeddings;
  std::optional<LoraAdapter> lora;

  Var predict(Var x_t, std::span<const std::size_t> ts, std::span<const Prompt> prompts,
              const Binding& binding = {}) const {
    if (prompts.size() != ts.size()) throw ShapeError("one prompt per row required");
    Var cond = encode_prompts(binding.bind(*x_t.tape, embeddings.rows()), embeddings, prompts);
    return forward(params, lora ? &*lora : nullptr, x_t, ts, cond, binding);
  }
};

/// Model handle used by the diffusion routines: a denoiser plus the policy
/// for which of its tensors are trainable on the current tape.
struct DenoiserView {
  const Denoiser* model = nullptr;
  const TrainableSet* trainable = nullptr;

  Var predict(Var x_t, std::span<const std::size_t> ts, std::span<const Prompt> prompts) const {
    return model->predict(x_t, ts, prompts, Binding{trainable});
  }
};

inline DenoiserView view(const Denoiser& d, const TrainableSet* trainable = nullptr) {
  return DenoiserView{&d, trainable};
}

enum class TrainMode { kPretrain, kPersonalize };

/// Pretrain: every base weight and every non-placeholder embedding row.
/// Personalize: only the LoRA factors and the placeholder rows.
inline TrainableSet trainable_set(Denoiser& d, TrainMode mode) {
  TrainableSet set;
  if (mode == TrainMode::kPretrain) {
    for (std::size_t i = 0; i < d.params.layers.size(); ++i) {
      set.entries.push_back({&d.params.layers[i].weight, {}, "layer" + std::to_string(i) + ".w"});
      set.entries.push_back({&d.params.layers[i].bias, {}, "layer" + std::to_string(i) + ".b"});
    }
    set.entries.push_back({&d.embeddings.rows(), d.embeddings.regular_rows(), "embeddings"});
    return set;
  }
  if (!d.lora) throw Error("personalization requires a LoRA adapter");
  for (auto& l : d.lora->layers) {
    set.entries.push_back({&l.a, {}, "lora" + std::to_string(l.layer) + ".A"});
    set.entries.push_back({&l.b, {}, "lora" + std::to_string(l.layer) + ".B"});
  }
  auto rows = d.embeddings.placeholder_rows();
  if (!rows.empty()) set.entries.push_back({&d.embeddings.rows(), std::move(rows), "placeholders"});
  return set;
}

}  // namespace palp
