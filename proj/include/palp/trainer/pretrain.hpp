#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "palp/denoiser/checkpoint.hpp"
#include "palp/diffusion/diffusion.hpp"
#include "palp/evalkit/render.hpp"
#include "palp/trainer/adam.hpp"

namespace palp {

struct PretrainConfig {
  DenoiserConfig arch;
  std::size_t timesteps = 200;
  double beta_min = 5e-4;
  double beta_max = 0.1;
  double lr = 1e-3;
  double lr_final_frac = 0.1;  // cosine decay to lr * lr_final_frac
  std::size_t steps = 20000;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  std::size_t n_per_cell = 40;
  std::size_t val_per_cell = 4;
  double cond_dropout = 0.1;        // whole prompt replaced by the null token
  double background_dropout = 0.3;  // background token omitted
  double token_dropout = 0.1;       // style or class token omitted
  std::size_t val_every = 1000;

  void validate() const {
    if (!(lr > 0.0)) throw Error("lr must be positive");
    if (steps < 1) throw Error("steps must be at least 1");
    if (batch < 1) throw Error("batch must be at least 1");
  }
};

struct PretrainResult {
  Checkpoint checkpoint;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::vector<std::pair<std::size_t, double>> val_curve;
};

inline std::vector<std::string> attribute_vocabulary(const evalkit::AttributeSpec& spec) {
  std::vector<std::string> v;
  for (const auto* group : {&spec.styles, &spec.classes, &spec.backgrounds})
    v.insert(v.end(), group->begin(), group->end());
  v.emplace_back(kNullToken);
  return v;
}

inline Prompt full_prompt(const evalkit::Sample& s) {
  return make_prompt({s.style, s.cls, s.background});
}

/// Conditioning dropout for pretraining. Partial prompts teach the model to
/// read any subset of attributes; the null prompt trains the unconditional
/// branch used by guidance.
inline Prompt dropout_prompt(const evalkit::Sample& s, const PretrainConfig& cfg, Rng& rng) {
  if (rng.uniform() < cfg.cond_dropout) return Prompt::null();
  Prompt p;
  if (rng.uniform() >= cfg.token_dropout) p.tokens.push_back(s.style);
  if (rng.uniform() >= cfg.token_dropout) p.tokens.push_back(s.cls);
  if (rng.uniform() >= cfg.background_dropout) p.tokens.push_back(s.background);
  if (p.tokens.empty()) return Prompt::null();
  return p;
}

/// Loss on fixed (t, eps) draws over the validation set, full prompts.
inline double validation_loss(const Checkpoint& ck, const evalkit::Dataset& val, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = val.size(), w = ck.model.params.image_pixels;
  Tensor x0(Shape{n, w});
  std::vector<std::size_t> ts(n);
  std::vector<Prompt> ps;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor m = evalkit::to_model_space(val[i].image);
    std::copy(m.data().begin(), m.data().end(), x0.data().begin() + static_cast<std::ptrdiff_t>(i * w));
    ts[i] = rng.index(ck.schedule.steps());
    ps.push_back(full_prompt(val[i]));
  }
  const Tensor eps = rng.normal_tensor({n, w});
  const Tensor pred = predict_eval(view(ck.model), q_sample(x0, ts, eps, ck.schedule), ts, ps);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - eps[i]) * (pred[i] - eps[i]);
  return s / static_cast<double>(pred.size());
}

/// Gaussian fit of the training pixels (model space) and the schedule factors
/// the linear prior needs. Eigenvalues are floored at `floor_frac` times their
/// mean: with fewer images than pixels most of them are zero, and an exact
/// zero turns into a 1/s gain on anything off the training span.
inline LinearPrior fit_linear_prior(const evalkit::Dataset& data, const NoiseSchedule& s,
                                    double floor_frac = 0.01) {
  if (data.empty()) throw Error("cannot fit a linear prior to an empty dataset");
  const std::size_t w = data.front().image.size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(w));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor m = evalkit::to_model_space(data[i].image);
    for (std::size_t j = 0; j < w; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[j];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(data.size());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");

  const double floor = floor_frac * std::max(0.0, eig.eigenvalues().mean());
  LinearPrior lp;
  lp.mean.assign(mean.data(), mean.data() + w);
  lp.basis = Tensor(Shape{w, w});
  for (std::size_t k = 0; k < w; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    lp.variance.push_back(std::max(floor, eig.eigenvalues()(kk)));
    for (std::size_t j = 0; j < w; ++j) lp.basis(k, j) = eig.eigenvectors()(static_cast<Eigen::Index>(j), kk);
  }
  for (std::size_t t = 0; t < s.steps(); ++t) {
    lp.signal.push_back(s.sqrt_ab(t));
    lp.noise.push_back(s.sqrt_one_minus_ab(t));
  }
  return lp;
}

using PretrainProgress = std::function<void(std::size_t step, double val_loss)>;

/// Trains the base denoiser and every attribute embedding from scratch.
inline PretrainResult pretrain(const PretrainConfig& cfg, const evalkit::Dataset& train,
                               const evalkit::Dataset& val, const evalkit::AttributeSpec& spec = {},
                               const PretrainProgress& progress = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw Error("pretraining needs train and validation data");
  Rng init(cfg.seed);
  Rng draw = init.stream(1);
  Rng val_rng = init.stream(2);
  const std::uint64_t val_seed = val_rng.next_u64();

  PretrainResult out;
  Checkpoint& ck = out.checkpoint;
  ck.schedule = build_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max);
  ck.model.params = init_denoiser(cfg.arch, init);
  if (cfg.arch.linear_prior) ck.model.params.prior = fit_linear_prior(train, ck.schedule);
  ck.model.embeddings = EmbeddingTable::random(attribute_vocabulary(spec), cfg.arch.cond_dim, init);

  TrainableSet set = trainable_set(ck.model, TrainMode::kPretrain);
  Adam opt(set, AdamConfig{cfg.lr});
  const std::size_t w = ck.model.params.image_pixels;

  out.initial_val_loss = validation_loss(ck, val, val_seed);
  out.val_curve.emplace_back(0, out.initial_val_loss);
  if (progress) progress(0, out.initial_val_loss);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const double frac = static_cast<double>(step - 1) / static_cast<double>(cfg.steps);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    opt.set_lr(cfg.lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * cosine));

    Tensor x0(Shape{cfg.batch, w});
    std::vector<std::size_t> ts(cfg.batch);
    std::vector<Prompt> ps;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const evalkit::Sample& s = train[draw.index(train.size())];
      const Tensor m = evalkit::to_model_space(s.image);
      std::copy(m.data().begin(), m.data().end(),
                x0.data().begin() + static_cast<std::ptrdiff_t>(i * w));
      ts[i] = draw.index(ck.schedule.steps());
      ps.push_back(dropout_prompt(s, cfg, draw));
    }
    const Tensor eps = draw.normal_tensor({cfg.batch, w});

    Tape tape;
    Var loss = denoise_loss(tape, view(ck.model, &set), x0, ps, ts, eps, ck.schedule);
    if (!std::isfinite(loss.value().item())) throw NumericError("pretraining diverged");
    std::vector<Var> leaves;
    for (const auto& e : set.entries) leaves.push_back(tape.leaf(*e.tensor));
    opt.step(set, tape.gradient(loss, leaves));

    if (step % cfg.val_every == 0 || step == cfg.steps) {
      const double v = validation_loss(ck, val, val_seed);
      out.val_curve.emplace_back(step, v);
      if (progress) progress(step, v);
    }
  }
  out.final_val_loss = out.val_curve.back().second;
  return out;
}

/// Builds the attribute-grid datasets from the config seeds and pretrains.
inline PretrainResult pretrain(const PretrainConfig& cfg, const evalkit::AttributeSpec& spec = {},
                               const PretrainProgress& progress = {}) {
  const auto train = evalkit::gen_dataset(spec, cfg.n_per_cell, splitmix64(cfg.seed ^ 0x7261696eULL));
  const auto val = evalkit::gen_dataset(spec, cfg.val_per_cell, splitmix64(cfg.seed ^ 0x76616cULL));
  return pretrain(cfg, train, val, spec, progress);
}

}  // namespace palp
