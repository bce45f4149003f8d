#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "palp/denoiser/checkpoint.hpp"
#include "palp/diffusion/diffusion.hpp"
#include "palp/evalkit/oracle.hpp"
#include "palp/evalkit/render.hpp"
#include "palp/guidance/guidance.hpp"
#include "palp/trainer/adam.hpp"

namespace palp {

/// Reference photos of one subject and the prompt used to learn it.
struct SubjectSet {
  std::string placeholder = "[V]";
  std::string class_token;
  std::vector<Tensor> images;  // [pixels] each, image space [0, 1]
  Prompt personalization_prompt;

  void validate() const {
    if (images.empty()) throw Error("subject set has no images");
    for (const auto& im : images)
      if (im.shape() != images.front().shape()) throw ShapeError("subject images differ in shape");
    if (!is_placeholder(placeholder)) throw Error("bad placeholder name " + placeholder);
    if (std::find(personalization_prompt.tokens.begin(), personalization_prompt.tokens.end(),
                  placeholder) == personalization_prompt.tokens.end()) {
      throw Error("personalization prompt does not contain " + placeholder);
    }
  }
};

/// Renders `count` reference photos; y_P = (photo, placeholder).
inline SubjectSet make_subject_set(const evalkit::SubjectSpec& spec, std::size_t count,
                                   std::uint64_t seed, std::string placeholder = "[V]") {
  SubjectSet s;
  s.placeholder = std::move(placeholder);
  s.class_token = spec.class_token;
  s.images = evalkit::render_subject_images(spec, count, seed);
  s.personalization_prompt = make_prompt({"photo", s.placeholder}, PromptRole::kPersonalization);
  s.validate();
  return s;
}

struct TrainConfig {
  double lr = 5e-5;
  std::size_t steps = 500;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  GuidanceConfig guidance;
  double lambda_palp = 1.0;
  std::vector<std::size_t> early_stop_grid{50, 100, 200, 300, 400, 500};
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  double embedding_lr_scale = 1.0;  // placeholder rows step this many times faster
  std::size_t eval_samples = 32;
  double eval_guidance = 3.0;
  bool evaluate = true;
  std::string run_id = "run";

  void validate() const {
    if (!(lr > 0.0)) throw Error("lr must be positive");
    if (steps < 1) throw Error("steps must be at least 1");
    if (batch < 1) throw Error("batch must be at least 1");
    if (!(lambda_palp >= 0.0)) throw Error("lambda must be non-negative");
    if (!(embedding_lr_scale > 0.0)) throw Error("embedding lr scale must be positive");
    guidance.validate();
  }
};

/// Mutable state of one personalization run.
struct PersonalizeState {
  Denoiser model;
  Adam opt;
  Rng rng{0};        // batches and timesteps
  Rng fresh_rng{0};  // guidance noise when it is not shared
  std::size_t step = 0;
};

/// Copies the base, registers every subject placeholder (row copied from its
/// class token) and attaches a fresh adapter with B = 0.
inline PersonalizeState init_personalization(const Checkpoint& base,
                                             std::span<const SubjectSet> subjects,
                                             const TrainConfig& cfg) {
  if (subjects.empty()) throw Error("personalization needs at least one subject");
  PersonalizeState st;
  st.model = base.model;
  for (const auto& s : subjects) {
    s.validate();
    st.model.embeddings.add_placeholder(s.placeholder, s.class_token);
  }
  Rng root(cfg.seed);
  Rng lora_rng = root.stream(1);
  st.model.lora = init_lora(st.model.params, cfg.lora_rank, cfg.lora_scale, lora_rng);
  st.rng = root.stream(2);
  st.fresh_rng = root.stream(3);
  TrainableSet set = trainable_set(st.model, TrainMode::kPersonalize);
  for (auto& e : set.entries)
    if (!e.rows.empty()) e.lr_scale = cfg.embedding_lr_scale;
  st.opt = Adam(set, AdamConfig{cfg.lr});
  return st;
}

struct Batch {
  Tensor x0;  // [n, pixels] model space
  std::vector<std::size_t> ts;
  Tensor eps;
  std::vector<Prompt> y_p;
  std::size_t subject = 0;
};

/// One subject chosen uniformly, then images drawn with replacement.
inline Batch draw_batch(Rng& rng, std::span<const SubjectSet> subjects, std::size_t batch,
                        const NoiseSchedule& s) {
  Batch b;
  b.subject = subjects.size() > 1 ? rng.index(subjects.size()) : 0;
  const SubjectSet& sub = subjects[b.subject];
  const std::size_t w = sub.images.front().size();
  b.x0 = Tensor(Shape{batch, w});
  for (std::size_t i = 0; i < batch; ++i) {
    const Tensor m = evalkit::to_model_space(sub.images[rng.index(sub.images.size())]);
    std::copy(m.data().begin(), m.data().end(), b.x0.data().begin() + static_cast<std::ptrdiff_t>(i * w));
    b.ts.push_back(rng.index(s.steps()));
  }
  b.eps = rng.normal_tensor({batch, w});
  b.y_p.assign(batch, sub.personalization_prompt);
  return b;
}

/// Target prompt with every placeholder replaced by its class token.
inline Prompt decompose_target(const Prompt& target, const EmbeddingTable& table) {
  for (const auto& t : target.tokens)
    if (is_placeholder(t)) (void)table.class_of(t);
  return clean_prompt(target, table);
}

struct StepStats {
  double loss = 0.0;       // personalization loss
  double guidance = 0.0;   // guidance objective value (0 when inactive)
  bool guided = false;
};

/// Scalar root of the combined step together with the gradients of every
/// trainable tensor, without touching the optimizer.
struct StepGradients {
  StepStats stats;
  std::vector<Tensor> grads;
};

inline StepGradients step_gradients(PersonalizeState& st, const Batch& b, const Prompt& target,
                                    const TrainConfig& cfg, const Denoiser& base,
                                    const NoiseSchedule& s, Rng& fresh) {
  const TrainableSet set = trainable_set(st.model, TrainMode::kPersonalize);
  const DenoiserView live = view(st.model, &set);
  Tape tape;
  Var x_t = tape.constant(q_sample(b.x0, b.ts, b.eps, s));
  Var eps_pred = live.predict(x_t, b.ts, b.y_p);
  Var root = mse(eps_pred, tape.constant(b.eps));
  StepGradients out;
  out.stats.loss = root.value().item();
  const bool guided = cfg.guidance.mode != GuidanceMode::kNone && cfg.lambda_palp != 0.0;
  if (guided) {
    const Prompt clean = decompose_target(target, st.model.embeddings);
    const std::vector<Prompt> y_c(b.ts.size(), clean);
    GuidanceBranch g = guidance_branch(view(base), view(st.model), x_t, eps_pred, b.ts, b.eps, y_c,
                                       b.y_p, cfg.guidance, s, fresh);
    out.stats.guidance = g.objective.value().item();
    out.stats.guided = true;
    root = add(root, scale(g.objective, cfg.lambda_palp));
  }
  std::vector<Var> leaves;
  for (const auto& e : set.entries) leaves.push_back(tape.leaf(*e.tensor));
  out.grads = tape.gradient(root, leaves);
  return out;
}

/// One optimizer step on the personalization loss plus lambda times the
/// guidance objective. With mode none or lambda 0 the guidance branch is not
/// evaluated at all, so the step is exactly a baseline step.
inline StepStats palp_step(PersonalizeState& st, const Batch& b, const Prompt& target,
                           const TrainConfig& cfg, const Denoiser& base, const NoiseSchedule& s) {
  StepGradients g = step_gradients(st, b, target, cfg, base, s, st.fresh_rng);
  st.opt.step(trainable_set(st.model, TrainMode::kPersonalize), g.grads);
  ++st.step;
  return g.stats;
}

struct MetricRow {
  std::string run_id;
  std::string mode;
  std::size_t step = 0;
  double text_align = 0.0;
  double subject_sim = 0.0;
  double loss = 0.0;
  std::uint64_t seed = 0;
  // not part of the CSV
  std::vector<std::pair<std::string, double>> elements;
  std::vector<double> subject_sims;  // one per subject
};

struct EvalResult {
  double text_align = 0.0;
  std::vector<std::pair<std::string, double>> elements;  // mean per element
  std::vector<double> subject_sims;                      // mean per subject
  Tensor images;                                         // [n, pixels] image space
};

/// Samples the target prompt and scores the samples against the clean prompt
/// and each subject's references.
inline EvalResult evaluate_prompt(const Denoiser& model, const NoiseSchedule& s, const Prompt& target,
                                  std::span<const std::vector<evalkit::SubjectRef>> refs,
                                  std::size_t count, double guidance, std::uint64_t seed) {
  const Prompt clean = target.has_placeholder() ? decompose_target(target, model.embeddings) : target;
  const Tensor x = sample(view(model), target, count, model.params.image_pixels, s, seed,
                          SampleOptions{guidance, true});
  EvalResult r;
  r.images = Tensor(x.shape());
  r.subject_sims.assign(refs.size(), 0.0);
  const std::size_t w = model.params.image_pixels;
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor img = evalkit::to_image_space(x.row(i));
    std::copy(img.data().begin(), img.data().end(), r.images.data().begin() + static_cast<std::ptrdiff_t>(i * w));
    const auto sc = evalkit::text_align_score(img.data(), clean);
    if (r.elements.empty())
      for (const auto& e : sc.elements) r.elements.emplace_back(e.first, 0.0);
    for (std::size_t k = 0; k < sc.elements.size(); ++k) r.elements[k].second += sc.elements[k].second;
    r.text_align += sc.text_align;
    for (std::size_t k = 0; k < refs.size(); ++k) r.subject_sims[k] += evalkit::subject_sim(img.data(), refs[k]);
  }
  const double n = static_cast<double>(count);
  r.text_align /= n;
  for (auto& e : r.elements) e.second /= n;
  for (auto& v : r.subject_sims) v /= n;
  return r;
}

struct RunResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> metrics;
  std::map<std::size_t, Tensor> samples;  // grid step -> [n, pixels] image space
};

using StepCallback = std::function<void(const PersonalizeState&, const StepStats&)>;

inline std::string run_mode_name(const TrainConfig& cfg) {
  if (cfg.guidance.mode == GuidanceMode::kNone) return "baseline";
  return mode_name(cfg.guidance.mode);
}

/// Shared loop for every personalization variant.
inline RunResult personalize(const Checkpoint& base, std::span<const SubjectSet> subjects,
                             const Prompt& target, const TrainConfig& cfg,
                             const StepCallback& on_step = {}) {
  cfg.validate();
  for (const auto& w : cfg.guidance.warnings()) std::fprintf(stderr, "warning: %s\n", w.c_str());
  PersonalizeState st = init_personalization(base, subjects, cfg);
  (void)decompose_target(target, st.model.embeddings);

  std::vector<std::vector<evalkit::SubjectRef>> refs;
  for (const auto& s : subjects) refs.push_back(evalkit::make_subject_refs(s.images));
  const std::uint64_t eval_seed = splitmix64(cfg.seed ^ 0x6576616cULL);

  RunResult out;
  double loss_acc = 0.0;
  std::size_t loss_n = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = draw_batch(st.rng, subjects, cfg.batch, base.schedule);
    const StepStats stats = palp_step(st, b, target, cfg, base.model, base.schedule);
    if (!std::isfinite(stats.loss)) throw NumericError("personalization diverged");
    loss_acc += stats.loss;
    ++loss_n;
    if (on_step) on_step(st, stats);
    const bool at_grid = std::find(cfg.early_stop_grid.begin(), cfg.early_stop_grid.end(), step) !=
                         cfg.early_stop_grid.end();
    if (cfg.evaluate && at_grid) {
      const EvalResult ev = evaluate_prompt(st.model, base.schedule, target, refs, cfg.eval_samples,
                                            cfg.eval_guidance, eval_seed);
      MetricRow row;
      row.run_id = cfg.run_id;
      row.mode = run_mode_name(cfg);
      row.step = step;
      row.text_align = ev.text_align;
      double sim = 0.0;
      for (double v : ev.subject_sims) sim += v;
      row.subject_sim = sim / static_cast<double>(ev.subject_sims.size());
      row.loss = loss_acc / static_cast<double>(loss_n);
      row.seed = cfg.seed;
      row.elements = ev.elements;
      row.subject_sims = ev.subject_sims;
      out.metrics.push_back(std::move(row));
      out.samples[step] = ev.images;
      loss_acc = 0.0;
      loss_n = 0;
    }
  }
  out.checkpoint = Checkpoint{std::move(st.model), base.schedule};
  return out;
}

inline RunResult personalize_baseline(const Checkpoint& base, const SubjectSet& subject,
                                      const Prompt& target, const TrainConfig& cfg,
                                      const StepCallback& on_step = {}) {
  if (cfg.guidance.mode != GuidanceMode::kNone) throw Error("baseline personalization requires mode none");
  return personalize(base, std::span<const SubjectSet>(&subject, 1), target, cfg, on_step);
}

inline RunResult personalize_palp(const Checkpoint& base, const SubjectSet& subject,
                                  const Prompt& target, const TrainConfig& cfg,
                                  const StepCallback& on_step = {}) {
  if (cfg.guidance.mode == GuidanceMode::kNone) throw Error("guided personalization requires a guidance mode");
  return personalize(base, std::span<const SubjectSet>(&subject, 1), target, cfg, on_step);
}

/// Two or more subjects with their own placeholders; the target names every
/// placeholder and its clean form holds all class tokens.
inline RunResult multi_subject_personalize(const Checkpoint& base, std::span<const SubjectSet> subjects,
                                           const Prompt& target, const TrainConfig& cfg,
                                           const StepCallback& on_step = {}) {
  if (subjects.size() < 2) throw Error("multi-subject personalization needs at least two subjects");
  for (const auto& s : subjects)
    if (std::find(target.tokens.begin(), target.tokens.end(), s.placeholder) == target.tokens.end())
      throw Error("target prompt is missing " + s.placeholder);
  return personalize(base, subjects, target, cfg, on_step);
}

}  // namespace palp
