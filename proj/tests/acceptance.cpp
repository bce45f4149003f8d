// End-to-end acceptance run: one PASS/FAIL line per criterion. Exit code 0
// only when every criterion passes. Usage: acceptance [cache_dir]
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "palp/cli/app.hpp"
#include "palp/diffcore/gradcheck.hpp"
#include "palp/evalkit/probe.hpp"
#include "palp/trainer/ablation.hpp"
#include "palp/trainer/pretrain.hpp"

using namespace palp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [x]");
  }
};

int g_passed = 0;

void report(int id, const char* name, const Verdict& v) {
  g_passed += v.pass;
  std::printf("%s %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
  std::fflush(stdout);
}

void note(const std::string& s) {
  std::printf("     %s\n", s.c_str());
  std::fflush(stdout);
}

// Personalization settings shared by every trained run below.
TrainConfig toy_train() {
  TrainConfig c;
  c.lr = 3e-3;
  c.steps = 500;
  c.batch = 32;
  c.lambda_palp = 0.1;
  c.lora_rank = 4;
  c.eval_samples = 32;
  c.eval_guidance = 1.0;
  return c;
}

constexpr std::uint64_t kSeeds[] = {0, 1, 2};
const std::vector<std::size_t> kProbeT{160, 180, 199};
const std::vector<std::size_t> kProbeSteps{100, 300, 500};

PretrainConfig base_config() {
  PretrainConfig p;
  p.arch.linear_prior = true;
  return p;
}

std::string describe(const PretrainConfig& p) {
  std::ostringstream os;
  os.precision(17);
  os << p.arch.image_pixels << ' ' << p.arch.time_width << ' ' << p.arch.cond_dim << ' ' << p.arch.linear_prior;
  for (auto h : p.arch.hidden) os << ' ' << h;
  os << ' ' << p.timesteps << ' ' << p.beta_min << ' ' << p.beta_max << ' ' << p.lr << ' ' << p.lr_final_frac
     << ' ' << p.steps << ' ' << p.batch << ' ' << p.seed << ' ' << p.n_per_cell << ' ' << p.val_per_cell << ' '
     << p.cond_dropout << ' ' << p.background_dropout << ' ' << p.token_dropout << ' ' << p.val_every;
  return os.str();
}

struct BaseModel {
  Checkpoint ck;
  double pretrain_seconds = -1.0;  // negative: loaded from the cache
  double val_ratio = 0.0;
};

BaseModel load_or_pretrain(const fs::path& cache) {
  const PretrainConfig cfg = base_config();
  const fs::path file = cache / ("base-" + fnv1a_hex(describe(cfg)) + ".bin");
  BaseModel out;
  if (fs::exists(file)) {
    try {
      out.ck = load_checkpoint(file);
      note("base model loaded from " + file.string());
      return out;
    } catch (const Error& e) {
      note(std::string("cached base unusable (") + e.what() + "), retraining");
    }
  }
  note("pretraining the base model (" + std::to_string(cfg.steps) + " steps) into " + file.string());
  const auto t0 = Clock::now();
  PretrainResult r = pretrain(cfg);
  out.pretrain_seconds = since(t0);
  out.val_ratio = r.final_val_loss / r.initial_val_loss;
  out.ck = std::move(r.checkpoint);
  save_checkpoint(out.ck, file);
  note(fmt("pretrained in %.0fs, val %.4f -> %.4f (ratio %.3f, recorded threshold 0.4), hash %s",
           out.pretrain_seconds, r.initial_val_loss, r.final_val_loss, out.val_ratio,
           checkpoint_hash(out.ck).c_str()));
  return out;
}

// ---------------------------------------------------------------- 1

Checkpoint tiny_base(std::uint64_t seed) {
  Rng rng(seed);
  Checkpoint ck;
  ck.schedule = build_schedule(40, 5e-4, 0.1);
  DenoiserConfig arch{256, 8, 8, {24, 24}};
  arch.linear_prior = true;
  ck.model.params = init_denoiser(arch, rng);
  ck.model.params.prior = fit_linear_prior(evalkit::gen_dataset({}, 2, seed), ck.schedule);
  ck.model.embeddings = EmbeddingTable::random(attribute_vocabulary({}), 8, rng);
  return ck;
}

Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  Verdict v;
  double worst_coord = 0.0, worst_norm = 0.0, min_ref = INFINITY;
  std::size_t configs = 0;
  for (std::uint64_t i = 0; i < 24; ++i) {
    const Checkpoint base = tiny_base(100 + i);
    const bool multi = i % 4 == 3;
    std::vector<SubjectSet> subs;
    Prompt target;
    if (multi) {
      subs.push_back(make_subject_set(evalkit::default_subject(), 2, 200 + i, "[V1]"));
      subs.push_back(make_subject_set(evalkit::second_subject(), 2, 300 + i, "[V2]"));
      target = make_prompt({"sketch", "[V1]", "[V2]"});
    } else {
      subs.push_back(make_subject_set(evalkit::default_subject(), 3, 200 + i));
      target = make_prompt({i % 2 ? "sketch" : "photo", "[V]", i % 3 ? "plain" : "stripes"});
    }
    TrainConfig c;
    c.batch = 4;
    c.seed = i;
    c.lora_rank = 2;
    c.evaluate = false;
    c.lambda_palp = 0.3 + 0.1 * static_cast<double>(i % 5);
    c.guidance.mode = i % 3 == 2 ? GuidanceMode::kSds : GuidanceMode::kPalp;
    c.guidance.share_noise = i % 2 == 0;
    c.guidance.rescale = (i / 2) % 2 == 0;
    c.guidance.alpha = std::vector<double>{15.0, 7.5, 3.0}[i % 3];
    c.guidance.beta = std::vector<double>{7.5, 1.0, 2.0}[i % 3];
    PersonalizeState st = init_personalization(base, subs, c);
    for (auto& l : st.model.lora->layers) l.b = st.rng.normal_tensor(l.b.shape(), 0.2);
    const Batch b = draw_batch(st.rng, subs, c.batch, base.schedule);

    Rng fresh_a = st.fresh_rng, fresh_b = st.fresh_rng;
    const StepGradients analytic = step_gradients(st, b, target, c, base.model, base.schedule, fresh_a);

    // the direction is a constant: evaluate it once at the current parameters
    const std::vector<Prompt> y_c(b.ts.size(), decompose_target(target, st.model.embeddings));
    Tensor direction;
    {
      Tape tape;
      Var x_t = tape.constant(q_sample(b.x0, b.ts, b.eps, base.schedule));
      Var pred = view(st.model).predict(x_t, b.ts, b.y_p);
      direction = guidance_branch(view(base.model), view(st.model), x_t, pred, b.ts, b.eps, y_c, b.y_p,
                                  c.guidance, base.schedule, fresh_b)
                      .direction;
    }
    const TrainableSet set = trainable_set(st.model, TrainMode::kPersonalize);
    std::vector<Tensor> params;
    for (const auto& e : set.entries) params.push_back(*e.tensor);
    auto f = [&](std::span<const Tensor> p) {
      for (std::size_t k = 0; k < p.size(); ++k) *set.entries[k].tensor = p[k];
      Tape tape;
      Var x_t = tape.constant(q_sample(b.x0, b.ts, b.eps, base.schedule));
      Var pred = view(st.model).predict(x_t, b.ts, b.y_p);
      Var loss = mse(pred, tape.constant(b.eps));
      Var obj = guidance_objective(direction, x0_hat(x_t, pred, b.ts, base.schedule), b.ts, base.schedule,
                                   c.guidance.rescale);
      return add(loss, scale(obj, c.lambda_palp)).value().item();
    };
    const auto numeric = fd_grad(f, params, 1e-6);
    for (std::size_t k = 0; k < params.size(); ++k) *set.entries[k].tensor = params[k];

    worst_coord = std::max(worst_coord, compare_grads(analytic.grads, numeric, 1e-4).max_rel_err);
    double diff = 0.0, ref = 0.0;
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      const Tensor d = analytic.grads[k] - numeric[k];
      diff += dot(d, d);
      ref += dot(numeric[k], numeric[k]);
    }
    worst_norm = std::max(worst_norm, std::sqrt(diff / ref));
    min_ref = std::min(min_ref, std::sqrt(ref));
    ++configs;
  }
  const double secs = since(t0);
  v.require(configs >= 20, fmt("%zu configurations", configs));
  v.require(worst_coord < 1e-4, fmt("max coordinate rel err %.2e < 1e-4", worst_coord));
  v.require(worst_norm < 1e-4, fmt("max norm rel err %.2e < 1e-4", worst_norm));
  v.require(min_ref > 0.0, fmt("smallest gradient norm %.2e", min_ref));
  v.require(secs < 60.0, fmt("%.1fs < 60s", secs));
  return v;
}

// ---------------------------------------------------------------- 2

Verdict identities(const Checkpoint& base) {
  Verdict v;
  const NoiseSchedule& s = base.schedule;
  Rng rng(21);
  double rt = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t t = rng.index(s.steps());
    const Tensor x0 = rng.normal_tensor({256});
    const Tensor eps = rng.normal_tensor({256});
    rt = std::max(rt, max_abs_diff(x0_hat(q_sample(x0, t, eps, s), eps, t, s), x0));
  }
  v.require(rt <= 1e-10, fmt("x0 round trip %.1e", rt));

  const std::size_t n = 6;
  const Tensor x = rng.normal_tensor({n, 256});
  std::vector<std::size_t> ts;
  for (std::size_t i = 0; i < n; ++i) ts.push_back(rng.index(s.steps()));
  const std::vector<Prompt> ps(n, make_prompt({"sketch", "circle", "plain"}));
  const Tensor cond = predict_eval(view(base.model), x, ts, ps);
  const Tensor uncond = predict_eval(view(base.model), x, ts, std::vector<Prompt>(n, Prompt::null()));
  double affine_err = 0.0;
  for (double a : {0.0, 0.5, 1.0, 3.0, 7.5, 15.0}) {
    const Tensor g = cfg_eval(view(base.model), x, ts, ps, a);
    for (std::size_t i = 0; i < g.size(); ++i)
      affine_err = std::max(affine_err, std::abs(g[i] - ((1.0 - a) * uncond[i] + a * cond[i])));
  }
  v.require(affine_err <= 1e-10, fmt("cfg affine in alpha %.1e", affine_err));

  // rescaled gradient of <d, x0_hat> against -<d, dG/dtheta> / N, d a real direction
  Denoiser personal = base.model;
  personal.embeddings.add_placeholder("[V]", "square");
  Rng lr(22);
  personal.lora = init_lora(personal.params, 4, 1.0, lr);
  for (auto& l : personal.lora->layers) l.b = lr.normal_tensor(l.b.shape(), 0.05);
  const std::vector<Prompt> yp(n, make_prompt({"photo", "[V]"}));
  const std::vector<Prompt> yc(n, make_prompt({"sketch", "square"}));
  GuidanceConfig gc;
  const Tensor d = palp_direction(view(base.model), view(personal), x, ts, yc, yp, gc);
  TrainableSet set = trainable_set(personal, TrainMode::kPersonalize);
  Tape t1;
  Var xt = t1.constant(x);
  Var x0 = x0_hat(xt, view(personal, &set).predict(xt, ts, yp), ts, s);
  std::vector<Var> l1;
  for (const auto& e : set.entries) l1.push_back(t1.leaf(*e.tensor));
  const auto via_x0 = apply_palp_grad(d, x0, ts, s, true, l1);
  Tape t2;
  Var g = view(personal, &set).predict(t2.constant(x), ts, yp);
  Tensor neg = d;
  neg *= -1.0 / static_cast<double>(d.size());
  std::vector<Var> l2;
  for (const auto& e : set.entries) l2.push_back(t2.leaf(*e.tensor));
  const auto direct = grad(dot(t2.constant(neg), g), l2);
  double cancel = 0.0;
  for (std::size_t k = 0; k < direct.size(); ++k)
    cancel = std::max(cancel, max_abs_diff(via_x0[k], direct[k]) / std::max(1.0, norm(direct[k])));
  v.require(cancel <= 1e-10, fmt("rescale cancellation %.1e", cancel));
  return v;
}

// ---------------------------------------------------------------- 3

Verdict zero_residual(const Checkpoint& base, const SubjectSet& sub) {
  Verdict v;
  const Prompt target = make_prompt({"photo", "[V]"});
  TrainConfig c = toy_train();
  c.steps = 1;
  c.evaluate = false;
  c.guidance.mode = GuidanceMode::kPalp;
  c.guidance.alpha = c.guidance.beta = 7.5;
  std::vector<SubjectSet> subs{sub};
  for (bool share : {true, false}) {
    c.guidance.share_noise = share;
    PersonalizeState st = init_personalization(base, subs, c);
    const Batch b = draw_batch(st.rng, subs, c.batch, base.schedule);
    const StepGradients g = step_gradients(st, b, target, c, base.model, base.schedule, st.fresh_rng);
    v.require(g.stats.guided && g.stats.guidance == 0.0,
              fmt("%s noise contribution %.1e", share ? "shared" : "fresh", g.stats.guidance));
  }
  c.guidance.share_noise = true;
  TrainConfig plain = c;
  plain.guidance.mode = GuidanceMode::kNone;
  const bool same = serialize(personalize_palp(base, sub, target, c).checkpoint) ==
                    serialize(personalize_baseline(base, sub, target, plain).checkpoint);
  v.require(same, same ? "PALP step bit-matches baseline step" : "PALP step differs from baseline step");
  return v;
}

// ---------------------------------------------------------------- 4

Verdict calibration() {
  Verdict v;
  const evalkit::AttributeSpec spec;
  const evalkit::Dataset held = evalkit::gen_dataset(spec, 42, 0xacce);
  std::size_t style = 0, cls = 0, bg = 0, bg_n = 0;
  for (const auto& s : held) {
    style += evalkit::classify_style(s.image.data()) == s.style;
    cls += evalkit::classify_class(s.image.data(), spec) == s.cls;
    if (s.style == "photo") {
      bg += evalkit::classify_background(s.image.data()) == s.background;
      ++bg_n;
    }
  }
  const double n = static_cast<double>(held.size());
  v.require(held.size() >= 1000, fmt("%zu held-out images", held.size()));
  v.require(style / n >= 0.99, fmt("style acc %.4f", style / n));
  v.require(cls / n >= 0.99, fmt("class acc %.4f", cls / n));
  v.require(bg / static_cast<double>(bg_n) >= 0.99, fmt("background acc %.4f", bg / static_cast<double>(bg_n)));
  double self_min = 1.0, gray_max = 0.0;
  const Tensor gray(Shape{evalkit::kPixels}, 0.5);
  for (const auto& spec_s : {evalkit::default_subject(), evalkit::second_subject()}) {
    for (const auto& r : evalkit::render_subject_images(spec_s, 4, 5)) {
      const std::vector<evalkit::SubjectRef> one{evalkit::make_subject_ref(r.data())};
      self_min = std::min(self_min, evalkit::subject_sim(r.data(), one));
      gray_max = std::max(gray_max, evalkit::subject_sim(gray.data(), one));
    }
  }
  v.require(self_min == 1.0, fmt("sim(ref, ref) %.6f", self_min));
  v.require(gray_max <= 0.1, fmt("sim(gray) %.3f", gray_max));
  return v;
}

// ---------------------------------------------------------------- 5-8

struct Variant {
  std::string name;
  GuidanceMode mode;
  bool share, rescale;
};

// Fig. 4 style probe of a model snapshot.
struct ProbeStats {
  double whiteness = 0.0;
  double nearest_mse = 0.0;
};

ProbeStats probe_stats(const Denoiser& m, const NoiseSchedule& s, const Prompt& p,
                       const std::vector<Tensor>& train_images) {
  const auto r = evalkit::x0hat_probe(m, s, p, kProbeT, 77, 1.0, 16);
  ProbeStats out;
  for (std::size_t k = 0; k < kProbeT.size(); ++k) {
    out.whiteness += r.background_whiteness[k] / static_cast<double>(kProbeT.size());
    out.nearest_mse += evalkit::mean_nearest_mse(r.estimates[k], train_images) / static_cast<double>(kProbeT.size());
  }
  return out;
}

struct LadderRuns {
  AblationResult result;
  std::map<std::string, std::vector<CurvePoint>> curves;
  // variant -> probe step -> seed-averaged probe
  std::map<std::string, std::map<std::size_t, ProbeStats>> probes;
  std::map<std::string, std::size_t> diverged;
  double max_run_seconds = 0.0;
  std::string first_palp_bytes;
  std::vector<MetricRow> first_palp_rows;
};

const std::vector<Variant> kLadder{
    {"baseline", GuidanceMode::kNone, true, true},
    {"sds", GuidanceMode::kSds, true, false},
    {"palp", GuidanceMode::kPalp, true, false},
    {"palp+rescale", GuidanceMode::kPalp, true, true},
    {"palp+rescale, fresh noise", GuidanceMode::kPalp, false, true},
};

LadderRuns run_ladder(const Checkpoint& base, const SubjectSet& sub, const Prompt& target) {
  LadderRuns out;
  for (const Variant& var : kLadder) {
    for (std::uint64_t seed : kSeeds) {
      AblationCell cell{var.mode, var.share, var.rescale, seed};
      TrainConfig cfg = toy_train();
      cfg.guidance.mode = var.mode;
      cfg.guidance.share_noise = var.share;
      cfg.guidance.rescale = var.rescale;
      cfg.seed = seed;
      cfg.run_id = cell.run_id();
      const bool probed = var.name == "baseline" || var.name == "palp+rescale";
      const Prompt probe_prompt = make_prompt({"sketch", "[V]"});
      StepCallback cb;
      if (probed) {
        cb = [&](const PersonalizeState& st, const StepStats&) {
          if (std::find(kProbeSteps.begin(), kProbeSteps.end(), st.step) == kProbeSteps.end()) return;
          const ProbeStats p = probe_stats(st.model, base.schedule, probe_prompt, sub.images);
          ProbeStats& acc = out.probes[var.name][st.step];
          acc.whiteness += p.whiteness / std::size(kSeeds);
          acc.nearest_mse += p.nearest_mse / std::size(kSeeds);
        };
      }
      const auto t0 = Clock::now();
      std::vector<MetricRow> rows;
      try {
        RunResult r = personalize(base, std::span<const SubjectSet>(&sub, 1), target, cfg, cb);
        rows = r.metrics;
        if (var.name == "palp+rescale" && seed == kSeeds[0]) {
          out.first_palp_bytes = serialize(r.checkpoint);
          out.first_palp_rows = r.metrics;
        }
      } catch (const NumericError&) {
        ++out.diverged[var.name];
        for (std::size_t step : cfg.early_stop_grid) {
          MetricRow row;
          row.step = step;
          rows.push_back(row);  // diverged: scored as zero alignment and zero similarity
        }
      }
      out.max_run_seconds = std::max(out.max_run_seconds, since(t0));
      out.result.cells.push_back(cell);
      out.result.runs.push_back(std::move(rows));
    }
  }
  out.curves = seed_averaged_curves(out.result);
  return out;
}

std::string key(const std::string& name) {
  for (const Variant& v : kLadder)
    if (v.name == name) return AblationCell{v.mode, v.share, v.rescale, 0}.variant();
  throw Error("unknown variant " + name);
}

const CurvePoint& at(const LadderRuns& r, const std::string& name, std::size_t step) {
  for (const auto& p : r.curves.at(key(name)))
    if (p.step == step) return p;
  throw Error("no point at step " + std::to_string(step));
}

double slope(const std::vector<CurvePoint>& c, double CurvePoint::*field) {
  double mx = 0.0, my = 0.0;
  for (const auto& p : c) {
    mx += static_cast<double>(p.step);
    my += p.*field;
  }
  mx /= static_cast<double>(c.size());
  my /= static_cast<double>(c.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& p : c) {
    sxy += (static_cast<double>(p.step) - mx) * (p.*field - my);
    sxx += (static_cast<double>(p.step) - mx) * (static_cast<double>(p.step) - mx);
  }
  return sxy / sxx;
}

void print_curves(const LadderRuns& r) {
  for (const Variant& var : kLadder) {
    std::string line = fmt("%-26s", var.name.c_str());
    for (const auto& p : r.curves.at(key(var.name)))
      line += fmt(" %zu:%.3f/%.3f", p.step, p.text_align, p.subject_sim);
    note(line);
  }
}

Verdict trends(const LadderRuns& r, const BaseModel& bm) {
  Verdict v;
  const auto& base_curve = r.curves.at(key("baseline"));
  const CurvePoint& first = base_curve.front();
  const CurvePoint& last = base_curve.back();
  const double ta_slope = slope(base_curve, &CurvePoint::text_align);
  const double sim_slope = slope(base_curve, &CurvePoint::subject_sim);
  v.require(last.text_align < first.text_align && ta_slope < 0.0,
            fmt("baseline TA %.3f -> %.3f, slope %.2e", first.text_align, last.text_align, ta_slope));
  v.require(last.subject_sim > first.subject_sim && sim_slope > 0.0,
            fmt("baseline SIM %.3f -> %.3f, slope %.2e", first.subject_sim, last.subject_sim, sim_slope));
  const CurvePoint& palp = at(r, "palp+rescale", 500);
  v.require(palp.text_align > last.text_align, fmt("TA@500 PALP %.3f > baseline %.3f", palp.text_align, last.text_align));
  const double rel = std::abs(palp.subject_sim - last.subject_sim) / last.subject_sim;
  v.require(rel <= 0.10, fmt("SIM@500 PALP %.3f vs baseline %.3f (rel %.3f <= 0.10)", palp.subject_sim,
                             last.subject_sim, rel));
  if (bm.pretrain_seconds >= 0.0)
    v.require(bm.pretrain_seconds <= 1200.0, fmt("pretrain %.0fs <= 1200s", bm.pretrain_seconds));
  v.require(r.max_run_seconds <= 120.0, fmt("slowest run %.0fs <= 120s", r.max_run_seconds));
  return v;
}

Verdict ordering(const LadderRuns& r) {
  Verdict v;
  const double pr = at(r, "palp+rescale", 500).text_align;
  const double p = at(r, "palp", 500).text_align;
  const double sds = at(r, "sds", 500).text_align;
  const double b = at(r, "baseline", 500).text_align;
  v.require(pr >= p, fmt("TA PALP+rescale %.3f >= PALP %.3f", pr, p));
  v.require(p >= sds, fmt("TA PALP %.3f >= SDS %.3f", p, sds));
  v.require(sds >= b, fmt("TA SDS %.3f >= baseline %.3f", sds, b));
  const double sim_sds = at(r, "sds", 500).subject_sim;
  // the full method stands for PALP in the fidelity comparison
  const double sim_palp = at(r, "palp+rescale", 500).subject_sim;
  v.require(sim_sds < sim_palp, fmt("SIM SDS %.3f < PALP %.3f", sim_sds, sim_palp));
  for (const auto& [name, n] : r.diverged) v.require(false, fmt("%s diverged in %zu runs", name.c_str(), n));
  return v;
}

Verdict noise_sharing(const LadderRuns& r) {
  Verdict v;
  const double on = at(r, "palp+rescale", 500).text_align;
  const double off = at(r, "palp+rescale, fresh noise", 500).text_align;
  v.require(on >= off, fmt("TA@500 shared %.3f >= fresh %.3f", on, off));
  return v;
}

Verdict probe(const Checkpoint& base, const LadderRuns& r, const SubjectSet& sub) {
  Verdict v;
  const ProbeStats sketch = probe_stats(base.model, base.schedule, make_prompt({"sketch", "square"}), sub.images);
  const ProbeStats photo = probe_stats(base.model, base.schedule, make_prompt({"photo", "square"}), sub.images);
  v.require(sketch.whiteness > photo.whiteness,
            fmt("base whiteness sketch %.3f > photo %.3f", sketch.whiteness, photo.whiteness));
  const ProbeStats& over = r.probes.at("baseline").at(500);
  v.require(over.nearest_mse < sketch.nearest_mse,
            fmt("nearest-MSE overfit baseline %.4f < base %.4f", over.nearest_mse, sketch.nearest_mse));
  for (std::size_t step : kProbeSteps) {
    const double p = r.probes.at("palp+rescale").at(step).whiteness;
    const double b = r.probes.at("baseline").at(step).whiteness;
    v.require(p >= b, fmt("whiteness@%zu PALP %.3f >= baseline %.3f", step, p, b));
  }
  return v;
}

// ---------------------------------------------------------------- 9

Verdict multi_subject(const Checkpoint& base) {
  Verdict v;
  std::vector<SubjectSet> subs{make_subject_set(evalkit::default_subject(), 4, 11, "[V1]"),
                               make_subject_set(evalkit::second_subject(), 4, 12, "[V2]")};
  const Prompt target = make_prompt({"sketch", "[V1]", "[V2]"});
  // floor: the best score a photo of the other subject reaches against each reference set
  double floor[2] = {0.0, 0.0};
  Rng rng(31);
  for (int k = 0; k < 2; ++k) {
    const auto refs = evalkit::make_subject_refs(subs[k].images);
    const auto& other = k == 0 ? evalkit::second_subject() : evalkit::default_subject();
    for (int i = 0; i < 16; ++i)
      floor[k] = std::max(floor[k], evalkit::subject_sim(evalkit::render_subject(other, rng).data(), refs));
  }
  double sim[2][2] = {{0, 0}, {0, 0}}, style[2] = {0, 0};
  for (int arm = 0; arm < 2; ++arm) {
    for (std::uint64_t seed : kSeeds) {
      TrainConfig c = toy_train();
      c.guidance.mode = GuidanceMode::kPalp;
      c.guidance.alpha = 7.5;
      c.guidance.beta = 1.0;
      c.early_stop_grid = {500};
      c.seed = seed;
      if (arm == 1) c.lambda_palp = 0.0;
      const RunResult res = multi_subject_personalize(base, subs, target, c);
      const MetricRow& row = res.metrics.back();
      for (int k = 0; k < 2; ++k) sim[arm][k] += row.subject_sims[static_cast<std::size_t>(k)] / std::size(kSeeds);
      for (const auto& [tok, val] : row.elements)
        if (tok == "sketch") style[arm] += val / std::size(kSeeds);
    }
  }
  v.require(sim[0][0] > floor[0], fmt("SIM [V1] %.3f > floor %.3f", sim[0][0], floor[0]));
  v.require(sim[0][1] > floor[1], fmt("SIM [V2] %.3f > floor %.3f", sim[0][1], floor[1]));
  v.require(style[0] > style[1], fmt("joint style PALP %.3f > lambda=0 %.3f", style[0], style[1]));
  return v;
}

// ---------------------------------------------------------------- 10

std::map<std::string, std::string> artifacts(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (ext != ".bin" && ext != ".csv") continue;
    out[fs::relative(e.path(), root).string()] = read_file_bytes(e.path());
  }
  return out;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "palp_lab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) note("cli failed: " + err.str());
  return code;
}

Verdict reproducibility(const Checkpoint& base, const SubjectSet& sub, const Prompt& target,
                        const LadderRuns& r, const fs::path& scratch) {
  Verdict v;
  std::map<std::string, std::string> trees[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path root = scratch / ("rerun" + std::to_string(k));
    fs::remove_all(root);
    const std::string out = root.string(), ck = (root / "base/checkpoint.bin").string();
    const std::vector<std::string> quick{"--steps", "6", "--early-stop-grid", "3,6", "--eval-samples", "3",
                                         "--batch", "4", "--lora-rank", "2", "--subject-images", "2"};
    auto with = [&](std::vector<std::string> a) {
      a.insert(a.end(), quick.begin(), quick.end());
      return a;
    };
    int code = run_cli({"pretrain", "--out", out, "--steps", "60", "--width", "24", "--depth", "1", "--timesteps",
                        "20", "--n-per-cell", "2", "--val-per-cell", "1", "--val-every", "30"});
    code |= run_cli(with({"personalize", "--out", out, "--base", ck, "--mode", "palp", "--seed", "4"}));
    code |= run_cli(with({"personalize", "--out", out, "--base", ck, "--mode", "sds", "--seed", "4"}));
    code |= run_cli(with({"multi", "--out", out, "--base", ck, "--seed", "4"}));
    code |= run_cli(with({"ablate", "--out", out, "--base", ck}));
    code |= run_cli({"probe", "--out", out, "--base", ck, "--t-grid", "5,19", "--draws", "2"});
    v.require(code == 0, fmt("cli commands exit %d", code));
    trees[k] = artifacts(root);
  }
  std::size_t differing = 0;
  for (const auto& [path, bytes] : trees[0]) {
    auto it = trees[1].find(path);
    differing += it == trees[1].end() || it->second != bytes;
  }
  v.require(!trees[0].empty() && trees[0].size() == trees[1].size() && differing == 0,
            fmt("cli rerun: %zu checkpoints/CSVs, %zu differ", trees[0].size(), differing));

  TrainConfig cfg = toy_train();
  cfg.guidance.mode = GuidanceMode::kPalp;
  cfg.seed = kSeeds[0];
  cfg.run_id = AblationCell{GuidanceMode::kPalp, true, true, kSeeds[0]}.run_id();
  const RunResult again = personalize(base, std::span<const SubjectSet>(&sub, 1), target, cfg);
  bool rows_same = again.metrics.size() == r.first_palp_rows.size();
  for (std::size_t i = 0; rows_same && i < again.metrics.size(); ++i) {
    const MetricRow &a = again.metrics[i], &b = r.first_palp_rows[i];
    rows_same = a.text_align == b.text_align && a.subject_sim == b.subject_sim && a.loss == b.loss;
  }
  v.require(serialize(again.checkpoint) == r.first_palp_bytes && rows_same,
            "500-step PALP rerun identical checkpoint and metrics");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path cache = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_cache");
  fs::create_directories(cache);
  const auto t0 = Clock::now();
  try {
    report(1, "gradient oracle", gradient_oracle());
    const BaseModel bm = load_or_pretrain(cache);
    const Checkpoint& base = bm.ck;
    const SubjectSet sub = make_subject_set(evalkit::default_subject(), 4, 11);
    const Prompt target = make_prompt({"sketch", "[V]"});
    report(2, "algebraic identities", identities(base));
    report(3, "zero-residual identity", zero_residual(base, sub));
    report(4, "oracle calibration", calibration());

    note("personalization ladder, seeds 0-2 (TA/SIM per step):");
    const LadderRuns ladder = run_ladder(base, sub, target);
    print_curves(ladder);
    report(5, "trend reproduction", trends(ladder, bm));
    report(6, "ablation ordering", ordering(ladder));
    report(7, "noise sharing", noise_sharing(ladder));
    report(8, "x0 probe", probe(base, ladder, sub));
    report(9, "multi-subject", multi_subject(base));
    report(10, "reproducibility", reproducibility(base, sub, target, ladder, cache / "scratch"));
  } catch (const std::exception& e) {
    std::printf("FAIL    acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d/10 criteria passed in %.0fs\n", g_passed, since(t0));
  return g_passed == 10 ? 0 : 1;
}
