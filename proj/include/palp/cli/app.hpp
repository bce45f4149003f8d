#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "palp/cli/config.hpp"
#include "palp/evalkit/probe.hpp"
#include "palp/evalkit/report.hpp"
#include "palp/trainer/ablation.hpp"
#include "palp/trainer/pretrain.hpp"

namespace palp::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

inline std::vector<KeySpec> config_keys() {
  return {
      {"out", "runs", "output root; PALP_LAB_OUT overrides the file value"},
      {"run_id", "", "run directory name (derived from mode and seed when empty)"},
      {"seed", "0", "run seed"},
      {"threads", "0", "worker threads for ablate (0: all cores)"},
      {"base", "", "base checkpoint (default <out>/base/checkpoint.bin)"},
      {"mode", "palp", "baseline | sds | palp"},
      {"subject", "subject", "subject | subject2"},
      {"subject2", "subject2", "second subject for multi"},
      {"subject_images", "4", "reference photos per subject"},
      {"subject_seed", "11", "seed for rendering the reference photos"},
      {"target_prompt", "(sketch, [V])", "target prompt"},
      {"alpha", "15", "clean branch guidance scale"},
      {"beta", "7.5", "personalized branch guidance scale"},
      {"share_noise", "1", "re-noise with the branch noise"},
      {"rescale", "1", "cancel the x0 chain-rule factor"},
      {"lambda", "1", "weight of the guidance term"},
      {"steps", "500", "personalization steps"},
      {"lr", "5e-5", "personalization learning rate"},
      {"embedding_lr_scale", "1", "step multiplier for the placeholder rows"},
      {"batch", "32", "personalization batch"},
      {"lora_rank", "4", "adapter rank"},
      {"lora_scale", "1", "adapter output scale"},
      {"early_stop_grid", "50,100,200,300,400,500", "evaluation steps"},
      {"eval_samples", "32", "samples per evaluation"},
      {"eval_guidance", "3", "sampler guidance scale"},
      {"pretrain.steps", "20000", ""},
      {"pretrain.lr", "1e-3", ""},
      {"pretrain.lr_final_frac", "0.1", ""},
      {"pretrain.batch", "32", ""},
      {"pretrain.timesteps", "200", ""},
      {"pretrain.width", "256", "hidden width"},
      {"pretrain.depth", "2", "hidden layers"},
      {"pretrain.linear_prior", "1", "add the fixed Gaussian-fit eps estimate to the MLP"},
      {"pretrain.time_width", "32", ""},
      {"pretrain.cond_dim", "32", ""},
      {"pretrain.n_per_cell", "40", ""},
      {"pretrain.val_per_cell", "4", ""},
      {"pretrain.val_every", "1000", ""},
      {"ablate.modes", "baseline,sds,palp", ""},
      {"ablate.share_noise", "1,0", ""},
      {"ablate.rescale", "1,0", ""},
      {"ablate.seeds", "0,1,2", ""},
      {"probe.checkpoint", "", "checkpoint to probe (default: base)"},
      {"probe.prompt", "(sketch, square)", ""},
      {"probe.t_grid", "20,60,100,140,180,199", ""},
      {"probe.draws", "8", ""},
      {"probe.guidance", "1", ""},
      {"report.inputs", "", "run directories or metrics.csv files"},
  };
}

/// Composition runs use the milder guidance pair, and the joint target.
inline std::map<std::string, std::string> command_defaults(const std::string& command) {
  if (command == "multi") return {{"alpha", "7.5"}, {"beta", "1"}, {"target_prompt", "(sketch, [V1], [V2])"}};
  return {};
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline evalkit::SubjectSpec subject_by_name(const std::string& name) {
  if (name == "subject" || name == "default") return evalkit::default_subject();
  if (name == "subject2" || name == "second") return evalkit::second_subject();
  throw ConfigError("unknown subject '" + name + "' (subject | subject2)");
}

/// Everything one command needs: resolved config, output paths, log stream.
struct Context {
  std::string command;
  Config cfg;
  fs::path root;
  std::ostream& log;
  std::string started = utc_now();

  fs::path run_dir(const std::string& fallback_id) const {
    const std::string id = cfg.str("run_id").empty() ? fallback_id : cfg.str("run_id");
    if (id.find('/') != std::string::npos || id == "." || id == "..") throw ConfigError("bad run_id '" + id + "'");
    return root / id;
  }

  fs::path base_path() const {
    return cfg.str("base").empty() ? root / "base" / "checkpoint.bin" : fs::path(cfg.str("base"));
  }
};

inline void write_manifest(const Context& ctx, const fs::path& dir, const std::string& run_id,
                           const ordered_json& checkpoints, const std::vector<std::string>& artifacts,
                           const ordered_json& extra = ordered_json::object()) {
  ordered_json m;
  m["command"] = ctx.command;
  m["run_id"] = run_id;
  m["seed"] = ctx.cfg.uint("seed");
  m["config_hash"] = fnv1a_hex(ctx.cfg.canonical({"out"}));  // independent of where outputs land
  ordered_json c = ordered_json::object();
  for (const auto& [k, v] : ctx.cfg.values()) c[k] = v;
  m["config"] = c;
  m["checkpoints"] = checkpoints;
  m["output_dir"] = dir.string();
  m["artifacts"] = artifacts;
  for (const auto& [k, v] : extra.items()) m[k] = v;
  m["started"] = ctx.started;
  m["finished"] = utc_now();
  evalkit::write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.lr = c.num("lr");
  t.embedding_lr_scale = c.num("embedding_lr_scale");
  t.steps = c.uint("steps");
  t.batch = c.uint("batch");
  t.seed = c.uint("seed");
  try {
    t.guidance.mode = parse_mode(c.str("mode"));
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  t.guidance.alpha = c.num("alpha");
  t.guidance.beta = c.num("beta");
  t.guidance.share_noise = c.flag("share_noise");
  t.guidance.rescale = c.flag("rescale");
  t.lambda_palp = c.num("lambda");
  t.early_stop_grid.clear();
  for (auto s : c.uint_list("early_stop_grid")) t.early_stop_grid.push_back(s);
  t.lora_rank = c.uint("lora_rank");
  t.lora_scale = c.num("lora_scale");
  t.eval_samples = c.uint("eval_samples");
  t.eval_guidance = c.num("eval_guidance");
  if (t.lora_rank < 1) throw ConfigError("lora_rank must be at least 1");
  if (t.eval_samples < 1) throw ConfigError("eval_samples must be at least 1");
  try {
    t.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return t;
}

inline Prompt target_prompt(const Config& c) {
  const Prompt p = parse_prompt(c.str("target_prompt"));
  if (p.tokens.empty()) throw ConfigError("target_prompt is empty");
  return p;
}

inline std::string elements_csv(const std::vector<MetricRow>& rows) {
  std::string out = "run_id,step,element,score\n";
  for (const auto& r : rows)
    for (const auto& [k, v] : r.elements)
      out += r.run_id + "," + std::to_string(r.step) + "," + k + "," + evalkit::format_double(v) + "\n";
  return out;
}

/// Attaches per-element scores from an elements.csv next to a metrics.csv.
inline void attach_elements(std::vector<MetricRow>& rows, const fs::path& path) {
  std::ifstream f(path);
  if (!f) return;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    const auto cells = evalkit::split_csv_line(line);
    if (cells.size() != 4) throw Error(path.string() + ": malformed row");
    for (auto& r : rows)
      if (r.run_id == cells[0] && std::to_string(r.step) == cells[1])
        r.elements.emplace_back(cells[2], std::stod(cells[3]));
  }
}

/// Writes metrics, per-element scores and one 8-sample grid per evaluated step.
inline std::vector<std::string> write_run_outputs(const fs::path& dir, const RunResult& r) {
  std::vector<std::string> artifacts{"checkpoint.bin", "metrics.csv", "elements.csv"};
  save_checkpoint(r.checkpoint, dir / "checkpoint.bin");
  evalkit::write_text_file(dir / "metrics.csv", evalkit::metrics_csv(r.metrics));
  evalkit::write_text_file(dir / "elements.csv", elements_csv(r.metrics));
  for (const auto& [step, imgs] : r.samples) {
    const std::size_t n = std::min<std::size_t>(8, imgs.shape()[0]);
    Tensor first(Shape{n, imgs.shape()[1]});
    std::copy_n(imgs.data().begin(), first.size(), first.data().begin());
    const std::string name = "grids/step_" + std::to_string(step) + ".pgm";
    evalkit::write_pgm(dir / name, evalkit::make_grid(first, 8));
    artifacts.push_back(name);
  }
  return artifacts;
}

inline std::function<void(const PersonalizeState&, const StepStats&)> progress_logger(std::ostream& log,
                                                                                     std::size_t steps) {
  return [&log, steps](const PersonalizeState& st, const StepStats& s) {
    if (st.step % 50 == 0 || st.step == steps)
      log << "step " << st.step << "/" << steps << " loss " << s.loss << "\n";
  };
}

// ---- commands -------------------------------------------------------------------

inline int cmd_pretrain(Context& ctx) {
  const Config& c = ctx.cfg;
  PretrainConfig p;
  p.steps = c.uint("pretrain.steps");
  p.lr = c.num("pretrain.lr");
  p.lr_final_frac = c.num("pretrain.lr_final_frac");
  p.batch = c.uint("pretrain.batch");
  p.timesteps = c.uint("pretrain.timesteps");
  p.arch.hidden.assign(c.uint("pretrain.depth"), c.uint("pretrain.width"));
  p.arch.time_width = c.uint("pretrain.time_width");
  p.arch.cond_dim = c.uint("pretrain.cond_dim");
  p.arch.linear_prior = c.flag("pretrain.linear_prior");
  p.n_per_cell = c.uint("pretrain.n_per_cell");
  p.val_per_cell = c.uint("pretrain.val_per_cell");
  p.val_every = std::max<std::uint64_t>(1, c.uint("pretrain.val_every"));
  p.seed = c.uint("seed");
  if (p.arch.hidden.empty() || p.arch.hidden[0] < 1) throw ConfigError("pretrain.width and depth must be positive");
  if (p.timesteps < 2) throw ConfigError("pretrain.timesteps must be at least 2");
  try {
    p.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const fs::path dir = ctx.run_dir("base");
  const PretrainResult r = pretrain(p, evalkit::AttributeSpec{}, [&](std::size_t step, double v) {
    ctx.log << "step " << step << " val " << v << "\n";
  });
  save_checkpoint(r.checkpoint, dir / "checkpoint.bin");
  std::string curve = "step,val_loss\n";
  for (const auto& [s, v] : r.val_curve) curve += std::to_string(s) + "," + evalkit::format_double(v) + "\n";
  evalkit::write_text_file(dir / "val_curve.csv", curve);
  // one sample of every (style, class) on a plain background
  const evalkit::AttributeSpec spec;
  Tensor grid(Shape{spec.styles.size() * spec.classes.size(), evalkit::kPixels});
  std::size_t row = 0;
  for (const auto& style : spec.styles)
    for (const auto& cls : spec.classes) {
      const Tensor x = sample(view(r.checkpoint.model), make_prompt({style, cls, "plain"}), 1, evalkit::kPixels,
                              r.checkpoint.schedule, splitmix64(p.seed + row), SampleOptions{3.0, true});
      const Tensor img = evalkit::to_image_space(x.row(0));
      std::copy(img.data().begin(), img.data().end(), grid.row(row++).begin());
    }
  evalkit::write_pgm(dir / "grids" / "samples.pgm", evalkit::make_grid(grid, spec.classes.size()));
  ordered_json ck;
  ck["output"] = (dir / "checkpoint.bin").string();
  ck["output_hash"] = checkpoint_hash(r.checkpoint);
  ordered_json extra;
  extra["initial_val_loss"] = r.initial_val_loss;
  extra["final_val_loss"] = r.final_val_loss;
  write_manifest(ctx, dir, dir.filename().string(), ck, {"checkpoint.bin", "val_curve.csv", "grids/samples.pgm"},
                 extra);
  ctx.log << "wrote " << dir.string() << " (val " << r.initial_val_loss << " -> " << r.final_val_loss << ")\n";
  return kOk;
}

inline int cmd_personalize(Context& ctx, bool multi) {
  const Config& c = ctx.cfg;
  TrainConfig t = train_config(c);
  const Prompt target = target_prompt(c);
  const std::size_t n_img = c.uint("subject_images");
  if (n_img < 1 || n_img > 8) throw ConfigError("subject_images must be in 1..8");
  std::vector<SubjectSet> subjects;
  if (multi) {
    subjects.push_back(make_subject_set(subject_by_name(c.str("subject")), n_img, c.uint("subject_seed"), "[V1]"));
    subjects.push_back(make_subject_set(subject_by_name(c.str("subject2")), n_img, c.uint("subject_seed") + 1, "[V2]"));
  } else {
    subjects.push_back(make_subject_set(subject_by_name(c.str("subject")), n_img, c.uint("subject_seed")));
  }
  for (const auto& s : subjects)
    if (std::find(target.tokens.begin(), target.tokens.end(), s.placeholder) == target.tokens.end())
      throw ConfigError("target_prompt must contain " + s.placeholder);
  const std::string fallback = (multi ? "multi-" : "") + run_mode_name(t) + "-s" + std::to_string(t.seed);
  const fs::path dir = ctx.run_dir(fallback);
  t.run_id = dir.filename().string();
  const fs::path base_path = ctx.base_path();
  const Checkpoint base = load_checkpoint(base_path);
  const RunResult r = multi ? multi_subject_personalize(base, subjects, target, t, progress_logger(ctx.log, t.steps))
                            : personalize(base, subjects, target, t, progress_logger(ctx.log, t.steps));
  const auto artifacts = write_run_outputs(dir, r);
  ordered_json ck;
  ck["input"] = base_path.string();
  ck["input_hash"] = checkpoint_hash(base);
  ck["output"] = (dir / "checkpoint.bin").string();
  ck["output_hash"] = checkpoint_hash(r.checkpoint);
  write_manifest(ctx, dir, t.run_id, ck, artifacts);
  if (!r.metrics.empty()) {
    const auto& m = r.metrics.back();
    ctx.log << t.run_id << " step " << m.step << " text_align " << m.text_align << " subject_sim " << m.subject_sim
            << "\n";
  }
  return kOk;
}

inline int cmd_ablate(Context& ctx) {
  const Config& c = ctx.cfg;
  AblationGrid g;
  g.train = train_config(c);
  g.modes.clear();
  for (const auto& m : c.list("ablate.modes")) {
    try {
      g.modes.push_back(parse_mode(m));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  g.share_noise = c.bool_list("ablate.share_noise");
  g.rescale = c.bool_list("ablate.rescale");
  g.seeds = c.uint_list("ablate.seeds");
  g.threads = c.uint("threads");
  if (g.modes.empty() || g.share_noise.empty() || g.rescale.empty() || g.seeds.empty())
    throw ConfigError("ablation grid has an empty axis");
  const Prompt target = target_prompt(c);
  const std::vector<SubjectSet> subjects{
      make_subject_set(subject_by_name(c.str("subject")), c.uint("subject_images"), c.uint("subject_seed"))};
  const fs::path dir = ctx.run_dir("ablate");
  const fs::path base_path = ctx.base_path();
  const Checkpoint base = load_checkpoint(base_path);
  ctx.log << "ablation: " << g.cells().size() << " runs\n";
  const AblationResult r = ablation_run(base, subjects, target, g);
  const auto rows = r.rows();
  evalkit::write_text_file(dir / "metrics.csv", evalkit::metrics_csv(rows));
  evalkit::write_text_file(dir / "elements.csv", elements_csv(rows));
  std::string curves = "variant,step,text_align,subject_sim,seeds\n";
  for (const auto& [variant, pts] : seed_averaged_curves(r))
    for (const auto& p : pts)
      curves += variant + "," + std::to_string(p.step) + "," + evalkit::format_double(p.text_align) + "," +
                evalkit::format_double(p.subject_sim) + "," + std::to_string(p.seeds) + "\n";
  evalkit::write_text_file(dir / "curves.csv", curves);
  evalkit::write_text_file(dir / "summary.txt", evalkit::summary_table(rows));
  ordered_json ck;
  ck["input"] = base_path.string();
  ck["input_hash"] = checkpoint_hash(base);
  write_manifest(ctx, dir, dir.filename().string(), ck, {"metrics.csv", "elements.csv", "curves.csv", "summary.txt"});
  ctx.log << evalkit::summary_table(rows);
  return kOk;
}

inline int cmd_probe(Context& ctx) {
  const Config& c = ctx.cfg;
  const fs::path ck_path = c.str("probe.checkpoint").empty() ? ctx.base_path() : fs::path(c.str("probe.checkpoint"));
  std::vector<std::size_t> grid;
  for (auto t : c.uint_list("probe.t_grid")) grid.push_back(t);
  if (grid.empty()) throw ConfigError("probe.t_grid is empty");
  const std::size_t draws = c.uint("probe.draws");
  if (draws < 1) throw ConfigError("probe.draws must be at least 1");
  const Prompt prompt = parse_prompt(c.str("probe.prompt"));
  const Checkpoint ck = load_checkpoint(ck_path);
  for (auto t : grid)
    if (t >= ck.schedule.steps()) throw ConfigError("probe.t_grid entry " + std::to_string(t) + " out of range");
  const auto r = evalkit::x0hat_probe(ck.model, ck.schedule, prompt, grid, c.uint("seed"), c.num("probe.guidance"), draws);
  const fs::path dir = ctx.run_dir("probe");
  // rows: draws, columns: timesteps
  Tensor cells(Shape{draws * grid.size(), evalkit::kPixels});
  for (std::size_t d = 0; d < draws; ++d)
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const auto src = r.estimates[k].row(d);
      std::copy(src.begin(), src.end(), cells.row(d * grid.size() + k).begin());
    }
  evalkit::write_pgm(dir / "grids" / "probe.pgm", evalkit::make_grid(cells, grid.size()));
  ordered_json res;
  res["prompt"] = prompt.str();
  res["t_grid"] = grid;
  res["background_whiteness"] = r.background_whiteness;
  evalkit::write_text_file(dir / "probe.json", res.dump(2) + "\n");
  ordered_json cks;
  cks["input"] = ck_path.string();
  cks["input_hash"] = checkpoint_hash(ck);
  write_manifest(ctx, dir, dir.filename().string(), cks, {"probe.json", "grids/probe.pgm"});
  for (std::size_t k = 0; k < grid.size(); ++k)
    ctx.log << "t " << grid[k] << " background whiteness " << r.background_whiteness[k] << "\n";
  return kOk;
}

inline int cmd_report(Context& ctx) {
  const auto inputs = ctx.cfg.list("report.inputs");
  if (inputs.empty()) throw ConfigError("report needs --inputs");
  std::vector<std::vector<MetricRow>> runs;
  for (const auto& in : inputs) {
    const fs::path p(in);
    const fs::path csv = fs::is_directory(p) ? p / "metrics.csv" : p;
    if (!fs::exists(csv)) throw ConfigError("no metrics at " + csv.string());
    auto rows = evalkit::read_metrics_csv(csv);
    attach_elements(rows, csv.parent_path() / "elements.csv");
    runs.push_back(std::move(rows));
  }
  const auto rows = evalkit::merge_metrics(runs);
  const fs::path dir = ctx.run_dir("report");
  evalkit::write_text_file(dir / "metrics.csv", evalkit::metrics_csv(rows));
  evalkit::write_text_file(dir / "summary.txt", evalkit::summary_table(rows));
  evalkit::write_text_file(dir / "summary.json", evalkit::summary_json(rows).dump(2) + "\n");
  write_manifest(ctx, dir, dir.filename().string(), ordered_json::object(), {"metrics.csv", "summary.txt", "summary.json"});
  ctx.log << evalkit::summary_table(rows);
  return kOk;
}

// ---- entry point ------------------------------------------------------------------

struct FlagSpec {
  std::string flag;  // without leading dashes
  std::string key;
};

inline std::vector<FlagSpec> command_flags(const std::string& command) {
  std::vector<FlagSpec> f{{"run-id", "run_id"}, {"seed", "seed"}, {"base", "base"}};
  const std::vector<FlagSpec> train{{"mode", "mode"},
                                    {"subject", "subject"},
                                    {"subject-images", "subject_images"},
                                    {"subject-seed", "subject_seed"},
                                    {"target-prompt", "target_prompt"},
                                    {"alpha", "alpha"},
                                    {"beta", "beta"},
                                    {"share-noise", "share_noise"},
                                    {"rescale", "rescale"},
                                    {"lambda", "lambda"},
                                    {"steps", "steps"},
                                    {"lr", "lr"},
                                    {"embedding-lr-scale", "embedding_lr_scale"},
                                    {"batch", "batch"},
                                    {"lora-rank", "lora_rank"},
                                    {"lora-scale", "lora_scale"},
                                    {"early-stop-grid", "early_stop_grid"},
                                    {"eval-samples", "eval_samples"},
                                    {"eval-guidance", "eval_guidance"}};
  if (command == "pretrain") {
    for (const char* k : {"steps", "lr", "lr_final_frac", "batch", "timesteps", "width", "depth", "time_width",
                          "cond_dim", "linear_prior", "n_per_cell", "val_per_cell", "val_every"}) {
      std::string flag = k;
      std::replace(flag.begin(), flag.end(), '_', '-');
      f.push_back({flag, std::string("pretrain.") + k});
    }
  } else if (command == "personalize" || command == "multi" || command == "ablate") {
    f.insert(f.end(), train.begin(), train.end());
    if (command == "multi") f.push_back({"subject2", "subject2"});
    if (command == "ablate") {
      f.push_back({"modes", "ablate.modes"});
      f.push_back({"share-noise-grid", "ablate.share_noise"});
      f.push_back({"rescale-grid", "ablate.rescale"});
      f.push_back({"seeds", "ablate.seeds"});
      f.push_back({"threads", "threads"});
    }
  } else if (command == "probe") {
    f.push_back({"checkpoint", "probe.checkpoint"});
    f.push_back({"prompt", "probe.prompt"});
    f.push_back({"t-grid", "probe.t_grid"});
    f.push_back({"draws", "probe.draws"});
    f.push_back({"guidance", "probe.guidance"});
  } else if (command == "report") {
    f.push_back({"inputs", "report.inputs"});
  }
  return f;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"pretrain", "personalize", "multi", "ablate", "probe", "report"};
  return names;
}

inline std::string usage() {
  return "usage: palp_lab <command> [--config FILE] [--out DIR] [flags]\n"
         "commands:\n"
         "  pretrain     train the base denoiser on the attribute grid\n"
         "  personalize  learn one subject (--mode baseline|sds|palp)\n"
         "  multi        learn two subjects jointly\n"
         "  ablate       run the mode x noise-sharing x rescale x seed grid (--grid FILE)\n"
         "  probe        one-step x0 estimates from pure noise\n"
         "  report       merge metrics and write the summary table\n"
         "run 'palp_lab <command> --help' for flags\n";
}

/// Parses argv, resolves the configuration (flag > config file > default) and
/// runs the command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  if (argc < 2) {
    err << usage();
    return kConfigError;
  }
  const std::string command = argv[1];
  if (command == "--help" || command == "-h" || command == "help") {
    out << usage();
    return kOk;
  }
  if (std::find(command_names().begin(), command_names().end(), command) == command_names().end()) {
    err << "unknown command '" << command << "'\n" << usage();
    return kConfigError;
  }
  try {
    CLI::App app("palp_lab " + command);
    std::string config_file, grid_file, out_dir;
    app.add_option("--config", config_file, "flat key = value config file");
    app.add_option("--out", out_dir, "output root");
    if (command == "ablate") app.add_option("--grid", grid_file, "ablation grid file (same format as --config)");
    const auto flags = command_flags(command);
    std::vector<std::string> values(flags.size());
    std::vector<CLI::Option*> opts;
    for (std::size_t i = 0; i < flags.size(); ++i) opts.push_back(app.add_option("--" + flags[i].flag, values[i]));
    std::vector<std::string> args;
    for (int i = argc - 1; i >= 2; --i) args.emplace_back(argv[i]);
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n" << usage();
      return kConfigError;
    }

    Config cfg(config_keys());
    for (const auto& [k, v] : command_defaults(command)) cfg.set(k, v, "default:" + command);
    if (!config_file.empty()) cfg.merge_file(config_file);
    if (!grid_file.empty()) cfg.merge_file(grid_file);
    if (const char* env = std::getenv("PALP_LAB_OUT"); env && *env) cfg.set("out", env, "env");
    if (!out_dir.empty()) cfg.set("out", out_dir, "flag");
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (opts[i]->count()) cfg.set(flags[i].key, values[i], "flag");

    Context ctx{command, std::move(cfg), {}, err};
    ctx.root = ctx.cfg.str("out");
    if (command == "pretrain") return cmd_pretrain(ctx);
    if (command == "personalize") return cmd_personalize(ctx, false);
    if (command == "multi") return cmd_personalize(ctx, true);
    if (command == "ablate") return cmd_ablate(ctx);
    if (command == "probe") return cmd_probe(ctx);
    return cmd_report(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace palp::cli
