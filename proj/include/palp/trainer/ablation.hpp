#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "palp/trainer/personalize.hpp"

namespace palp {

/// One run of the ablation ladder.
struct AblationCell {
  GuidanceMode mode = GuidanceMode::kNone;
  bool share_noise = true;
  bool rescale = true;
  std::uint64_t seed = 0;

  /// Seed-free name shared by every seed of a variant, e.g. "palp+share+rescale".
  std::string variant() const {
    if (mode == GuidanceMode::kNone) return "baseline";
    std::string v = mode_name(mode);
    v += share_noise ? "+share" : "+fresh";
    v += rescale ? "+rescale" : "+norescale";
    return v;
  }
  std::string run_id() const { return variant() + "-s" + std::to_string(seed); }
};

struct AblationGrid {
  std::vector<GuidanceMode> modes{GuidanceMode::kNone, GuidanceMode::kSds, GuidanceMode::kPalp};
  std::vector<bool> share_noise{true, false};
  std::vector<bool> rescale{true, false};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig train;        // guidance mode, share, rescale and seed are overridden per cell
  std::size_t threads = 0;  // 0: hardware concurrency

  /// Baseline has no guidance knobs, so it gets one cell per seed.
  std::vector<AblationCell> cells() const {
    std::vector<AblationCell> out;
    for (GuidanceMode m : modes) {
      for (std::uint64_t seed : seeds) {
        if (m == GuidanceMode::kNone) {
          out.push_back({m, true, true, seed});
          continue;
        }
        for (bool share : share_noise)
          for (bool rs : rescale) out.push_back({m, share, rs, seed});
      }
    }
    return out;
  }
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::vector<std::vector<MetricRow>> runs;  // parallel to cells

  std::vector<MetricRow> rows() const {
    std::vector<MetricRow> out;
    for (const auto& r : runs) out.insert(out.end(), r.begin(), r.end());
    return out;
  }
};

/// Runs every cell; independent runs go to worker threads. Output order is
/// the cell order regardless of scheduling.
inline AblationResult ablation_run(const Checkpoint& base, std::span<const SubjectSet> subjects,
                                   const Prompt& target, const AblationGrid& grid) {
  AblationResult out;
  out.cells = grid.cells();
  out.runs.resize(out.cells.size());
  std::vector<TrainConfig> cfgs;
  for (const auto& c : out.cells) {
    TrainConfig cfg = grid.train;
    cfg.guidance.mode = c.mode;
    cfg.guidance.share_noise = c.share_noise;
    cfg.guidance.rescale = c.rescale;
    cfg.seed = c.seed;
    cfg.run_id = c.run_id();
    cfg.validate();
    cfgs.push_back(std::move(cfg));
  }
  std::size_t threads = grid.threads ? grid.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, cfgs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cfgs.size();) {
      try {
        out.runs[i] = personalize(base, subjects, target, cfgs[i]).metrics;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

/// Seed average of one variant's curve: step -> (text_align, subject_sim).
struct CurvePoint {
  std::size_t step = 0;
  double text_align = 0.0;
  double subject_sim = 0.0;
  std::map<std::string, double> elements;
  std::size_t seeds = 0;
};

inline std::map<std::string, std::vector<CurvePoint>> seed_averaged_curves(const AblationResult& r) {
  std::map<std::string, std::map<std::size_t, CurvePoint>> acc;
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    for (const auto& row : r.runs[i]) {
      CurvePoint& p = acc[r.cells[i].variant()][row.step];
      p.step = row.step;
      p.text_align += row.text_align;
      p.subject_sim += row.subject_sim;
      for (const auto& [k, v] : row.elements) p.elements[k] += v;
      ++p.seeds;
    }
  }
  std::map<std::string, std::vector<CurvePoint>> out;
  for (auto& [variant, steps] : acc) {
    for (auto& [step, p] : steps) {
      const double n = static_cast<double>(p.seeds);
      p.text_align /= n;
      p.subject_sim /= n;
      for (auto& [k, v] : p.elements) v /= n;
      out[variant].push_back(p);
    }
  }
  return out;
}

}  // namespace palp
