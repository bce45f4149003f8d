#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "palp/evalkit/render.hpp"
#include "palp/trainer/personalize.hpp"

namespace palp::evalkit {

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"run_id", "mode", "step", "text_align", "subject_sim",
                                             "loss", "seed"};
  return cols;
}

/// Shortest round-trip representation, so reruns produce identical bytes.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("cannot format number");
  return std::string(buf, end);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  const auto& cols = metric_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : rows) {
    os << r.run_id << ',' << r.mode << ',' << r.step << ',' << format_double(r.text_align) << ','
       << format_double(r.subject_sim) << ',' << format_double(r.loss) << ',' << r.seed << '\n';
  }
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

/// Parses a metrics CSV; columns may come in any order but all must exist.
inline std::vector<MetricRow> read_metrics_csv(std::istream& is, const std::string& source = "csv") {
  std::string line;
  if (!std::getline(is, line)) throw Error(source + ": empty file, missing header");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < header.size(); ++i) at[header[i]] = i;
  for (const auto& c : metric_columns())
    if (!at.count(c)) throw Error(source + ": missing column '" + c + "'");
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw Error(source + ":" + std::to_string(lineno) + ": wrong field count");
    try {
      MetricRow r;
      r.run_id = f[at["run_id"]];
      r.mode = f[at["mode"]];
      r.step = std::stoul(f[at["step"]]);
      r.text_align = std::stod(f[at["text_align"]]);
      r.subject_sim = std::stod(f[at["subject_sim"]]);
      r.loss = std::stod(f[at["loss"]]);
      r.seed = std::stoull(f[at["seed"]]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(source + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

inline std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  return read_metrics_csv(f, path.string());
}

/// Concatenates runs in the given order.
inline std::vector<MetricRow> merge_metrics(const std::vector<std::vector<MetricRow>>& runs) {
  std::vector<MetricRow> out;
  for (const auto& r : runs) out.insert(out.end(), r.begin(), r.end());
  return out;
}

// ---- image grids -------------------------------------------------------------

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<double> pixels;  // [0, 1], row-major
};

/// Tiles [n, 256] images into `cols` columns with 1-px separators between
/// cells: width = cols*16 + (cols-1), height = rows*16 + (rows-1).
inline GrayImage make_grid(const Tensor& images, std::size_t cols, double separator = 1.0) {
  if (images.rank() != 2 || images.shape()[1] != kPixels) throw ShapeError("grid expects [n, 256] images");
  if (cols < 1) throw Error("grid needs at least one column");
  const std::size_t n = images.shape()[0];
  const std::size_t rows = std::max<std::size_t>(1, (n + cols - 1) / cols);
  GrayImage g;
  g.width = cols * kSide + (cols - 1);
  g.height = rows * kSide + (rows - 1);
  g.pixels.assign(g.width * g.height, separator);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = i / cols, c = i % cols;
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x)
        g.pixels[(r * (kSide + 1) + y) * g.width + c * (kSide + 1) + x] = images(i, y * kSide + x);
  }
  return g;
}

/// Binary PGM (P5), 8-bit.
inline std::string encode_pgm(const GrayImage& g) {
  std::string out = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
  for (double v : g.pixels) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& g) {
  write_text_file(path, encode_pgm(g));
}

// ---- summaries -----------------------------------------------------------------

/// One row of the results table: per-element alignment at the final step.
/// The background element stands in for the paper-style "ambiance" columns.
struct SummaryRow {
  std::string run_id;
  std::string mode;
  std::size_t step = 0;
  double style = 0.0;
  double cls = 0.0;
  double background = 0.0;  // NaN when the target has no background element
  double target = 0.0;      // aggregate text alignment
  double image_alignment = 0.0;
  bool has_background = false;
};

inline SummaryRow summarize(const MetricRow& m, const AttributeSpec& spec = {}) {
  SummaryRow r;
  r.run_id = m.run_id;
  r.mode = m.mode;
  r.step = m.step;
  r.target = m.text_align;
  r.image_alignment = m.subject_sim;
  auto in = [](const std::vector<std::string>& v, const std::string& t) {
    return std::find(v.begin(), v.end(), t) != v.end();
  };
  std::size_t n_cls = 0;
  for (const auto& [tok, v] : m.elements) {
    if (in(spec.styles, tok)) r.style = v;
    if (in(spec.classes, tok)) {
      r.cls += v;
      ++n_cls;
    }
    if (in(spec.backgrounds, tok)) {
      r.background = v;
      r.has_background = true;
    }
  }
  if (n_cls) r.cls /= static_cast<double>(n_cls);
  return r;
}

/// Last metric row of every run, in first-seen order.
inline std::vector<MetricRow> final_rows(const std::vector<MetricRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, MetricRow> last;
  for (const auto& r : rows) {
    if (!last.count(r.run_id)) order.push_back(r.run_id);
    if (!last.count(r.run_id) || r.step >= last[r.run_id].step) last[r.run_id] = r;
  }
  std::vector<MetricRow> out;
  for (const auto& id : order) out.push_back(last[id]);
  return out;
}

/// Plain-text table with columns Run, Mode, Style, Class, Background, Target,
/// Image-Alignment. Element columns read "-" when the run carries no
/// per-element scores (e.g. rows loaded back from CSV).
inline std::string summary_table(const std::vector<MetricRow>& rows, const AttributeSpec& spec = {}) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "Run" << std::setw(10) << "Mode" << std::right << std::setw(8)
     << "Style" << std::setw(8) << "Class" << std::setw(12) << "Background" << std::setw(8) << "Target"
     << std::setw(17) << "Image-Alignment" << '\n';
  auto cell = [&](bool have, double v, int w) {
    os << std::setw(w);
    if (have) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(3) << v;
      os << c.str();
    } else {
      os << "-";
    }
  };
  for (const auto& m : final_rows(rows)) {
    const SummaryRow s = summarize(m, spec);
    const bool el = !m.elements.empty();
    os << std::left << std::setw(28) << s.run_id << std::setw(10) << s.mode << std::right;
    cell(el, s.style, 8);
    cell(el, s.cls, 8);
    cell(el && s.has_background, s.background, 12);
    cell(true, s.target, 8);
    cell(true, s.image_alignment, 17);
    os << '\n';
  }
  return os.str();
}

/// {run_id: {mode, step, text_align, subject_sim, loss, seed}} at each run's final step.
inline nlohmann::ordered_json summary_json(const std::vector<MetricRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& m : final_rows(rows)) {
    nlohmann::ordered_json r;
    r["mode"] = m.mode;
    r["step"] = m.step;
    r["text_align"] = m.text_align;
    r["subject_sim"] = m.subject_sim;
    r["loss"] = m.loss;
    r["seed"] = m.seed;
    if (!m.elements.empty()) {
      nlohmann::ordered_json el;
      for (const auto& [k, v] : m.elements) el[k] = v;
      r["elements"] = el;
    }
    j[m.run_id] = r;
  }
  return j;
}

}  // namespace palp::evalkit
