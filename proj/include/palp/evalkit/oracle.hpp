#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "palp/denoiser/prompt.hpp"
#include "palp/evalkit/render.hpp"

// Rule-based scorers for the attribute world. All are pure functions of the
// image; scores live in [0, 1].
namespace palp::evalkit {

using Mask = std::array<bool, kPixels>;

inline double smoothstep(double x, double lo, double hi) {
  const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---- low level features ----------------------------------------------------

/// Fraction of pixels that read as white paper.
inline double whiteness(std::span<const double> img) {
  std::size_t n = 0;
  for (double v : img) n += v >= 0.88;
  return static_cast<double>(n) / static_cast<double>(img.size());
}

/// Mean intensity of the outer three-pixel frame.
inline double border_mean(std::span<const double> img) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x)
      if (x < 3 || y < 3 || x >= kSide - 3 || y >= kSide - 3) {
        s += img[y * kSide + x];
        ++n;
      }
  return s / static_cast<double>(n);
}

/// Mean absolute difference between 4-neighbours.
inline double edge_density(std::span<const double> img) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      if (x + 1 < kSide) {
        s += std::abs(img[y * kSide + x + 1] - img[y * kSide + x]);
        ++n;
      }
      if (y + 1 < kSide) {
        s += std::abs(img[(y + 1) * kSide + x] - img[y * kSide + x]);
        ++n;
      }
    }
  return s / static_cast<double>(n);
}

/// Dark pixels with enclosed holes filled: the filled shape for photos and
/// the region inside the outline for sketches.
inline Mask silhouette(std::span<const double> img, double dark = 0.35) {
  Mask ink{};
  for (std::size_t i = 0; i < kPixels; ++i) ink[i] = img[i] < dark;
  // flood the outside from the frame through non-ink pixels
  Mask outside{};
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < kSide; ++i)
    for (std::size_t p : {i, (kSide - 1) * kSide + i, i * kSide, i * kSide + kSide - 1})
      if (!ink[p] && !outside[p]) {
        outside[p] = true;
        stack.push_back(p);
      }
  while (!stack.empty()) {
    const std::size_t p = stack.back();
    stack.pop_back();
    const std::size_t x = p % kSide, y = p / kSide;
    auto visit = [&](std::size_t q) {
      if (!ink[q] && !outside[q]) {
        outside[q] = true;
        stack.push_back(q);
      }
    };
    if (x > 0) visit(p - 1);
    if (x + 1 < kSide) visit(p + 1);
    if (y > 0) visit(p - kSide);
    if (y + 1 < kSide) visit(p + kSide);
  }
  Mask out{};
  for (std::size_t i = 0; i < kPixels; ++i) out[i] = !outside[i];
  return out;
}

inline std::size_t mask_area(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

inline Mask dilate(const Mask& m, int radius = 1) {
  Mask out{};
  for (int y = 0; y < static_cast<int>(kSide); ++y)
    for (int x = 0; x < static_cast<int>(kSide); ++x) {
      if (!m[y * kSide + x]) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int u = x + dx, v = y + dy;
          if (u >= 0 && v >= 0 && u < static_cast<int>(kSide) && v < static_cast<int>(kSide))
            out[v * kSide + u] = true;
        }
    }
  return out;
}

// ---- style -----------------------------------------------------------------

struct StyleScores {
  double photo = 0.0;
  double sketch = 0.0;
};

/// Sketches are mostly white paper with sparse ink; photos have no white and
/// a moderate edge density (pure noise fails the edge test).
inline StyleScores style_scores(std::span<const double> img) {
  const double w = whiteness(img);
  const double e = edge_density(img);
  StyleScores s;
  s.sketch = smoothstep(w, 0.3, 0.55);
  s.photo = (1.0 - smoothstep(w, 0.08, 0.25)) * (1.0 - smoothstep(e, 0.16, 0.24));
  return s;
}

// ---- class -----------------------------------------------------------------

/// Ink map in [0, 1] and the matching template renderer. Sketch-like images
/// are compared against outlines, photo-like images against filled coverage.
struct InkMap {
  std::array<double, kPixels> ink{};
  bool outline = false;
  double cx = 7.5, cy = 7.5;
  double mass = 0.0;
};

inline InkMap ink_map(std::span<const double> img) {
  InkMap m;
  m.outline = whiteness(img) >= 0.4;
  if (m.outline) {
    for (std::size_t i = 0; i < kPixels; ++i) m.ink[i] = std::clamp((0.9 - img[i]) / 0.7, 0.0, 1.0);
  } else {
    std::vector<double> sorted(img.begin(), img.end());
    std::nth_element(sorted.begin(), sorted.begin() + kPixels / 20, sorted.end());
    const double fill = std::min(sorted[kPixels / 20], 0.3);
    for (std::size_t i = 0; i < kPixels; ++i)
      m.ink[i] = std::clamp((0.42 - img[i]) / (0.42 - fill), 0.0, 1.0);
  }
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < kPixels; ++i) {
    sx += m.ink[i] * static_cast<double>(i % kSide);
    sy += m.ink[i] * static_cast<double>(i / kSide);
    m.mass += m.ink[i];
  }
  if (m.mass > 0.0) {
    m.cx = sx / m.mass + 0.5;
    m.cy = sy / m.mass + 0.5;
  }
  return m;
}

inline double ncc(std::span<const double> a, std::span<const double> b) {
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    na += (a[i] - ma) * (a[i] - ma);
    nb += (b[i] - mb) * (b[i] - mb);
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return num / std::sqrt(na * nb);
}

/// Area centroid offset of each class relative to its bounding-box center,
/// in units of the half height (only the triangle is asymmetric).
inline double class_centroid_dy(const std::string& cls, bool outline) {
  if (cls != "triangle") return 0.0;
  return outline ? 0.22 : 1.0 / 3.0;
}

/// Best template correlation per class for the image's ink map. Templates
/// are rendered at the ink centroid over a size/aspect/rotation grid, then the
/// winner is refined by sub-pixel offsets.
inline std::map<std::string, double> class_match(std::span<const double> img,
                                                 const std::vector<std::string>& classes) {
  const InkMap m = ink_map(img);
  std::map<std::string, double> best;
  for (const auto& c : classes) best[c] = 0.0;
  if (m.mass < 3.0) return best;
  auto score = [&](const ShapeGeometry& g) {
    const Tensor t = m.outline ? outline(g) : coverage(g);
    return ncc(m.ink, t.data());
  };
  for (const auto& cls : classes) {
    ShapeGeometry top;
    double top_v = -1.0;
    for (double size = 3.4; size < 5.3; size += 0.2)
      for (double aspect : {0.55, 0.85, 1.0, 1.15, 1.7})
        for (double rot : {-0.08, 0.0, 0.08}) {
          const double hh = size * std::sqrt(aspect);
          ShapeGeometry g{cls, m.cx, m.cy - class_centroid_dy(cls, m.outline) * hh, size,
                          aspect, rot};
          const double v = score(g);
          if (v > top_v) {
            top_v = v;
            top = g;
          }
        }
    for (double dy : {-0.5, 0.0, 0.5})
      for (double dx : {-0.5, 0.0, 0.5}) {
        if (dx == 0.0 && dy == 0.0) continue;
        ShapeGeometry g = top;
        g.cx += dx;
        g.cy += dy;
        top_v = std::max(top_v, score(g));
      }
    best[cls] = std::max(top_v, 0.0);
  }
  return best;
}

/// Score for `cls`: its margin over the best competing class, gated by the
/// absolute match quality.
inline double class_score(const std::map<std::string, double>& match, const std::string& cls) {
  auto it = match.find(cls);
  if (it == match.end()) throw Error("unknown class '" + cls + "'");
  double other = 0.0;
  for (const auto& [c, v] : match)
    if (c != cls) other = std::max(other, v);
  return sigmoid((it->second - other) / 0.02) * smoothstep(it->second, 0.5, 0.75);
}

// ---- background --------------------------------------------------------------

struct BackgroundScores {
  double plain = 0.0, stripes = 0.0, dots = 0.0;
};

/// Texture of the frame outside the (dilated) silhouette. Stripes vary only
/// vertically; dots vary in both directions with period 4.
inline BackgroundScores background_scores(std::span<const double> img) {
  const Mask fg = dilate(silhouette(img), 1);
  auto bgpix = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < static_cast<int>(kSide) && y < static_cast<int>(kSide) &&
           !fg[y * kSide + x];
  };
  auto at = [&](int x, int y) { return img[y * kSide + x]; };
  double dh = 0.0, dv = 0.0, ph = 0.0, pv = 0.0;
  std::size_t nh = 0, nv = 0, nph = 0, npv = 0;
  for (int y = 0; y < static_cast<int>(kSide); ++y)
    for (int x = 0; x < static_cast<int>(kSide); ++x) {
      if (!bgpix(x, y)) continue;
      if (bgpix(x + 1, y)) {
        dh += std::abs(at(x + 1, y) - at(x, y));
        ++nh;
      }
      if (bgpix(x, y + 1)) {
        dv += std::abs(at(x, y + 1) - at(x, y));
        ++nv;
      }
      if (bgpix(x + 4, y)) {
        ph += std::abs(at(x + 4, y) - at(x, y));
        ++nph;
      }
      if (bgpix(x, y + 4)) {
        pv += std::abs(at(x, y + 4) - at(x, y));
        ++npv;
      }
    }
  BackgroundScores s;
  if (nh == 0 || nv == 0) {
    s.plain = 1.0;
    return s;
  }
  dh /= static_cast<double>(nh);
  dv /= static_cast<double>(nv);
  ph = nph ? ph / static_cast<double>(nph) : 0.0;
  pv = npv ? pv / static_cast<double>(npv) : 0.0;
  const double energy = dh + dv;
  const double textured = smoothstep(energy, 0.02, 0.06);
  // period-4 differences are small for a periodic texture, large for noise
  const double periodic = 1.0 - smoothstep((ph + pv) / (energy + 1e-9), 0.35, 0.7);
  const double aniso = (dv - dh) / (dv + dh + 1e-9);
  s.plain = 1.0 - textured;
  s.stripes = textured * periodic * smoothstep(aniso, 0.45, 0.75);
  s.dots = textured * periodic * (1.0 - smoothstep(aniso, 0.3, 0.6));
  return s;
}

// ---- prompt alignment ---------------------------------------------------------

struct OracleScores {
  std::vector<std::pair<std::string, double>> elements;  // per prompt token
  double text_align = 0.0;                              // mean of elements

  double element(const std::string& token) const {
    for (const auto& [t, v] : elements)
      if (t == token) return v;
    throw Error("no score for element '" + token + "'");
  }
};

inline OracleScores text_align_score(std::span<const double> img, const Prompt& clean,
                                     const AttributeSpec& spec = {}) {
  if (clean.has_placeholder()) throw Error("text alignment is scored against a clean prompt");
  OracleScores out;
  std::optional<StyleScores> style;
  std::optional<std::map<std::string, double>> cls;
  std::optional<BackgroundScores> bg;
  auto in = [](const std::vector<std::string>& v, const std::string& t) {
    return std::find(v.begin(), v.end(), t) != v.end();
  };
  for (const auto& tok : clean.tokens) {
    double v = 0.0;
    if (in(spec.styles, tok)) {
      if (!style) style = style_scores(img);
      v = tok == "photo" ? style->photo : style->sketch;
    } else if (in(spec.classes, tok)) {
      if (!cls) cls = class_match(img, spec.classes);
      v = class_score(*cls, tok);
    } else if (in(spec.backgrounds, tok)) {
      if (!bg) bg = background_scores(img);
      v = tok == "plain" ? bg->plain : tok == "stripes" ? bg->stripes : bg->dots;
    } else {
      throw Error("unknown prompt element '" + tok + "'");
    }
    out.elements.emplace_back(tok, v);
  }
  double s = 0.0;
  for (const auto& e : out.elements) s += e.second;
  out.text_align = out.elements.empty() ? 0.0 : s / static_cast<double>(out.elements.size());
  return out;
}

// Hard decisions used by the calibration gate.
inline std::string classify_style(std::span<const double> img) {
  const auto s = style_scores(img);
  return s.sketch >= s.photo ? "sketch" : "photo";
}

inline std::string classify_class(std::span<const double> img, const AttributeSpec& spec = {}) {
  const auto m = class_match(img, spec.classes);
  return std::max_element(m.begin(), m.end(), [](auto& a, auto& b) { return a.second < b.second; })
      ->first;
}

inline std::string classify_background(std::span<const double> img) {
  const auto s = background_scores(img);
  if (s.plain >= s.stripes && s.plain >= s.dots) return "plain";
  return s.stripes >= s.dots ? "stripes" : "dots";
}

// ---- subject similarity --------------------------------------------------------

/// Magnitude-weighted doubled-angle gradient field of a lightly blurred ink
/// map. The ink map discards mid-gray backgrounds and fills the enclosed
/// interior, so a drawn outline and a filled shape along the same boundary
/// give nearly the same field: the descriptor follows the shape, not the
/// rendering.
struct StructureField {
  std::array<double, kPixels> c{}, s{};
};

inline std::array<double, kPixels> filled_ink(std::span<const double> raw) {
  // interior eroded by one pixel so anti-aliased photo edges stay soft
  const Mask inside = silhouette(raw);
  Mask outside{};
  for (std::size_t i = 0; i < kPixels; ++i) outside[i] = !inside[i];
  outside = dilate(outside, 1);
  std::array<double, kPixels> ink{};
  for (std::size_t i = 0; i < kPixels; ++i)
    ink[i] = outside[i] ? std::clamp((0.42 - raw[i]) / 0.3, 0.0, 1.0) : 1.0;
  return ink;
}

inline StructureField structure_field(std::span<const double> raw) {
  const std::array<double, kPixels> img = filled_ink(raw);
  std::array<double, kPixels> b{};
  constexpr double k[3] = {0.25, 0.5, 0.25};
  for (int y = 0; y < static_cast<int>(kSide); ++y)
    for (int x = 0; x < static_cast<int>(kSide); ++x) {
      double acc = 0.0, wsum = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int u = x + dx, v = y + dy;
          if (u < 0 || v < 0 || u >= static_cast<int>(kSide) || v >= static_cast<int>(kSide)) continue;
          const double w = k[dx + 1] * k[dy + 1];
          acc += w * img[v * kSide + u];
          wsum += w;
        }
      b[y * kSide + x] = acc / wsum;
    }
  StructureField f;
  auto at = [&](int x, int y) {
    x = std::clamp(x, 0, static_cast<int>(kSide) - 1);
    y = std::clamp(y, 0, static_cast<int>(kSide) - 1);
    return b[y * kSide + x];
  };
  for (int y = 0; y < static_cast<int>(kSide); ++y)
    for (int x = 0; x < static_cast<int>(kSide); ++x) {
      const double gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
      const double gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      const std::size_t i = y * kSide + x;
      if (mag > 1e-12) {
        f.c[i] = (gx * gx - gy * gy) / mag;
        f.s[i] = 2.0 * gx * gy / mag;
      }
    }
  return f;
}

/// Reference for subject similarity: its structure field and the region of
/// the subject (silhouette grown by one pixel).
struct SubjectRef {
  StructureField field;
  Mask region{};
};

inline SubjectRef make_subject_ref(std::span<const double> img) {
  return SubjectRef{structure_field(img), dilate(silhouette(img), 1)};
}

inline std::vector<SubjectRef> make_subject_refs(const std::vector<Tensor>& images) {
  std::vector<SubjectRef> out;
  for (const auto& im : images) out.push_back(make_subject_ref(im.data()));
  return out;
}

/// Cosine similarity of structure fields inside the reference region; the
/// candidate may be shifted by up to `max_shift` pixels.
inline double subject_sim_one(const StructureField& cand, const SubjectRef& ref, int max_shift = 3) {
  double ref_norm = 0.0;
  for (std::size_t i = 0; i < kPixels; ++i)
    if (ref.region[i]) ref_norm += ref.field.c[i] * ref.field.c[i] + ref.field.s[i] * ref.field.s[i];
  if (ref_norm <= 0.0) return 0.0;
  double best = 0.0;
  for (int dy = -max_shift; dy <= max_shift; ++dy)
    for (int dx = -max_shift; dx <= max_shift; ++dx) {
      double num = 0.0, cand_norm = 0.0;
      for (int y = 0; y < static_cast<int>(kSide); ++y)
        for (int x = 0; x < static_cast<int>(kSide); ++x) {
          const std::size_t i = y * kSide + x;
          if (!ref.region[i]) continue;
          const int u = x + dx, v = y + dy;
          if (u < 0 || v < 0 || u >= static_cast<int>(kSide) || v >= static_cast<int>(kSide)) continue;
          const std::size_t j = v * kSide + u;
          num += cand.c[j] * ref.field.c[i] + cand.s[j] * ref.field.s[i];
          cand_norm += cand.c[j] * cand.c[j] + cand.s[j] * cand.s[j];
        }
      if (cand_norm <= 0.0) continue;
      best = std::max(best, num / std::sqrt(cand_norm * ref_norm));
    }
  return std::clamp(best, 0.0, 1.0);
}

/// Max over references.
inline double subject_sim(std::span<const double> img, const std::vector<SubjectRef>& refs) {
  if (refs.empty()) throw Error("subject similarity needs at least one reference");
  const StructureField f = structure_field(img);
  double best = 0.0;
  for (const auto& r : refs) best = std::max(best, subject_sim_one(f, r));
  return best;
}

}  // namespace palp::evalkit
