#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "palp/diffcore/rng.hpp"
#include "palp/diffcore/tensor.hpp"

// Synthetic attribute world: 16x16 grayscale images in [0, 1].
namespace palp::evalkit {

inline constexpr std::size_t kSide = 16;
inline constexpr std::size_t kPixels = kSide * kSide;

struct AttributeSpec {
  std::vector<std::string> styles{"photo", "sketch"};
  std::vector<std::string> classes{"square", "circle", "triangle", "cross"};
  std::vector<std::string> backgrounds{"plain", "stripes", "dots"};
  double center_jitter = 1.5;         // +- pixels around the canvas center
  double size_min = 3.6, size_max = 5.0;  // half extent in pixels
  double aspect_jitter = 0.15;        // aspect in [1-j, 1+j]
  double rotation_jitter = 0.12;      // radians
};

/// Geometry of one rendered shape.
struct ShapeGeometry {
  std::string cls;
  double cx = 8.0, cy = 8.0;
  double size = 4.5;    // half extent
  double aspect = 1.0;  // height / width
  double rotation = 0.0;
};

// Signed distance (pixels, negative inside) from a pixel center to the shape.
inline double shape_sdf(const ShapeGeometry& g, double px, double py) {
  const double c = std::cos(g.rotation), s = std::sin(g.rotation);
  const double dx = px - g.cx, dy = py - g.cy;
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double hw = g.size / std::sqrt(g.aspect);
  const double hh = g.size * std::sqrt(g.aspect);
  auto box = [](double x, double y, double bx, double by) {
    const double qx = std::abs(x) - bx, qy = std::abs(y) - by;
    const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
  };
  if (g.cls == "square") return box(u, v, hw, hh);
  if (g.cls == "circle") {
    // scaled-space distance; adequate for mild aspect ratios
    const double k = std::sqrt((u / hw) * (u / hw) + (v / hh) * (v / hh));
    return (k - 1.0) * std::min(hw, hh);
  }
  if (g.cls == "triangle") {
    // isosceles, apex up: base at v = +hh, apex at v = -hh
    const double ny = (v + hh) / (2.0 * hh);  // 0 at apex, 1 at base
    const double half_width = ny * hw * 1.15;
    const double slope = 2.0 * hh / (hw * 1.15);
    const double side = (std::abs(u) - half_width) / std::sqrt(1.0 + 1.0 / (slope * slope));
    const double bottom = v - hh;
    const double top = -hh - v;
    return std::max({side, bottom, top});
  }
  if (g.cls == "cross") {
    const double t = 0.36 * std::min(hw, hh);
    return std::min(box(u, v, hw, t), box(u, v, t, hh));
  }
  throw Error("unknown class '" + g.cls + "'");
}

// Anti-aliased coverage in [0, 1].
inline Tensor coverage(const ShapeGeometry& g) {
  Tensor out(Shape{kPixels});
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x)
      out[y * kSide + x] = std::clamp(0.5 - shape_sdf(g, x + 0.5, y + 0.5), 0.0, 1.0);
  return out;
}

// Line along the shape boundary. Every pixel within ~0.6 px of the boundary
// is dark, so the stroke is closed under 4-connectivity.
inline Tensor outline(const ShapeGeometry& g) {
  Tensor out(Shape{kPixels});
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      const double d = std::abs(shape_sdf(g, x + 0.5, y + 0.5));
      out[y * kSide + x] = std::clamp(1.4 - 1.2 * d, 0.0, 1.0);
    }
  return out;
}

/// Photo backgrounds stay in [0.4, 0.8] so they never read as white paper or
/// as dark ink.
inline Tensor background(const std::string& kind, Rng& rng) {
  Tensor out(Shape{kPixels});
  if (kind == "plain") {
    const double v = rng.uniform(0.5, 0.65);
    for (double& p : out.data()) p = v;
  } else if (kind == "stripes") {
    const std::size_t phase = rng.index(4);
    const double lo = rng.uniform(0.4, 0.45), hi = rng.uniform(0.72, 0.78);
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) out[y * kSide + x] = ((y + phase) / 2) % 2 ? hi : lo;
  } else if (kind == "dots") {
    const std::size_t px = rng.index(4), py = rng.index(4);
    const double base = rng.uniform(0.45, 0.52), dot = rng.uniform(0.76, 0.8);
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        const bool on = ((x + px) % 4) < 2 && ((y + py) % 4) < 2;
        out[y * kSide + x] = on ? dot : base;
      }
  } else {
    throw Error("unknown background '" + kind + "'");
  }
  return out;
}

/// Fill texture inside a photo shape.
enum class Fill : std::uint8_t { kSolid, kVerticalBars, kChecker };

inline double fill_value(Fill fill, double base, std::size_t x, std::size_t y) {
  switch (fill) {
    case Fill::kSolid: return base;
    case Fill::kVerticalBars: return (x / 2) % 2 ? base + 0.12 : base;
    case Fill::kChecker: return ((x / 2) + (y / 2)) % 2 ? base + 0.12 : base;
  }
  return base;
}

inline Tensor render_photo(const ShapeGeometry& g, const Tensor& bg, double fill_base,
                           Fill fill = Fill::kSolid) {
  const Tensor cov = coverage(g);
  Tensor out(Shape{kPixels});
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      const std::size_t i = y * kSide + x;
      out[i] = bg[i] * (1.0 - cov[i]) + fill_value(fill, fill_base, x, y) * cov[i];
    }
  return out;
}

inline Tensor render_sketch(const ShapeGeometry& g) {
  const Tensor ink = outline(g);
  Tensor out(Shape{kPixels});
  for (std::size_t i = 0; i < kPixels; ++i) out[i] = 1.0 - ink[i];
  return out;
}

inline ShapeGeometry random_geometry(const std::string& cls, const AttributeSpec& spec, Rng& rng) {
  ShapeGeometry g;
  g.cls = cls;
  g.cx = 8.0 + rng.uniform(-spec.center_jitter, spec.center_jitter);
  g.cy = 8.0 + rng.uniform(-spec.center_jitter, spec.center_jitter);
  g.size = rng.uniform(spec.size_min, spec.size_max);
  g.aspect = rng.uniform(1.0 - spec.aspect_jitter, 1.0 + spec.aspect_jitter);
  g.rotation = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter);
  return g;
}

struct Sample {
  Tensor image;  // [kPixels] in [0, 1]
  std::string style, cls, background;
};

inline Sample render_sample(const std::string& style, const std::string& cls,
                            const std::string& bg, const AttributeSpec& spec, Rng& rng) {
  const ShapeGeometry g = random_geometry(cls, spec, rng);
  Sample s{{}, style, cls, bg};
  if (style == "photo") {
    const Tensor back = background(bg, rng);
    s.image = render_photo(g, back, rng.uniform(0.05, 0.2));
  } else if (style == "sketch") {
    s.image = render_sketch(g);
  } else {
    throw Error("unknown style '" + style + "'");
  }
  return s;
}

using Dataset = std::vector<Sample>;

/// Every (style, class, background) cell, n images each, deterministic per seed.
inline Dataset gen_dataset(const AttributeSpec& spec, std::size_t n_per_cell, std::uint64_t seed) {
  if (n_per_cell < 1) throw Error("n_per_cell must be at least 1");
  Rng rng(seed);
  Dataset out;
  out.reserve(spec.styles.size() * spec.classes.size() * spec.backgrounds.size() * n_per_cell);
  for (const auto& style : spec.styles)
    for (const auto& cls : spec.classes)
      for (const auto& bg : spec.backgrounds)
        for (std::size_t i = 0; i < n_per_cell; ++i)
          out.push_back(render_sample(style, cls, bg, spec, rng));
  return out;
}

/// A personal subject: fixed geometry and fill that the attribute grid never
/// produces, photographed on one background.
struct SubjectSpec {
  std::string name = "subject";
  std::string class_token = "square";
  double size = 4.6;
  double aspect = 1.7;
  double rotation = 0.0;
  double fill = 0.1;
  Fill texture = Fill::kSolid;
  std::string background = "dots";
  double center_jitter = 1.0;
};

inline SubjectSpec default_subject() { return {}; }

inline SubjectSpec second_subject() {
  SubjectSpec s;
  s.name = "subject2";
  s.class_token = "circle";
  s.size = 4.4;
  s.aspect = 0.55;
  s.fill = 0.15;
  return s;
}

inline ShapeGeometry subject_geometry(const SubjectSpec& s, Rng& rng) {
  ShapeGeometry g;
  g.cls = s.class_token;
  g.cx = 8.0 + rng.uniform(-s.center_jitter, s.center_jitter);
  g.cy = 8.0 + rng.uniform(-s.center_jitter, s.center_jitter);
  g.size = s.size;
  g.aspect = s.aspect;
  g.rotation = s.rotation;
  return g;
}

inline Tensor render_subject(const SubjectSpec& s, Rng& rng) {
  const ShapeGeometry g = subject_geometry(s, rng);
  const Tensor bg = background(s.background, rng);
  return render_photo(g, bg, s.fill, s.texture);
}

inline Tensor render_subject_sketch(const SubjectSpec& s, Rng& rng) {
  return render_sketch(subject_geometry(s, rng));
}

inline std::vector<Tensor> render_subject_images(const SubjectSpec& s, std::size_t count,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(render_subject(s, rng));
  return out;
}

/// [0, 1] image to model space [-1, 1] and back.
inline Tensor to_model_space(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.data()) v = 2.0 * v - 1.0;
  return out;
}

inline Tensor to_image_space(std::span<const double> x) {
  Tensor out(Shape{x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(0.5 * (x[i] + 1.0), 0.0, 1.0);
  return out;
}

}  // namespace palp::evalkit
