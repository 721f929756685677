#pragma once

// Core raster types shared by every other module: the grayscale image, the
// user's marker polygon and per-pixel scalar fields, plus the few grid
// operators (polygon fill, region mean, gradient magnitude) built on them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selseg/error.hpp"

namespace selseg {

inline constexpr int kMinGridSide = 4;

/// Row-major real grid; base for Image and ScalarField.
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, std::vector<double> data)
      : height_(height), width_(width), data_(std::move(data)) {
    detail::require(height > 0 && width > 0, "grid dimensions must be positive");
    detail::require(data_.size() == static_cast<std::size_t>(height) * width,
                    "grid data length does not match dimensions");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  double operator()(int r, int c) const { return data_[index(r, c)]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::span<const double> values() const& { return data_; }
  std::span<const double> values() const&& = delete;
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * width_ + c;
  }
  bool same_shape(const Grid& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

 protected:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Grayscale image with intensities in [0,1], at least 4x4.
class Image : public Grid {
 public:
  Image() = default;
  Image(int height, int width, std::vector<double> data)
      : Grid(height, width, std::move(data)) {
    if (height < kMinGridSide || width < kMinGridSide)
      throw InputError("image too small: " + std::to_string(height) + "x" +
                       std::to_string(width) + " (minimum 4x4)");
    for (double v : data_)
      detail::require(v >= 0.0 && v <= 1.0 && std::isfinite(v),
                      "image intensity outside [0,1]");
  }

  static Image filled(int height, int width, double value) {
    return Image(height, width,
                 std::vector<double>(static_cast<std::size_t>(height) * width, value));
  }
};

enum class FieldKind { generic, mask, distance, edge, fidelity, relaxed_label };

inline const char* to_string(FieldKind k) {
  switch (k) {
    case FieldKind::generic: return "generic";
    case FieldKind::mask: return "mask";
    case FieldKind::distance: return "distance";
    case FieldKind::edge: return "edge";
    case FieldKind::fidelity: return "fidelity";
    case FieldKind::relaxed_label: return "relaxed-label";
  }
  return "unknown";
}

/// Per-pixel real field tagged with what it represents; the tag's value
/// range is checked on construction.
class ScalarField : public Grid {
 public:
  ScalarField() = default;
  ScalarField(int height, int width, std::vector<double> data, FieldKind kind)
      : Grid(height, width, std::move(data)), kind_(kind) {
    for (double v : data_) {
      detail::require(std::isfinite(v), std::string("non-finite value in ") +
                                            to_string(kind) + " field");
      switch (kind) {
        case FieldKind::mask:
          detail::require(v == 0.0 || v == 1.0, "mask values must be 0 or 1");
          break;
        case FieldKind::distance:
          detail::require(v >= 0.0, "distance values must be nonnegative");
          break;
        case FieldKind::edge:
          detail::require(v > 0.0 && v <= 1.0, "edge values must lie in (0,1]");
          break;
        case FieldKind::relaxed_label:
          detail::require(v >= 0.0 && v <= 1.0, "label values must lie in [0,1]");
          break;
        default:
          break;
      }
    }
  }

  static ScalarField filled(int height, int width, double value, FieldKind kind) {
    return ScalarField(height, width,
                       std::vector<double>(static_cast<std::size_t>(height) * width, value),
                       kind);
  }

  FieldKind kind() const { return kind_; }

  /// Number of nonzero pixels.
  std::size_t count_nonzero() const {
    return static_cast<std::size_t>(
        std::count_if(data_.begin(), data_.end(), [](double v) { return v != 0.0; }));
  }

 private:
  FieldKind kind_ = FieldKind::generic;
};

struct Point {
  int row = 0;
  int col = 0;
  friend bool operator==(const Point&, const Point&) = default;
  friend auto operator<=>(const Point&, const Point&) = default;
};

/// Ordered user-clicked polygon vertices (at least three, pairwise distinct).
class MarkerSet {
 public:
  MarkerSet() = default;
  explicit MarkerSet(std::vector<Point> points) : points_(std::move(points)) {
    detail::require(points_.size() >= 3, "marker set needs at least 3 points");
    std::set<Point> seen(points_.begin(), points_.end());
    detail::require(seen.size() == points_.size(), "marker points must be distinct");
  }
  MarkerSet(std::vector<Point> points, int height, int width)
      : MarkerSet(std::move(points)) {
    check_bounds(height, width);
  }

  void check_bounds(int height, int width) const {
    for (const auto& p : points_)
      detail::require(p.row >= 0 && p.row < height && p.col >= 0 && p.col < width,
                      "marker (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                          ") outside " + std::to_string(height) + "x" +
                          std::to_string(width) + " image");
  }

  std::span<const Point> points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

 private:
  std::vector<Point> points_;
};

namespace detail {

// Twice the signed polygon area.
inline double shoelace2(std::span<const Point> pts) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point& a = pts[i];
    const Point& b = pts[(i + 1) % pts.size()];
    acc += static_cast<double>(a.col) * b.row - static_cast<double>(b.col) * a.row;
  }
  return acc;
}

inline bool on_segment(double r, double c, const Point& a, const Point& b) {
  const double cross = (b.col - a.col) * (r - a.row) - (b.row - a.row) * (c - a.col);
  if (cross != 0.0) return false;
  return r >= std::min(a.row, b.row) && r <= std::max(a.row, b.row) &&
         c >= std::min(a.col, b.col) && c <= std::max(a.col, b.col);
}

}  // namespace detail

/// True when (r, c) is inside the closed polygon or on its boundary.
inline bool point_in_polygon(double r, double c, std::span<const Point> pts) {
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i)
    if (detail::on_segment(r, c, pts[i], pts[(i + 1) % n])) return true;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const double ri = pts[i].row, ci = pts[i].col;
    const double rj = pts[j].row, cj = pts[j].col;
    if ((ri > r) != (rj > r)) {
      const double cross_c = ci + (r - ri) * (cj - ci) / (rj - ri);
      if (c < cross_c) inside = !inside;
    }
  }
  return inside;
}

/// Even-odd fill of the marker polygon sampled at pixel centres; boundary
/// pixels count as inside.
inline ScalarField rasterize_polygon(const MarkerSet& markers, int height, int width) {
  markers.check_bounds(height, width);
  if (detail::shoelace2(markers.points()) == 0.0)
    throw InputError("degenerate polygon: markers enclose zero area");
  std::vector<double> mask(static_cast<std::size_t>(height) * width, 0.0);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      if (point_in_polygon(r, c, markers.points()))
        mask[static_cast<std::size_t>(r) * width + c] = 1.0;
  return ScalarField(height, width, std::move(mask), FieldKind::mask);
}

/// Mean of f over the nonzero pixels of a mask.
inline double region_mean(const Grid& f, const ScalarField& mask) {
  detail::require(f.same_shape(mask), "region_mean: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    num += f[i] * mask[i];
    den += mask[i];
  }
  if (den == 0.0) throw InputError("region_mean: empty mask");
  return num / den;
}

/// Partial derivatives with unit spacing: central differences inside,
/// one-sided differences on the border rows/columns.
struct Gradient {
  std::vector<double> d_row;
  std::vector<double> d_col;
};

inline Gradient central_gradient(const Grid& f) {
  const int h = f.height(), w = f.width();
  Gradient g{std::vector<double>(f.size()), std::vector<double>(f.size())};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = f.index(r, c);
      if (c == 0)
        g.d_col[i] = f(r, 1) - f(r, 0);
      else if (c == w - 1)
        g.d_col[i] = f(r, w - 1) - f(r, w - 2);
      else
        g.d_col[i] = 0.5 * (f(r, c + 1) - f(r, c - 1));
      if (r == 0)
        g.d_row[i] = f(1, c) - f(0, c);
      else if (r == h - 1)
        g.d_row[i] = f(h - 1, c) - f(h - 2, c);
      else
        g.d_row[i] = 0.5 * (f(r + 1, c) - f(r - 1, c));
    }
  }
  return g;
}

inline ScalarField gradient_magnitude(const Image& f) {
  const Gradient g = central_gradient(f);
  std::vector<double> mag(f.size());
  for (std::size_t i = 0; i < mag.size(); ++i)
    mag[i] = std::hypot(g.d_row[i], g.d_col[i]);
  return ScalarField(f.height(), f.width(), std::move(mag), FieldKind::generic);
}

}  // namespace selseg
