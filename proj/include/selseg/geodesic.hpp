#pragma once

// Geodesic distance from the marker set: the Eikonal equation |grad D| = s
// solved by fast sweeping, with an 8-connected Dijkstra solver kept as an
// independent cross-check.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <utility>
#include <vector>

#include "selseg/error.hpp"
#include "selseg/image.hpp"

namespace selseg {

inline constexpr double kMinSlowness = 1e-6;

/// Positive per-pixel slowness, the right-hand side of the Eikonal equation.
class SpeedField : public Grid {
 public:
  SpeedField() = default;
  SpeedField(int height, int width, std::vector<double> slowness)
      : Grid(height, width, std::move(slowness)) {
    for (double s : data_)
      detail::require(std::isfinite(s) && s >= kMinSlowness,
                      "slowness must be finite and >= 1e-6");
  }
  static SpeedField uniform(int height, int width, double s) {
    return SpeedField(height, width,
                      std::vector<double>(static_cast<std::size_t>(height) * width, s));
  }
};

struct GeodesicParams {
  double eps = 1e-3;
  double beta = 100.0;
};

/// slowness = eps + beta * |grad f|^2
inline SpeedField build_slowness(const Image& f, double beta, double eps) {
  if (!(eps > 0.0)) throw InputError("build_slowness: eps must be positive");
  detail::require(beta >= 0.0, "build_slowness: beta must be nonnegative");
  const ScalarField mag = gradient_magnitude(f);
  std::vector<double> s(f.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = eps + beta * mag[i] * mag[i];
  return SpeedField(f.height(), f.width(), std::move(s));
}

inline SpeedField build_slowness(const Image& f, const GeodesicParams& p = {}) {
  return build_slowness(f, p.beta, p.eps);
}

struct SweepOptions {
  // Permutation of the four sweep directions (0: ++, 1: +-, 2: -+, 3: --).
  std::array<int, 4> order{0, 1, 2, 3};
  double tol = 1e-9;
  int max_passes = 50;
};

namespace detail {

inline void check_seeds(const Grid& speed, const ScalarField& seeds) {
  require(speed.same_shape(seeds), "eikonal: seed mask shape mismatch");
  if (seeds.count_nonzero() == 0) throw InputError("eikonal: empty seed set");
}

inline ScalarField normalize_distance(std::vector<double> d, int h, int w) {
  const double mx = *std::max_element(d.begin(), d.end());
  if (mx > 0.0)
    for (double& v : d) v /= mx;
  else
    std::fill(d.begin(), d.end(), 0.0);
  return ScalarField(h, w, std::move(d), FieldKind::distance);
}

// First-order Godunov upwind update for a unit grid.
inline double godunov(double a, double b, double s) {
  if (a > b) std::swap(a, b);
  if (b - a >= s) return a + s;
  return 0.5 * (a + b + std::sqrt(2.0 * s * s - (a - b) * (a - b)));
}

}  // namespace detail

/// Unnormalised fast-sweeping solution (D = 0 on seeds).
inline std::vector<double> eikonal_distance(const SpeedField& speed, const ScalarField& seeds,
                                            const SweepOptions& opt = {}) {
  detail::check_seeds(speed, seeds);
  const int h = speed.height(), w = speed.width();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(speed.size(), inf);
  std::vector<bool> fixed(speed.size(), false);
  for (std::size_t i = 0; i < d.size(); ++i)
    if (seeds[i] != 0.0) {
      d[i] = 0.0;
      fixed[i] = true;
    }

  auto relax = [&](int r, int c) -> double {
    const std::size_t i = speed.index(r, c);
    if (fixed[i]) return 0.0;
    const double a = std::min(c > 0 ? d[i - 1] : inf, c + 1 < w ? d[i + 1] : inf);
    const double b = std::min(r > 0 ? d[i - w] : inf, r + 1 < h ? d[i + w] : inf);
    if (a == inf && b == inf) return 0.0;
    const double s = speed[i];
    const double cand = (a == inf || b == inf) ? std::min(a, b) + s : detail::godunov(a, b, s);
    if (cand < d[i]) {
      const double change = d[i] == inf ? inf : d[i] - cand;
      d[i] = cand;
      return change;
    }
    return 0.0;
  };

  for (int pass = 0; pass < opt.max_passes; ++pass) {
    double max_change = 0.0;
    for (int dir : opt.order) {
      const bool row_fwd = dir < 2;
      const bool col_fwd = dir % 2 == 0;
      for (int ri = 0; ri < h; ++ri) {
        const int r = row_fwd ? ri : h - 1 - ri;
        for (int ci = 0; ci < w; ++ci) {
          const int c = col_fwd ? ci : w - 1 - ci;
          max_change = std::max(max_change, relax(r, c));
        }
      }
    }
    if (max_change < opt.tol) break;
  }
  return d;
}

/// Geodesic distance normalised to [0,1] by its maximum.
inline ScalarField solve_eikonal(const SpeedField& speed, const ScalarField& seeds,
                                 const SweepOptions& opt = {}) {
  return detail::normalize_distance(eikonal_distance(speed, seeds, opt), speed.height(),
                                    speed.width());
}

/// Unnormalised 8-connected Dijkstra distances; edge cost is the mean of the
/// endpoint slownesses times the step length.
inline std::vector<double> dijkstra_distance(const SpeedField& speed, const ScalarField& seeds) {
  detail::check_seeds(speed, seeds);
  const int h = speed.height(), w = speed.width();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(speed.size(), inf);
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (seeds[i] != 0.0) {
      d[i] = 0.0;
      heap.emplace(0.0, i);
    }
  static constexpr std::array<std::pair<int, int>, 8> kSteps{
      {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};
  while (!heap.empty()) {
    const auto [dist, i] = heap.top();
    heap.pop();
    if (dist > d[i]) continue;
    const int r = static_cast<int>(i) / w, c = static_cast<int>(i) % w;
    for (const auto& [dr, dc] : kSteps) {
      const int nr = r + dr, nc = c + dc;
      if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
      const std::size_t j = speed.index(nr, nc);
      const double len = (dr != 0 && dc != 0) ? std::sqrt(2.0) : 1.0;
      const double cand = dist + 0.5 * (speed[i] + speed[j]) * len;
      if (cand < d[j]) {
        d[j] = cand;
        heap.emplace(cand, j);
      }
    }
  }
  return d;
}

inline ScalarField dijkstra_oracle(const SpeedField& speed, const ScalarField& seeds) {
  return detail::normalize_distance(dijkstra_distance(speed, seeds), speed.height(),
                                    speed.width());
}

/// D_G for an image and marker polygon: seeds are the filled polygon.
inline ScalarField geodesic_from_markers(const Image& f, const MarkerSet& markers,
                                         const GeodesicParams& p = {}) {
  return solve_eikonal(build_slowness(f, p), rasterize_polygon(markers, f.height(), f.width()));
}

}  // namespace selseg
