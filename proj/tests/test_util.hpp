#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "selseg/image.hpp"

namespace selseg::testing {

inline Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<double> d(static_cast<std::size_t>(h) * w);
  for (auto& v : d) v = U(rng);
  return Image(h, w, std::move(d));
}

inline ScalarField random_mask(int h, int w, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution B(p);
  std::vector<double> d(static_cast<std::size_t>(h) * w);
  for (auto& v : d) v = B(rng) ? 1.0 : 0.0;
  return ScalarField(h, w, std::move(d), FieldKind::mask);
}

inline ScalarField disc_mask(int h, int w, double cr, double cc, double radius) {
  std::vector<double> d(static_cast<std::size_t>(h) * w, 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= radius * radius)
        d[static_cast<std::size_t>(r) * w + c] = 1.0;
  return ScalarField(h, w, std::move(d), FieldKind::mask);
}

/// Binary object (intensity hi) on background lo plus clamped Gaussian noise.
inline Image render(const ScalarField& mask, double lo, double hi, double sigma,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, sigma);
  std::vector<double> d(mask.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double v = lo + (hi - lo) * mask[i];
    if (sigma > 0.0) v += N(rng);
    d[i] = std::clamp(v, 0.0, 1.0);
  }
  return Image(mask.height(), mask.width(), std::move(d));
}

/// Square marker polygon of half-width `half` centred at (r, c).
inline MarkerSet square_markers(int r, int c, int half) {
  return MarkerSet({{r - half, c - half}, {r - half, c + half}, {r + half, c + half},
                    {r + half, c - half}});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("selseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double rms(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace selseg::testing
