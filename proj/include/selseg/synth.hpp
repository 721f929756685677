#pragma once

// Seeded synthetic fixtures: a bright object on a dark background with
// additive Gaussian noise, plus the ground-truth mask of the object the
// markers select and a square marker polygon strictly inside it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "selseg/error.hpp"
#include "selseg/image.hpp"
#include "selseg/image_io.hpp"

namespace selseg::synth {

enum class Kind { disc, disc_notch, two_object };

inline Kind parse_kind(const std::string& s) {
  if (s == "disc") return Kind::disc;
  if (s == "disc-notch") return Kind::disc_notch;
  if (s == "two-object") return Kind::two_object;
  throw InputError("unknown fixture kind '" + s + "' (expected disc, disc-notch or two-object)");
}

inline const char* to_string(Kind k) {
  switch (k) {
    case Kind::disc: return "disc";
    case Kind::disc_notch: return "disc-notch";
    case Kind::two_object: return "two-object";
  }
  return "unknown";
}

/// Background and object intensity. Single-object fixtures use the full
/// range; the two-object scene leaves room for a mid-grey distractor.
inline std::pair<double, double> levels(Kind k) {
  return k == Kind::two_object ? std::pair{0.25, 0.75} : std::pair{0.0, 1.0};
}

struct Params {
  Kind kind = Kind::disc;
  int size = 64;
  double noise = 0.1;
  std::uint64_t seed = 0;
  // Intensity of the unmarked second object (two-object only).
  double distractor = 0.5;
};

struct Sample {
  Image image;
  Image clean;
  ScalarField gt;
  MarkerSet markers;
};

namespace detail {

struct Canvas {
  int n;
  std::vector<double> target, other;

  explicit Canvas(int size)
      : n(size), target(static_cast<std::size_t>(size) * size, 0.0), other(target.size(), 0.0) {}

  void disc(std::vector<double>& m, double cr, double cc, double r) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if ((y - cr) * (y - cr) + (x - cc) * (x - cc) <= r * r) m[static_cast<std::size_t>(y) * n + x] = 1.0;
  }
  void box(std::vector<double>& m, int r0, int r1, int c0, int c1, double v) {
    for (int y = std::max(r0, 0); y < std::min(r1, n); ++y)
      for (int x = std::max(c0, 0); x < std::min(c1, n); ++x) m[static_cast<std::size_t>(y) * n + x] = v;
  }
};

inline MarkerSet square_around(double cr, double cc, double half) {
  const int r = static_cast<int>(std::lround(cr)), c = static_cast<int>(std::lround(cc));
  const int h = std::max(1, static_cast<int>(std::floor(half)));
  return MarkerSet({{r - h, c - h}, {r - h, c + h}, {r + h, c + h}, {r + h, c - h}});
}

}  // namespace detail

inline Sample generate(const Params& p) {
  if (p.size < 16 || p.size % 8 != 0)
    throw InputError("synth: size must be a multiple of 8 and at least 16, got " + std::to_string(p.size));
  if (!(p.noise >= 0.0) || !std::isfinite(p.noise)) throw InputError("synth: noise must be >= 0");
  if (!(p.distractor >= 0.0 && p.distractor <= 1.0)) throw InputError("synth: distractor intensity must lie in [0,1]");

  const int n = p.size;
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> jitter(-0.08 * n, 0.08 * n);
  detail::Canvas cv(n);
  MarkerSet markers;

  switch (p.kind) {
    case Kind::disc: {
      const double r = 0.3 * n, cr = 0.5 * n + jitter(rng), cc = 0.5 * n + jitter(rng);
      cv.disc(cv.target, cr, cc, r);
      markers = detail::square_around(cr, cc, r / 3);
      break;
    }
    case Kind::disc_notch: {
      const double r = 0.34 * n, cr = 0.5 * n + 0.5 * jitter(rng), cc = 0.5 * n + 0.5 * jitter(rng);
      cv.disc(cv.target, cr, cc, r);
      // A thin slot cut from the right-hand rim towards the centre.
      const int half = std::max(1, n / 32);
      const int row = static_cast<int>(std::lround(cr));
      cv.box(cv.target, row - half, row + half, static_cast<int>(std::lround(cc + 0.25 * r)), n, 0.0);
      markers = detail::square_around(cr, cc - r / 3, r / 4);
      break;
    }
    case Kind::two_object: {
      // Target disc on one half, a distractor square on the other.
      const bool left = std::bernoulli_distribution(0.5)(rng);
      const double r = 0.18 * n;
      const double cr = 0.5 * n + jitter(rng), cc = (left ? 0.27 : 0.73) * n + 0.3 * jitter(rng);
      const double dr = 0.5 * n + jitter(rng), dc = (left ? 0.73 : 0.27) * n + 0.3 * jitter(rng);
      const int s = static_cast<int>(std::lround(0.16 * n));
      cv.disc(cv.target, cr, cc, r);
      cv.box(cv.other, static_cast<int>(dr) - s, static_cast<int>(dr) + s, static_cast<int>(dc) - s,
             static_cast<int>(dc) + s, 1.0);
      markers = detail::square_around(cr, cc, r / 3);
      break;
    }
  }

  std::normal_distribution<double> noise(0.0, p.noise > 0.0 ? p.noise : 1.0);
  std::vector<double> clean(cv.target.size()), noisy(cv.target.size());
  const auto [background, object] = levels(p.kind);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    double v = background;
    if (cv.other[i] > 0.0) v = p.distractor;
    if (cv.target[i] > 0.0) v = object;
    clean[i] = v;
    noisy[i] = p.noise > 0.0 ? std::clamp(v + noise(rng), 0.0, 1.0) : v;
  }
  return Sample{Image(n, n, std::move(noisy)), Image(n, n, std::move(clean)),
                ScalarField(n, n, cv.target, FieldKind::mask), std::move(markers)};
}

/// Writes <dir>/<stem>.pgm, <dir>/<stem>.json and <dir>/gt/<stem>.pgm.
inline void write_sample(const Sample& s, const std::filesystem::path& dir, const std::string& stem) {
  save_pgm(s.image, dir / (stem + ".pgm"));
  save_markers(s.markers, dir / (stem + ".json"));
  save_pgm(s.gt, dir / "gt" / (stem + ".pgm"));
}

}  // namespace selseg::synth
