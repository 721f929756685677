#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "selseg/error.hpp"
#include "selseg/image.hpp"

namespace selseg {

inline constexpr double kDefaultGamma = 0.5;

/// Sigma = {x : u(x) > gamma}, strict inequality.
inline ScalarField threshold_mask(const Grid& u, double gamma = kDefaultGamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw InputError("threshold gamma must lie in (0,1)");
  std::vector<double> m(u.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = u[i] > gamma ? 1.0 : 0.0;
  return ScalarField(u.height(), u.width(), std::move(m), FieldKind::mask);
}

struct OverlapCounts {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t both = 0;
};

inline OverlapCounts overlap(const Grid& a, const Grid& b) {
  detail::require(a.same_shape(b), "mask shape mismatch");
  OverlapCounts n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0.0, ib = b[i] != 0.0;
    n.a += ia;
    n.b += ib;
    n.both += ia && ib;
  }
  return n;
}

// Both scores are 1 when both masks are empty.
inline double dice(const Grid& a, const Grid& b) {
  const OverlapCounts n = overlap(a, b);
  if (n.a + n.b == 0) return 1.0;
  return 2.0 * static_cast<double>(n.both) / static_cast<double>(n.a + n.b);
}

inline double jaccard(const Grid& a, const Grid& b) {
  const OverlapCounts n = overlap(a, b);
  const std::size_t uni = n.a + n.b - n.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(n.both) / static_cast<double>(uni);
}

struct ImageScore {
  std::string id;
  double dice = 0.0;
  double jaccard = 0.0;
};

struct SummaryStat {
  double mean = 0.0;
  double std = 0.0;
};

/// Population mean and standard deviation.
inline SummaryStat summarize(const std::vector<double>& xs) {
  SummaryStat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  for (double x : xs) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(xs.size()));
  return s;
}

struct EvalResult {
  double dice = 1.0;
  double jaccard = 1.0;
  SummaryStat dice_stat;
  SummaryStat jaccard_stat;
  std::vector<ImageScore> per_image;
};

inline ImageScore score(std::string id, const Grid& pred, const Grid& gt) {
  return {std::move(id), dice(pred, gt), jaccard(pred, gt)};
}

inline EvalResult aggregate(std::vector<ImageScore> scores) {
  EvalResult r;
  std::vector<double> d, j;
  for (const auto& s : scores) {
    d.push_back(s.dice);
    j.push_back(s.jaccard);
  }
  r.dice_stat = summarize(d);
  r.jaccard_stat = summarize(j);
  r.dice = r.dice_stat.mean;
  r.jaccard = r.jaccard_stat.mean;
  r.per_image = std::move(scores);
  return r;
}

/// CSV rows "image,method,dice,jaccard" followed by mean and std rows.
inline std::string eval_csv(const EvalResult& r, const std::string& method) {
  std::ostringstream out;
  out.precision(17);
  out << "image,method,dice,jaccard\n";
  for (const auto& s : r.per_image)
    out << s.id << ',' << method << ',' << s.dice << ',' << s.jaccard << '\n';
  out << "mean," << method << ',' << r.dice_stat.mean << ',' << r.jaccard_stat.mean << '\n';
  out << "std," << method << ',' << r.dice_stat.std << ',' << r.jaccard_stat.std << '\n';
  return out.str();
}

}  // namespace selseg
