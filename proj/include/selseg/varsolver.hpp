#pragma once

// Explicitly regularised baselines: the linear selective data term plus
// total variation or Euler's elastica, minimised over u in [0,1] by ADMM.
//
// Discretisation: forward differences with Neumann boundary for grad u, the
// matching backward-difference divergence, and all integrals as pixel means.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <vector>

#include "selseg/error.hpp"
#include "selseg/fidelity.hpp"
#include "selseg/image.hpp"

namespace selseg {

struct AdmmConfig {
  double mu = 1.0;          // TV weight
  double alpha = 1.0;       // elastica length weight
  double beta = 1.0;        // elastica curvature weight
  double rho = 1.0;         // penalty on p = grad u
  double rho_n = 1.0;       // penalty tying n to the unit normal
  int max_iter = 500;
  double tol = 1e-5;        // relative u-change stopping threshold
  double gamma = 0.5;
  int gs_sweeps = 10;       // projected Gauss-Seidel sweeps per u-update
  int normal_steps = 10;    // gradient steps per n-update
  double eps_curv = 1e-4;
  bool edge_weighted = false;  // scale the TV weight by g pixelwise
  double time_budget_s = 0.0;  // <= 0 disables the wall-clock check

  void validate() const {
    detail::require(rho > 0.0 && rho_n > 0.0, "admm: rho must be positive");
    detail::require(max_iter >= 1, "admm: max_iter must be >= 1");
    detail::require(tol > 0.0, "admm: tol must be positive");
    detail::require(gamma > 0.0 && gamma < 1.0, "admm: gamma must lie in (0,1)");
    detail::require(mu >= 0.0 && alpha >= 0.0 && beta >= 0.0,
                    "admm: regulariser weights must be nonnegative");
    detail::require(gs_sweeps >= 1 && normal_steps >= 0, "admm: bad inner iteration counts");
    detail::require(eps_curv > 0.0, "admm: eps_curv must be positive");
  }
};

struct SolveReport {
  ScalarField u;
  std::vector<double> energy_trace;
  int iterations = 0;
  bool converged = false;
};

/// Vector field on the pixel grid (one component per axis).
struct VecField {
  std::vector<double> x;  // along columns
  std::vector<double> y;  // along rows
  explicit VecField(std::size_t n = 0) : x(n, 0.0), y(n, 0.0) {}
};

namespace ops {

inline VecField grad(std::span<const double> u, int h, int w) {
  VecField g(u.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      g.x[i] = c + 1 < w ? u[i + 1] - u[i] : 0.0;
      g.y[i] = r + 1 < h ? u[i + w] - u[i] : 0.0;
    }
  return g;
}

/// Backward-difference divergence; equals -grad^T.
inline std::vector<double> div(const VecField& p, int h, int w) {
  std::vector<double> d(p.x.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      double v = 0.0;
      if (c + 1 < w) v += p.x[i];
      if (c > 0) v -= p.x[i - 1];
      if (r + 1 < h) v += p.y[i];
      if (r > 0) v -= p.y[i - w];
      d[i] = v;
    }
  return d;
}

/// Curvature div(grad u / |grad u|_eps).
inline std::vector<double> curvature(std::span<const double> u, int h, int w, double eps) {
  VecField n = grad(u, h, w);
  for (std::size_t i = 0; i < n.x.size(); ++i) {
    const double mag = std::sqrt(n.x[i] * n.x[i] + n.y[i] * n.y[i] + eps * eps);
    n.x[i] /= mag;
    n.y[i] /= mag;
  }
  return div(n, h, w);
}

}  // namespace ops

namespace detail {

inline void check_label_shape(const Grid& u, const FidelityBundle& b) {
  require(u.same_shape(b.phi), "energy: label and bundle shapes differ");
}

inline double mean_weighted_tv(std::span<const double> u, int h, int w,
                               std::span<const double> weight) {
  const VecField g = ops::grad(u, h, w);
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    acc += weight[i] * std::hypot(g.x[i], g.y[i]);
  return acc / static_cast<double>(u.size());
}

}  // namespace detail

/// Data term plus mu * mean(|grad u|) (times g when edge_weighted).
inline double tv_energy(const Grid& u, const FidelityBundle& b, double mu, double lambda,
                        double theta, bool edge_weighted = false) {
  detail::check_label_shape(u, b);
  std::vector<double> weight(u.size(), mu);
  if (edge_weighted)
    for (std::size_t i = 0; i < weight.size(); ++i) weight[i] *= b.edge[i];
  return data_energy(u, b, lambda, theta) +
         detail::mean_weighted_tv(u.values(), u.height(), u.width(), weight);
}

/// Data term plus mean((alpha + beta * kappa^2) |grad u|).
inline double elastica_energy(const Grid& u, const FidelityBundle& b, double alpha, double beta,
                              double lambda, double theta, double eps_curv = 1e-4) {
  detail::check_label_shape(u, b);
  const std::vector<double> k = ops::curvature(u.values(), u.height(), u.width(), eps_curv);
  std::vector<double> weight(u.size());
  for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = alpha + beta * k[i] * k[i];
  return data_energy(u, b, lambda, theta) +
         detail::mean_weighted_tv(u.values(), u.height(), u.width(), weight);
}

namespace detail {

// Projected Gauss-Seidel on
//   min_{u in [0,1]} <w, u> + rho/2 |grad u - q|^2,
// each coordinate set to its exact clamped 1-D minimiser.
inline void projected_gauss_seidel(std::vector<double>& u, const std::vector<double>& w,
                                   const VecField& q, double rho, int h, int width,
                                   int sweeps) {
  const std::vector<double> div_q = ops::div(q, h, width);
  for (int s = 0; s < sweeps; ++s) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < width; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * width + c;
        double nb = 0.0;
        int n = 0;
        if (c > 0) { nb += u[i - 1]; ++n; }
        if (c + 1 < width) { nb += u[i + 1]; ++n; }
        if (r > 0) { nb += u[i - width]; ++n; }
        if (r + 1 < h) { nb += u[i + width]; ++n; }
        // grad^T = -div, so the 1-D minimiser is (nb - div q - w/rho) / n.
        const double v = (nb - div_q[i] - w[i] / rho) / n;
        u[i] = std::clamp(v, 0.0, 1.0);
      }
  }
}

// d = shrink(v, t) isotropically, per pixel threshold t_i.
inline VecField shrink(const VecField& v, std::span<const double> t) {
  VecField d(v.x.size());
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const double mag = std::hypot(v.x[i], v.y[i]);
    if (mag > t[i]) {
      const double s = (mag - t[i]) / mag;
      d.x[i] = s * v.x[i];
      d.y[i] = s * v.y[i];
    }
  }
  return d;
}

inline double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// 3x3 box average applied `passes` times, edges replicated.
inline VecField box_blur(const VecField& v, int h, int w, int passes) {
  VecField cur = v;
  for (int k = 0; k < passes; ++k) {
    VecField next(cur.x.size());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double sx = 0.0, sy = 0.0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const std::size_t j = static_cast<std::size_t>(std::clamp(r + dr, 0, h - 1)) * w +
                                  std::clamp(c + dc, 0, w - 1);
            sx += cur.x[j];
            sy += cur.y[j];
          }
        const std::size_t i = static_cast<std::size_t>(r) * w + c;
        next.x[i] = sx / 9.0;
        next.y[i] = sy / 9.0;
      }
    cur = std::move(next);
  }
  return cur;
}

class Deadline {
 public:
  explicit Deadline(double seconds) {
    if (seconds > 0.0)
      end_ = std::chrono::steady_clock::now() +
             std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                 std::chrono::duration<double>(seconds));
  }
  void check() const {
    if (end_ && std::chrono::steady_clock::now() > *end_)
      throw BudgetExceeded("solve exceeded its time budget");
  }

 private:
  std::optional<std::chrono::steady_clock::time_point> end_;
};

inline void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite value");
}

// Shared outer loop. `regulariser_weight` returns the per-pixel shrinkage
// weight for this iteration (mu or mu*g for TV, alpha + beta*kappa^2 for
// elastica), given the previous p and the fresh grad u.
template <class WeightFn, class EnergyFn>
SolveReport run_admm(const FidelityBundle& b, const AdmmConfig& cfg, double lambda, double theta,
                     WeightFn&& regulariser_weight, EnergyFn&& energy) {
  b.validate();
  cfg.validate();
  require(lambda >= 0.0 && theta >= 0.0, "admm: lambda and theta must be nonnegative");
  const int h = b.height(), w = b.width();
  const std::size_t n = b.phi.size();
  const std::vector<double> data = data_weight(b, lambda, theta);
  const Deadline deadline(cfg.time_budget_s);

  std::vector<double> u(n, 0.5);
  VecField p(n), mult(n);
  SolveReport rep;
  for (int it = 0; it < cfg.max_iter; ++it) {
    deadline.check();
    const std::vector<double> u_prev = u;
    VecField q(n);
    for (std::size_t i = 0; i < n; ++i) {
      q.x[i] = p.x[i] - mult.x[i];
      q.y[i] = p.y[i] - mult.y[i];
    }
    projected_gauss_seidel(u, data, q, cfg.rho, h, w, cfg.gs_sweeps);

    const VecField gu = ops::grad(u, h, w);
    const std::vector<double> weight = regulariser_weight(p, gu);
    VecField v(n);
    std::vector<double> thresh(n);
    for (std::size_t i = 0; i < n; ++i) {
      v.x[i] = gu.x[i] + mult.x[i];
      v.y[i] = gu.y[i] + mult.y[i];
      thresh[i] = weight[i] / cfg.rho;
    }
    p = shrink(v, thresh);
    for (std::size_t i = 0; i < n; ++i) {
      mult.x[i] += gu.x[i] - p.x[i];
      mult.y[i] += gu.y[i] - p.y[i];
    }

    check_finite(u, "admm iterate");
    check_finite(mult.x, "admm multiplier");
    check_finite(mult.y, "admm multiplier");
    const ScalarField uf(h, w, u, FieldKind::relaxed_label);
    const double e = energy(uf);
    if (!std::isfinite(e)) throw NumericalError("admm: non-finite energy");
    rep.energy_trace.push_back(e);
    rep.iterations = it + 1;

    std::vector<double> du(n);
    for (std::size_t i = 0; i < n; ++i) du[i] = u[i] - u_prev[i];
    if (l2(du) <= cfg.tol * std::max(l2(u), 1e-12)) {
      rep.converged = true;
      break;
    }
  }
  rep.u = ScalarField(h, w, std::move(u), FieldKind::relaxed_label);
  return rep;
}

}  // namespace detail

/// TV model by ADMM with the splitting p = grad u.
inline SolveReport solve_tv_admm(const FidelityBundle& b, const AdmmConfig& cfg, double lambda,
                                 double theta) {
  std::vector<double> weight(b.phi.size(), cfg.mu);
  if (cfg.edge_weighted)
    for (std::size_t i = 0; i < weight.size(); ++i) weight[i] *= b.edge[i];
  auto weight_fn = [&](const VecField&, const VecField&) -> const std::vector<double>& {
    return weight;
  };
  return detail::run_admm(b, cfg, lambda, theta, weight_fn, [&](const ScalarField& u) {
    return tv_energy(u, b, cfg.mu, lambda, theta, cfg.edge_weighted);
  });
}

/// Elastica model by ADMM. p = grad u carries the usual scaled multiplier;
/// the normal field n is tied to the unit normal of the current iterate by a
/// quadratic penalty and relaxed towards small beta * |p| (div n)^2. Its
/// divergence, the curvature, sets the shrinkage weight alpha + beta*kappa^2.
///
/// The unit normal comes from grad u smoothed by two 3x3 box passes, so a
/// straight staircase edge reads as straight; curvature is only trusted where
/// the smoothed gradient is at least kEdgeGate, which keeps flat regions from
/// contributing normals of pure round-off.
inline SolveReport solve_elastica_admm(const FidelityBundle& b, const AdmmConfig& cfg,
                                       double lambda, double theta) {
  constexpr int kSmoothPasses = 2;
  constexpr double kEdgeGate = 0.1;
  const int h = b.height(), w = b.width();
  const std::size_t n = b.phi.size();
  VecField normal(n);

  auto weight_fn = [&](const VecField& p, const VecField& gu) {
    std::vector<double> weight(n, cfg.alpha);
    if (cfg.beta == 0.0) return weight;
    const VecField smooth = detail::box_blur(gu, h, w, kSmoothPasses);
    VecField target(n);
    std::vector<double> amp(n);
    double amp_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mag = std::sqrt(smooth.x[i] * smooth.x[i] + smooth.y[i] * smooth.y[i] +
                                   cfg.eps_curv * cfg.eps_curv);
      target.x[i] = smooth.x[i] / mag;
      target.y[i] = smooth.y[i] / mag;
      amp[i] = std::hypot(p.x[i], p.y[i]);
      amp_max = std::max(amp_max, amp[i]);
    }
    // |div|^2 <= 8 on this grid, so this step keeps the descent stable.
    const double step = 1.0 / (cfg.rho_n + 16.0 * cfg.beta * amp_max);
    for (int k = 0; k < cfg.normal_steps; ++k) {
      std::vector<double> kappa = ops::div(normal, h, w);
      for (std::size_t i = 0; i < n; ++i) kappa[i] *= amp[i];
      // grad of beta * sum amp (div n)^2 is -2 beta grad(amp * div n).
      const VecField gk = ops::grad(kappa, h, w);
      for (std::size_t i = 0; i < n; ++i) {
        normal.x[i] -= step * (-2.0 * cfg.beta * gk.x[i] + cfg.rho_n * (normal.x[i] - target.x[i]));
        normal.y[i] -= step * (-2.0 * cfg.beta * gk.y[i] + cfg.rho_n * (normal.y[i] - target.y[i]));
      }
    }
    const std::vector<double> kappa = ops::div(normal, h, w);
    for (std::size_t i = 0; i < n; ++i)
      if (std::hypot(smooth.x[i], smooth.y[i]) >= kEdgeGate)
        weight[i] += cfg.beta * kappa[i] * kappa[i];
    return weight;
  };

  return detail::run_admm(b, cfg, lambda, theta, weight_fn, [&](const ScalarField& u) {
    return elastica_energy(u, b, cfg.alpha, cfg.beta, lambda, theta, cfg.eps_curv);
  });
}

}  // namespace selseg
