#pragma once

// Per-pixel data terms of the selective model: the edge detector g, the
// two-region fitting term Phi, and the linear data energy
//   E(u) = mean((lambda * Phi + theta * D_G) * u).

#include <algorithm>
#include <cmath>
#include <vector>

#include "selseg/error.hpp"
#include "selseg/geodesic.hpp"
#include "selseg/image.hpp"

namespace selseg {

struct FidelityParams {
  double iota = 100.0;
  GeodesicParams geodesic;
};

/// Phi, D_G, g and the region means for one image and marker set.
struct FidelityBundle {
  ScalarField phi;
  ScalarField dist;
  ScalarField edge;
  double c1 = 0.0;
  double c2 = 0.0;

  int height() const { return phi.height(); }
  int width() const { return phi.width(); }

  void validate() const {
    detail::require(phi.same_shape(dist) && phi.same_shape(edge),
                    "fidelity bundle fields differ in shape");
    detail::require(phi.kind() == FieldKind::fidelity && dist.kind() == FieldKind::distance &&
                        edge.kind() == FieldKind::edge,
                    "fidelity bundle field kinds are wrong");
  }
};

/// g = 1 / (1 + iota * |grad f|^2)
inline ScalarField edge_detector(const Image& f, double iota) {
  if (iota < 0.0) throw InputError("edge_detector: iota must be nonnegative");
  const ScalarField mag = gradient_magnitude(f);
  std::vector<double> g(f.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 1.0 / (1.0 + iota * mag[i] * mag[i]);
  return ScalarField(f.height(), f.width(), std::move(g), FieldKind::edge);
}

struct ChanVeseTerm {
  ScalarField phi;
  double c1 = 0.0;
  double c2 = 0.0;
};

/// (f - c1)^2 - (f - c2)^2 scaled by its max magnitude (zero when flat),
/// with c1 the mean inside the marker polygon and c2 the mean outside.
/// Negative where a pixel looks like the marked object.
inline ChanVeseTerm chanvese_phi(const Image& f, const MarkerSet& markers) {
  const ScalarField inside = rasterize_polygon(markers, f.height(), f.width());
  if (inside.count_nonzero() == inside.size())
    throw InputError("chanvese_phi: marker polygon covers the whole image");
  std::vector<double> outside_d(inside.size());
  for (std::size_t i = 0; i < outside_d.size(); ++i) outside_d[i] = 1.0 - inside[i];
  const ScalarField outside(f.height(), f.width(), std::move(outside_d), FieldKind::mask);

  ChanVeseTerm t;
  t.c1 = region_mean(f, inside);
  t.c2 = region_mean(f, outside);
  std::vector<double> phi(f.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double a = f[i] - t.c1, b = f[i] - t.c2;
    phi[i] = a * a - b * b;
    peak = std::max(peak, std::abs(phi[i]));
  }
  // Below this the term is round-off from c1 ~= c2; rescaling would blow
  // it up to +-1.
  constexpr double kFlat = 1e-12;
  for (double& v : phi) v = peak > kFlat ? v / peak : 0.0;
  t.phi = ScalarField(f.height(), f.width(), std::move(phi), FieldKind::fidelity);
  return t;
}

inline FidelityBundle build_bundle(const Image& f, const MarkerSet& markers,
                                   const FidelityParams& p = {}) {
  ChanVeseTerm cv = chanvese_phi(f, markers);
  FidelityBundle b{std::move(cv.phi), geodesic_from_markers(f, markers, p.geodesic),
                   edge_detector(f, p.iota), cv.c1, cv.c2};
  return b;
}

/// Pointwise weight lambda * Phi + theta * D_G of the linear data term.
inline std::vector<double> data_weight(const FidelityBundle& b, double lambda, double theta) {
  std::vector<double> w(b.phi.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = lambda * b.phi[i] + theta * b.dist[i];
  return w;
}

inline double data_energy(const Grid& u, const FidelityBundle& b, double lambda, double theta) {
  detail::require(u.same_shape(b.phi) && u.same_shape(b.dist), "data_energy: shape mismatch");
  detail::require(lambda >= 0.0 && theta >= 0.0, "data_energy: weights must be nonnegative");
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    acc += (lambda * b.phi[i] + theta * b.dist[i]) * u[i];
  return acc / static_cast<double>(u.size());
}

}  // namespace selseg
