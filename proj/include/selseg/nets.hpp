#pragma once

// The two segmentation networks and their training loops.
//   VM net:  (f, G) -> u_vm, G being the marker mask or the geodesic distance
//   DIP net: fixed noise z (+ per-epoch perturbation) -> u_dip
// Trained jointly on u = u_vm * u_dip; only the VM net is kept for inference.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "selseg/autodiff.hpp"
#include "selseg/error.hpp"
#include "selseg/fidelity.hpp"
#include "selseg/image.hpp"

namespace selseg::nets {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class Method { m1, m2, m3, m4, dip_like };

inline Method parse_method(const std::string& s) {
  if (s == "m1") return Method::m1;
  if (s == "m2") return Method::m2;
  if (s == "m3") return Method::m3;
  if (s == "m4") return Method::m4;
  if (s == "dip") return Method::dip_like;
  throw InputError("unknown network method '" + s + "' (expected m1, m2, m3, m4 or dip)");
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::m1: return "m1";
    case Method::m2: return "m2";
    case Method::m3: return "m3";
    case Method::m4: return "m4";
    case Method::dip_like: return "dip";
  }
  return "unknown";
}

inline bool uses_distance_input(Method m) { return m == Method::m4; }
inline bool is_combined(Method m) { return m == Method::m3 || m == Method::m4; }

inline constexpr int kNoiseChannels = 32;
inline constexpr int kLevels = 3;
inline constexpr int kWidths[kLevels] = {16, 32, 64};

/// Three-level encoder-decoder with skip connections and a sigmoid head.
class UNet {
 public:
  UNet() = default;

  UNet(int in_channels, std::uint64_t seed) : in_(in_channels) {
    if (in_channels < 1) throw InputError("UNet: need at least one input channel");
    std::mt19937_64 rng(seed);
    int c = in_channels;
    for (int l = 0; l < kLevels; ++l) {
      add_conv("enc" + std::to_string(l) + ".a", 3, c, kWidths[l], rng);
      add_conv("enc" + std::to_string(l) + ".b", 3, kWidths[l], kWidths[l], rng);
      c = kWidths[l];
    }
    for (int l = kLevels - 2; l >= 0; --l) {
      add_conv("dec" + std::to_string(l) + ".a", 3, kWidths[l] + kWidths[l + 1], kWidths[l], rng);
      add_conv("dec" + std::to_string(l) + ".b", 3, kWidths[l], kWidths[l], rng);
    }
    add_conv("head.k", 1, kWidths[0], 1, rng);
    params_.emplace_back("head.b", Tensor({1}));
  }

  int in_channels() const { return in_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::vector<Parameter*> param_ptrs() {
    std::vector<Parameter*> out;
    for (Parameter& p : params_) out.push_back(&p);
    return out;
  }

  /// x: [N,H,W,in] with H, W divisible by 8. With `train` the weights are
  /// recorded as parameters and receive gradients.
  Var forward(Tape& t, Var x, bool train) {
    if (!train) return infer(t, x);
    std::size_t next = 0;
    return run(x, [&] { return t.parameter(params_[next++]); });
  }

  /// Forward pass with the weights as constants; safe on a shared net.
  Var infer(Tape& t, Var x) const {
    std::size_t next = 0;
    return run(x, [&] { return t.constant(params_[next++].value); });
  }

  ad::NamedTensors export_weights(const std::string& prefix) const {
    ad::NamedTensors out;
    for (const Parameter& p : params_) out.emplace_back(prefix + p.name, p.value);
    return out;
  }

  void import_weights(const ad::NamedTensors& all, const std::string& prefix) {
    for (Parameter& p : params_) {
      const Tensor* found = nullptr;
      for (const auto& [name, t] : all)
        if (name == prefix + p.name) found = &t;
      if (!found) throw InputError("checkpoint is missing tensor " + prefix + p.name);
      if (found->shape != p.value.shape)
        throw InputError("checkpoint tensor " + prefix + p.name + " has shape " + ad::shape_str(found->shape) +
                         ", expected " + ad::shape_str(p.value.shape));
      p.value = *found;
    }
  }

 private:
  template <class NextWeight>
  Var run(Var x, NextWeight w) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(3) != in_)
      throw InputError("UNet: expected [N,H,W," + std::to_string(in_) + "] input, got " + ad::shape_str(xv.shape));
    if (xv.dim(1) % 8 || xv.dim(2) % 8)
      throw InputError("UNet: height and width must be divisible by 8, got " + ad::shape_str(xv.shape));
    auto block = [&](Var h) {
      h = ad::leaky_relu(ad::instance_norm(ad::conv2d(h, w())));
      return ad::leaky_relu(ad::instance_norm(ad::conv2d(h, w())));
    };
    std::vector<Var> skips;
    Var h = x;
    for (int l = 0; l < kLevels; ++l) {
      if (l > 0) h = ad::avg_downsample(h);
      h = block(h);
      skips.push_back(h);
    }
    for (int l = kLevels - 2; l >= 0; --l) h = block(ad::concat_channels(skips[l], ad::bilinear_upsample(h)));
    Var k = w();
    Var b = w();
    return ad::sigmoid(ad::add_channel_bias(ad::conv2d(h, k), b));
  }

  // Uniform in +-sqrt(6 / fan_in).
  void add_conv(const std::string& name, int k, int cin, int cout, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (k * k * cin));
    std::uniform_real_distribution<double> U(-bound, bound);
    Tensor t({k, k, cin, cout});
    for (double& v : t.data) v = U(rng);
    params_.emplace_back(name, std::move(t));
  }

  int in_ = 0;
  std::vector<Parameter> params_;
};

inline void check_divisible(int h, int w) {
  if (h % 8 || w % 8)
    throw InputError("network input must be divisible by 8, got " + std::to_string(h) + "x" + std::to_string(w));
}

inline UNet build_vm_net(int h, int w, std::uint64_t seed) {
  check_divisible(h, w);
  return UNet(2, seed);
}

inline UNet build_dip_net(int h, int w, std::uint64_t seed) {
  check_divisible(h, w);
  return UNet(kNoiseChannels, seed);
}

/// Fixed per-image DIP input z ~ U(0, 0.1).
struct NoiseInput {
  Tensor base;
  double perturb_sigma = 0.1;
};

inline NoiseInput draw_noise(int h, int w, double sigma, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 0.1);
  NoiseInput z{Tensor({1, h, w, kNoiseChannels}), sigma};
  for (double& v : z.base.data) v = U(rng);
  return z;
}

/// z + zhat with zhat ~ N(0, sigma) drawn fresh from rng.
inline Tensor perturbed(const NoiseInput& z, std::mt19937_64& rng) {
  Tensor out = z.base;
  if (z.perturb_sigma > 0.0) {
    std::normal_distribution<double> N(0.0, z.perturb_sigma);
    for (double& v : out.data) v += N(rng);
  }
  return out;
}

inline Tensor to_tensor(const Grid& g) {
  return Tensor({1, g.height(), g.width(), 1}, std::vector<double>(g.values().begin(), g.values().end()));
}

inline ScalarField to_label(const Tensor& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(3) != 1) throw InputError("to_label: expected [1,H,W,1]");
  return ScalarField(t.dim(1), t.dim(2), t.data, FieldKind::relaxed_label);
}

/// VM input: image and geometry stacked as two channels.
inline Tensor vm_input(const Grid& f, const Grid& g) {
  if (!f.same_shape(g)) throw InputError("vm_input: image and geometry differ in shape");
  Tensor x({1, f.height(), f.width(), 2});
  for (std::size_t i = 0; i < f.size(); ++i) {
    x.data[2 * i] = f[i];
    x.data[2 * i + 1] = g[i];
  }
  return x;
}

struct Combined {
  Var u, u_vm, u_dip;
};

inline Combined forward_combined(Tape& t, UNet& vm, UNet& dip, const Tensor& vm_in, const Tensor& z, bool train) {
  Var u_vm = vm.forward(t, t.constant(vm_in), train);
  Var u_dip = dip.forward(t, t.constant(z), train);
  if (u_vm.shape() != u_dip.shape())
    throw InputError("forward_combined: VM output " + ad::shape_str(u_vm.shape()) + " vs DIP output " +
                     ad::shape_str(u_dip.shape()));
  return {ad::hadamard(u_vm, u_dip), u_vm, u_dip};
}

inline Tensor weight_tensor(const FidelityBundle& b, double lambda, double theta) {
  return Tensor({1, b.height(), b.width(), 1}, data_weight(b, lambda, theta));
}

/// lambda<Phi,u> + theta<D_G,u> + 1/2 mean((u_dip - u_vm)^2), pixel means.
inline Var loss_proposed(Var u, Var u_vm, Var u_dip, const FidelityBundle& b, double lambda, double theta) {
  Var data = ad::weighted_pixel_mean(u, weight_tensor(b, lambda, theta));
  Var sim = ad::scale(ad::pixel_mean(ad::square(ad::sub(u_dip, u_vm))), 0.5);
  return ad::add(data, sim);
}

/// mu<g,|grad u|_eps> + lambda<Phi,u> + theta<D_G,u>, pixel means.
inline Var loss_baseline(Var u, const FidelityBundle& b, double mu, double lambda, double theta) {
  Var data = ad::weighted_pixel_mean(u, weight_tensor(b, lambda, theta));
  if (mu == 0.0) return data;
  return ad::add(data, ad::scale(ad::smooth_tv(u, to_tensor(b.edge)), mu));
}

struct TrainConfig {
  double lambda = 2.0;
  double theta = 1.0;
  double mu = 1.0;
  int epochs = 300;
  int early_stop_epoch = 300;
  double lr = 1e-3;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  FidelityParams fidelity;

  int effective_epochs() const { return std::max(0, std::min(epochs, early_stop_epoch)); }
};

struct TrainSample {
  Image image;
  MarkerSet markers;
};

struct TrainRun {
  Method method = Method::m1;
  int epochs = 0;
  int early_stop_epoch = 0;
  std::vector<double> loss_trace;        // summed over images, per epoch
  std::vector<double> similarity_trace;  // mean (u_dip - u_vm)^2, combined methods only
  UNet vm;
  std::optional<UNet> dip;
  std::optional<ScalarField> output;  // DIP-like fits only
};

/// Network geometry input G for a method: the marker mask, or D_G for M4.
inline ScalarField geometry_input(Method m, const FidelityBundle& b, const MarkerSet& markers) {
  if (uses_distance_input(m)) return b.dist;
  return rasterize_polygon(markers, b.height(), b.width());
}

namespace detail {

inline void check_finite_loss(double v, int epoch) {
  if (!std::isfinite(v)) throw NumericalError("training loss became non-finite at epoch " + std::to_string(epoch));
}

}  // namespace detail

/// Independent generator seeds for each random stream of a run.
enum class Stream : std::uint64_t { vm_init = 1, dip_init = 2, noise = 3 };

inline std::uint64_t derive_seed(std::uint64_t seed, Stream s) {
  return seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(s);
}

/// Trains M1-M4 on all samples: one Adam step per image per epoch.
inline TrainRun train(const std::vector<TrainSample>& samples, Method method, const TrainConfig& cfg) {
  if (method == Method::dip_like) throw InputError("train: the DIP-like method fits single images (fit_dip_single)");
  if (samples.empty()) throw InputError("train: no training images");
  const int h = samples[0].image.height(), w = samples[0].image.width();
  for (const TrainSample& s : samples) {
    if (s.image.height() != h || s.image.width() != w)
      throw InputError("train: all images must share one size (" + std::to_string(h) + "x" + std::to_string(w) +
                       "), got " + std::to_string(s.image.height()) + "x" + std::to_string(s.image.width()));
    s.markers.check_bounds(h, w);
  }
  check_divisible(h, w);

  TrainRun run;
  run.method = method;
  run.early_stop_epoch = cfg.early_stop_epoch;
  run.vm = build_vm_net(h, w, derive_seed(cfg.seed, Stream::vm_init));
  const bool combined = is_combined(method);
  if (combined) run.dip = build_dip_net(h, w, derive_seed(cfg.seed, Stream::dip_init));

  struct Prepared {
    FidelityBundle bundle;
    Tensor vm_in;
    NoiseInput z;
  };
  std::mt19937_64 noise_rng(derive_seed(cfg.seed, Stream::noise));
  std::vector<Prepared> prep;
  for (const TrainSample& s : samples) {
    FidelityBundle b = build_bundle(s.image, s.markers, cfg.fidelity);
    Tensor in = vm_input(s.image, geometry_input(method, b, s.markers));
    NoiseInput z = combined ? draw_noise(h, w, cfg.noise_sigma, noise_rng) : NoiseInput{};
    prep.push_back({std::move(b), std::move(in), std::move(z)});
  }

  std::vector<Parameter*> params = run.vm.param_ptrs();
  if (combined)
    for (Parameter* p : run.dip->param_ptrs()) params.push_back(p);
  ad::AdamState adam;
  adam.cfg.lr = cfg.lr;
  const double mu = method == Method::m2 ? 0.0 : cfg.mu;

  const int epochs = cfg.effective_epochs();
  for (int e = 0; e < epochs; ++e) {
    double epoch_loss = 0.0, epoch_sim = 0.0;
    for (Prepared& p : prep) {
      ad::zero_grads(params);
      Tape t;
      Var loss;
      if (combined) {
        Combined c = forward_combined(t, run.vm, *run.dip, p.vm_in, perturbed(p.z, noise_rng), true);
        loss = loss_proposed(c.u, c.u_vm, c.u_dip, p.bundle, cfg.lambda, cfg.theta);
        double sim = 0.0;
        for (std::size_t i = 0; i < c.u.value().size(); ++i)
          sim += std::pow(c.u_dip.value().data[i] - c.u_vm.value().data[i], 2);
        epoch_sim += sim / static_cast<double>(c.u.value().size());
      } else {
        Var u = run.vm.forward(t, t.constant(p.vm_in), true);
        loss = loss_baseline(u, p.bundle, mu, cfg.lambda, cfg.theta);
      }
      detail::check_finite_loss(loss.value().item(), e + 1);
      epoch_loss += loss.value().item();
      t.backward(loss);
      ad::adam_step(params, adam);
    }
    run.loss_trace.push_back(epoch_loss);
    if (combined) run.similarity_trace.push_back(epoch_sim / static_cast<double>(prep.size()));
    run.epochs = e + 1;
  }
  return run;
}

/// u = VM(f, G) for an already computed geometry field G.
inline ScalarField predict_field(const UNet& vm, const Image& f, const Grid& g) {
  check_divisible(f.height(), f.width());
  Tape t;
  Var u = vm.infer(t, t.constant(vm_input(f, g)));
  if (!u.value().all_finite()) throw NumericalError("predict: network output is non-finite");
  return to_label(u.value());
}

/// u = VM(f, G) with frozen weights.
inline ScalarField predict(const UNet& vm, const Image& f, const MarkerSet& markers, Method method,
                           const FidelityParams& fp = {}) {
  if (method == Method::dip_like) throw InputError("predict: the DIP-like method has no reusable network");
  check_divisible(f.height(), f.width());
  markers.check_bounds(f.height(), f.width());
  ScalarField g = uses_distance_input(method) ? geodesic_from_markers(f, markers, fp.geodesic)
                                              : rasterize_polygon(markers, f.height(), f.width());
  return predict_field(vm, f, g);
}

/// Fits a fresh DIP net to one image by minimising the data energy alone;
/// the fixed epoch budget is the only regulariser.
inline TrainRun fit_dip_single(const Image& f, const MarkerSet& markers, const TrainConfig& cfg) {
  check_divisible(f.height(), f.width());
  const FidelityBundle b = build_bundle(f, markers, cfg.fidelity);
  const Tensor weight = weight_tensor(b, cfg.lambda, cfg.theta);

  TrainRun run;
  run.method = Method::dip_like;
  run.early_stop_epoch = cfg.early_stop_epoch;
  run.vm = UNet();
  run.dip = build_dip_net(f.height(), f.width(), derive_seed(cfg.seed, Stream::dip_init));
  std::mt19937_64 noise_rng(derive_seed(cfg.seed, Stream::noise));
  const NoiseInput z = draw_noise(f.height(), f.width(), cfg.noise_sigma, noise_rng);

  std::vector<Parameter*> params = run.dip->param_ptrs();
  ad::AdamState adam;
  adam.cfg.lr = cfg.lr;
  const int epochs = cfg.effective_epochs();
  for (int e = 0; e < epochs; ++e) {
    ad::zero_grads(params);
    Tape t;
    Var u = run.dip->forward(t, t.constant(perturbed(z, noise_rng)), true);
    Var loss = ad::weighted_pixel_mean(u, weight);
    detail::check_finite_loss(loss.value().item(), e + 1);
    run.loss_trace.push_back(loss.value().item());
    t.backward(loss);
    ad::adam_step(params, adam);
    run.epochs = e + 1;
  }
  // The reported fit is the network on the unperturbed input.
  Tape t;
  run.output = to_label(run.dip->forward(t, t.constant(z.base), false).value());
  return run;
}

}  // namespace selseg::nets
