#pragma once

// One entry point for all seven segmentation methods, plus the on-disk
// form of a trained model. Shared by the command line and the HTTP service.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "selseg/autodiff.hpp"
#include "selseg/config.hpp"
#include "selseg/error.hpp"
#include "selseg/fidelity.hpp"
#include "selseg/metrics.hpp"
#include "selseg/nets.hpp"
#include "selseg/varsolver.hpp"

namespace selseg {

enum class SegMethod { tv, elastica, dip, m1, m2, m3, m4 };

inline SegMethod parse_seg_method(const std::string& s) {
  if (s == "tv") return SegMethod::tv;
  if (s == "elastica") return SegMethod::elastica;
  if (s == "dip") return SegMethod::dip;
  if (s == "m1") return SegMethod::m1;
  if (s == "m2") return SegMethod::m2;
  if (s == "m3") return SegMethod::m3;
  if (s == "m4") return SegMethod::m4;
  throw InputError("unknown method '" + s + "' (expected tv, elastica, dip, m1, m2, m3 or m4)");
}

inline const char* to_string(SegMethod m) {
  switch (m) {
    case SegMethod::tv: return "tv";
    case SegMethod::elastica: return "elastica";
    case SegMethod::dip: return "dip";
    case SegMethod::m1: return "m1";
    case SegMethod::m2: return "m2";
    case SegMethod::m3: return "m3";
    case SegMethod::m4: return "m4";
  }
  return "unknown";
}

/// m1-m4 run a trained VM net and need a checkpoint.
inline bool needs_weights(SegMethod m) {
  return m == SegMethod::m1 || m == SegMethod::m2 || m == SegMethod::m3 || m == SegMethod::m4;
}

inline nets::Method net_method(SegMethod m) {
  switch (m) {
    case SegMethod::m1: return nets::Method::m1;
    case SegMethod::m2: return nets::Method::m2;
    case SegMethod::m3: return nets::Method::m3;
    case SegMethod::m4: return nets::Method::m4;
    case SegMethod::dip: return nets::Method::dip_like;
    default: throw InputError(std::string("method ") + to_string(m) + " has no network");
  }
}

// ------------------------------------------------------------------ models

/// A trained VM net with the method it was trained for.
struct Model {
  nets::Method method = nets::Method::m1;
  int height = 0;
  int width = 0;
  nets::UNet vm;
  std::optional<nets::UNet> dip;
  std::vector<double> loss_trace;
};

inline Model model_from_run(const nets::TrainRun& run, int height, int width) {
  return Model{run.method, height, width, run.vm, run.dip, run.loss_trace};
}

inline ad::NamedTensors export_model(const Model& m) {
  ad::NamedTensors out;
  out.emplace_back("meta.method", ad::Tensor::scalar(static_cast<double>(m.method)));
  out.emplace_back("meta.height", ad::Tensor::scalar(m.height));
  out.emplace_back("meta.width", ad::Tensor::scalar(m.width));
  if (!m.loss_trace.empty())
    out.emplace_back("meta.loss_trace",
                     ad::Tensor({static_cast<int>(m.loss_trace.size())}, std::vector<double>(m.loss_trace)));
  for (auto& t : m.vm.export_weights("vm.")) out.push_back(std::move(t));
  if (m.dip)
    for (auto& t : m.dip->export_weights("dip.")) out.push_back(std::move(t));
  return out;
}

inline Model import_model(const ad::NamedTensors& all) {
  auto scalar = [&](const std::string& name) -> std::optional<double> {
    for (const auto& [n, t] : all)
      if (n == name) return t.item();
    return std::nullopt;
  };
  const auto method = scalar("meta.method"), h = scalar("meta.height"), w = scalar("meta.width");
  if (!method || !h || !w) throw InputError("checkpoint lacks model metadata (meta.method/height/width)");
  const int code = static_cast<int>(*method);
  if (code < 0 || code > static_cast<int>(nets::Method::m4) || code != *method)
    throw InputError("checkpoint has an unknown method code");
  Model m;
  m.method = static_cast<nets::Method>(code);
  m.height = static_cast<int>(*h);
  m.width = static_cast<int>(*w);
  m.vm = nets::build_vm_net(8, 8, 0);
  m.vm.import_weights(all, "vm.");
  bool has_dip = false;
  for (const auto& [n, t] : all) has_dip = has_dip || n.rfind("dip.", 0) == 0;
  if (has_dip) {
    m.dip = nets::build_dip_net(8, 8, 0);
    m.dip->import_weights(all, "dip.");
  }
  for (const auto& [n, t] : all)
    if (n == "meta.loss_trace") m.loss_trace = t.data;
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  write_atomic(path, ad::encode_checkpoint(export_model(m)));
}

inline Model load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("weights file not found: " + path.string());
  try {
    return import_model(ad::load_checkpoint(path));
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------ segmentation

struct Segmentation {
  ScalarField u;
  ScalarField mask;
  std::vector<double> trace;
  std::string trace_index = "iteration";
  std::string trace_value = "energy";
  int iterations = 0;
  double fields_seconds = 0.0;
  double solve_seconds = 0.0;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Runs `method` on f. `bundle` may be a cached Phi/D_G/g for these markers;
/// when null it is computed here. Network methods take `model`.
inline Segmentation segment(const Image& f, const MarkerSet& markers, SegMethod method, const ExperimentConfig& cfg,
                            const FidelityBundle* bundle = nullptr, const Model* model = nullptr) {
  cfg.validate();
  markers.check_bounds(f.height(), f.width());
  if (needs_weights(method)) {
    if (!model) throw InputError(std::string("method ") + to_string(method) + " requires trained weights");
    if (model->method != net_method(method))
      throw InputError(std::string("weights were trained for ") + nets::to_string(model->method) + ", not " +
                       to_string(method));
  }

  Segmentation out;
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<FidelityBundle> own;
  if (!bundle && method != SegMethod::dip) {
    own = build_bundle(f, markers, cfg.fidelity);
    bundle = &*own;
  }
  out.fields_seconds = detail::seconds_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  switch (method) {
    case SegMethod::tv:
    case SegMethod::elastica: {
      SolveReport r = method == SegMethod::tv ? solve_tv_admm(*bundle, cfg.admm, cfg.lambda, cfg.theta)
                                              : solve_elastica_admm(*bundle, cfg.admm, cfg.lambda, cfg.theta);
      out.u = std::move(r.u);
      out.trace = std::move(r.energy_trace);
      out.iterations = r.iterations;
      break;
    }
    case SegMethod::dip: {
      nets::TrainRun run = nets::fit_dip_single(f, markers, cfg.train_config(true));
      out.u = std::move(*run.output);
      out.trace = std::move(run.loss_trace);
      out.iterations = run.epochs;
      out.trace_index = "epoch";
      out.trace_value = "loss";
      break;
    }
    default: {
      const nets::Method nm = net_method(method);
      const ScalarField g = nets::uses_distance_input(nm) ? bundle->dist
                                                          : rasterize_polygon(markers, f.height(), f.width());
      out.u = nets::predict_field(model->vm, f, g);
      out.trace = model->loss_trace;
      out.iterations = static_cast<int>(model->loss_trace.size());
      out.trace_index = "epoch";
      out.trace_value = "loss";
      break;
    }
  }
  out.solve_seconds = detail::seconds_since(t1);
  out.mask = threshold_mask(out.u, cfg.admm.gamma);
  return out;
}

}  // namespace selseg
