#pragma once

// HTTP front for interactive segmentation. Sessions hold one image and the
// current marker polygon; Phi, D_G and g are cached per marker version.
//
//   POST /sessions                  image bytes (PGM/PNG) -> 201 {session_id, height, width}
//   GET  /sessions/{id}/markers     -> {markers, version}
//   PUT  /sessions/{id}/markers     [[row, col], ...] -> 204
//   POST /sessions/{id}/segment     {method, params} -> {mask (RLE), u (base64 PGM), timings, ...}

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "selseg/config.hpp"
#include "selseg/error.hpp"
#include "selseg/image_io.hpp"
#include "selseg/pipeline.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro clashes with
// Eigen parameter names.
#include <httplib.h>

namespace selseg::service {

using Runs = std::vector<std::array<std::size_t, 2>>;

/// [start, length] runs of ones over row-major order.
inline Runs rle_encode(const Grid& mask) {
  Runs runs;
  std::size_t i = 0;
  while (i < mask.size()) {
    if (mask[i] == 0.0) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < mask.size() && mask[i] != 0.0) ++i;
    runs.push_back({start, i - start});
  }
  return runs;
}

inline ScalarField rle_decode(const Runs& runs, int height, int width) {
  std::vector<double> d(static_cast<std::size_t>(height) * width, 0.0);
  for (const auto& [start, len] : runs) {
    if (start + len > d.size()) throw InputError("rle run exceeds the image");
    std::fill_n(d.begin() + static_cast<std::ptrdiff_t>(start), len, 1.0);
  }
  return ScalarField(height, width, std::move(d), FieldKind::mask);
}

struct ServiceConfig {
  int max_side = 512;
  std::size_t max_sessions = 32;
  double budget_s = 30.0;
  ExperimentConfig defaults;
};

struct Session {
  std::string id;
  Image image;
  std::optional<MarkerSet> markers;
  std::uint64_t version = 0;
  std::optional<FidelityBundle> fields;
  std::uint64_t fields_version = 0;
  std::mutex mu;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg = {}, std::shared_ptr<const Model> model = nullptr)
      : cfg_(std::move(cfg)), model_(std::move(model)), rng_(std::random_device{}()) {}

  void mount(httplib::Server& srv) {
    srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) { create(req, res); });
    srv.Get(R"(/sessions/([0-9a-f]+)/markers)",
            [this](const httplib::Request& req, httplib::Response& res) { get_markers(req, res); });
    srv.Put(R"(/sessions/([0-9a-f]+)/markers)",
            [this](const httplib::Request& req, httplib::Response& res) { put_markers(req, res); });
    srv.Post(R"(/sessions/([0-9a-f]+)/segment)",
             [this](const httplib::Request& req, httplib::Response& res) { run_segment(req, res); });
  }

  std::size_t session_count() const {
    std::lock_guard lock(map_mu_);
    return sessions_.size();
  }
  /// Number of Phi/D_G/g builds so far (cache misses).
  std::uint64_t field_builds() const { return field_builds_.load(); }

 private:
  static void reply_error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  }
  static void reply_json(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(map_mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return nullptr;
    lru_.splice(lru_.begin(), lru_, it->second.second);
    return it->second.first;
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    Image img;
    try {
      img = decode_image(req.body);
    } catch (const InputError& e) {
      return reply_error(res, 400, std::string("bad image: ") + e.what());
    }
    if (img.height() > cfg_.max_side || img.width() > cfg_.max_side)
      return reply_error(res, 413, "image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                                       " exceeds the " + std::to_string(cfg_.max_side) + " pixel limit");
    auto s = std::make_shared<Session>();
    s->image = std::move(img);
    {
      std::lock_guard lock(map_mu_);
      std::ostringstream id;
      id << std::hex << rng_() << rng_();
      s->id = id.str();
      lru_.push_front(s->id);
      sessions_[s->id] = {s, lru_.begin()};
      while (sessions_.size() > cfg_.max_sessions) {
        sessions_.erase(lru_.back());
        lru_.pop_back();
      }
    }
    reply_json(res, 201, {{"session_id", s->id}, {"height", s->image.height()}, {"width", s->image.width()}});
  }

  void get_markers(const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return reply_error(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    nlohmann::json pts = nlohmann::json::array();
    if (s->markers) pts = points_to_json(s->markers->points());
    reply_json(res, 200, {{"markers", pts}, {"version", s->version}});
  }

  void put_markers(const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return reply_error(res, 404, "unknown session");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      return reply_error(res, 400, "markers body is not valid JSON");
    }
    if (j.is_object() && j.contains("markers")) j = j["markers"];
    std::lock_guard lock(s->mu);
    try {
      MarkerSet m(points_from_json(j), s->image.height(), s->image.width());
      s->markers = std::move(m);
    } catch (const InputError& e) {
      return reply_error(res, 422, e.what());
    }
    ++s->version;
    s->fields.reset();
    res.status = 204;
  }

  void run_segment(const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    auto s = find(req.matches[1]);
    if (!s) return reply_error(res, 404, "unknown session");
    nlohmann::json body;
    try {
      body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      return reply_error(res, 400, "request body is not valid JSON");
    }
    if (!body.is_object() || !body.contains("method") || !body["method"].is_string())
      return reply_error(res, 400, "body must be an object with a string 'method'");

    SegMethod method;
    ExperimentConfig cfg = cfg_.defaults;
    cfg.admm.time_budget_s = cfg_.budget_s;
    try {
      method = parse_seg_method(body["method"].get<std::string>());
      if (body.contains("params")) apply_config(cfg, params_text(body["params"]), "params");
    } catch (const InputError& e) {
      return reply_error(res, 400, e.what());
    }

    std::lock_guard lock(s->mu);
    if (!s->markers) return reply_error(res, 409, "place markers first");
    if (needs_weights(method) && !model_)
      return reply_error(res, 409, std::string("method ") + to_string(method) + " needs a server-side checkpoint");

    try {
      bool cached = true;
      if (method != SegMethod::dip && (!s->fields || s->fields_version != s->version)) {
        s->fields = build_bundle(s->image, *s->markers, cfg.fidelity);
        s->fields_version = s->version;
        ++field_builds_;
        cached = false;
      }
      if (s->fields && s->fields_version != s->version) throw std::logic_error("stale fidelity cache");
      const Segmentation seg = segment(s->image, *s->markers, method, cfg,
                                       method == SegMethod::dip ? nullptr : &*s->fields, model_.get());
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& r : rle_encode(seg.mask)) runs.push_back({r[0], r[1]});
      reply_json(res, 200,
                 {{"method", to_string(method)},
                  {"height", seg.mask.height()},
                  {"width", seg.mask.width()},
                  {"mask", runs},
                  {"mask_population", seg.mask.count_nonzero()},
                  {"u", httplib::detail::base64_encode(encode_pgm(seg.u))},
                  {"iterations", seg.iterations},
                  {"markers_version", s->version},
                  {"fields_version", s->fields ? s->fields_version : s->version},
                  {"fields_cached", cached},
                  {"timings",
                   {{"fields_s", seg.fields_seconds},
                    {"solve_s", seg.solve_seconds},
                    {"total_s", detail::seconds_since(t0)}}}});
    } catch (const InputError& e) {
      reply_error(res, 400, e.what());
    } catch (const NumericalError& e) {
      reply_error(res, 500, std::string("numerical failure: ") + e.what());
    } catch (const BudgetExceeded& e) {
      reply_error(res, 500, std::string("time budget exceeded: ") + e.what());
    }
  }

  // {"lambda": 2, "edge_weighted": true} -> "lambda = 2\nedge_weighted = true\n"
  static std::string params_text(const nlohmann::json& params) {
    if (!params.is_object()) throw InputError("params must be an object");
    std::string text;
    for (const auto& [k, v] : params.items()) {
      if (k == "data_dir" || k == "out_dir" || k == "method")
        throw InputError("param '" + k + "' cannot be set per request");
      if (!(v.is_number() || v.is_boolean())) throw InputError("param '" + k + "' must be a number or boolean");
      text += k + " = " + v.dump() + "\n";
    }
    return text;
  }

  ServiceConfig cfg_;
  std::shared_ptr<const Model> model_;
  mutable std::mutex map_mu_;
  std::mt19937_64 rng_;
  std::list<std::string> lru_;
  std::map<std::string, std::pair<std::shared_ptr<Session>, std::list<std::string>::iterator>> sessions_;
  std::atomic<std::uint64_t> field_builds_{0};
};

}  // namespace selseg::service
