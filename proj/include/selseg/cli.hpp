#pragma once

// The `selseg` command line: segment, train, synth, eval, serve.
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "selseg/config.hpp"
#include "selseg/csv.hpp"
#include "selseg/error.hpp"
#include "selseg/image_io.hpp"
#include "selseg/metrics.hpp"
#include "selseg/nets.hpp"
#include "selseg/pipeline.hpp"
#include "selseg/service.hpp"
#include "selseg/synth.hpp"

namespace selseg::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kInputError = 2;
inline constexpr int kNumericalError = 3;

namespace detail {

inline bool is_image(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" || ext == ".png";
}

inline ExperimentConfig config_from(const std::string& path, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

// Image files directly inside `dir`, keyed by stem.
inline std::map<std::string, fs::path> images_in(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image(e.path())) out[e.path().stem().string()] = e.path();
  return out;
}

inline std::string suffix_stem(const fs::path& p, const std::string& suffix) {
  const fs::path stem = p.stem();
  return stem.string() + suffix;
}

}  // namespace detail

struct SegmentArgs {
  std::string image, markers, method, weights, config, gt, out;
  std::optional<std::uint64_t> seed;
};

inline int cmd_segment(SegmentArgs a, std::ostream& out) {
  ExperimentConfig cfg = detail::config_from(a.config, a.seed);
  if (a.method.empty()) a.method = cfg.method;
  if (a.out.empty()) a.out = cfg.out_dir;
  if (a.out.empty()) throw InputError("segment: give --out or set out_dir in the config");
  const SegMethod method = parse_seg_method(a.method);
  if (needs_weights(method) && a.weights.empty())
    throw InputError(std::string("--method ") + a.method + " requires --weights");
  const Image f = load_image(a.image);
  const MarkerSet m = load_markers(a.markers);
  std::optional<Model> model;
  if (!a.weights.empty()) {
    if (!needs_weights(method)) throw InputError(std::string("--weights is only used by m1-m4, not ") + a.method);
    model = load_model(a.weights);
  }
  const Segmentation seg = segment(f, m, method, cfg, nullptr, model ? &*model : nullptr);

  const fs::path dir = a.out;
  const std::string stem = fs::path(a.image).stem().string();
  save_pgm(seg.mask, dir / (stem + "_mask.pgm"));
  save_pgm(seg.u, dir / (stem + "_u.pgm"));
  write_atomic(dir / (stem + "_trace.csv"), trace_csv(seg.trace, seg.trace_index, seg.trace_value));
  out << "method " << to_string(method) << ": " << seg.mask.count_nonzero() << " pixels, " << seg.iterations << ' '
      << seg.trace_index << "s\n";
  if (!a.gt.empty()) {
    const EvalResult r = aggregate({score(stem, seg.mask, load_mask(a.gt))});
    write_atomic(dir / (stem + "_metrics.csv"), eval_csv(r, to_string(method)));
    out << "dice " << r.dice << " jaccard " << r.jaccard << '\n';
  }
  return kOk;
}

struct TrainArgs {
  std::string method, data, config, out;
  std::optional<std::uint64_t> seed;
};

/// (image, markers) pairs matched by file stem; the gt/ subdirectory is ignored.
inline std::vector<nets::TrainSample> load_dataset(const fs::path& dir) {
  const auto images = detail::images_in(dir);
  if (images.empty()) throw InputError("no images in dataset directory " + dir.string());
  std::vector<nets::TrainSample> out;
  for (const auto& [stem, path] : images) {
    const fs::path markers = dir / (stem + ".json");
    if (!fs::exists(markers)) throw InputError("image " + path.string() + " has no markers file " + markers.string());
    out.push_back({load_image(path), load_markers(markers)});
  }
  return out;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const nets::Method method = nets::parse_method(a.method);
  if (method == nets::Method::dip_like) throw InputError("train: dip fits single images; use segment --method dip");
  const ExperimentConfig cfg = detail::config_from(a.config, a.seed);
  const std::string dir = a.data.empty() ? cfg.data_dir : a.data;
  if (dir.empty()) throw InputError("train: give --data or set data_dir in the config");
  const std::vector<nets::TrainSample> data = load_dataset(dir);
  const nets::TrainRun run = nets::train(data, method, cfg.train_config(false));
  const Model model = model_from_run(run, data[0].image.height(), data[0].image.width());
  const fs::path ckpt = a.out;
  save_model(model, ckpt);
  fs::path loss = ckpt;
  loss.replace_filename(detail::suffix_stem(ckpt, "_loss.csv"));
  write_atomic(loss, trace_csv(run.loss_trace, "epoch", "loss"));
  out << "trained " << nets::to_string(method) << " on " << data.size() << " images for " << run.epochs
      << " epochs\n";
  if (!run.loss_trace.empty()) out << "final loss " << run.loss_trace.back() << '\n';
  return kOk;
}

struct SynthArgs {
  std::string kind = "disc";
  int size = 64;
  double noise = 0.1;
  std::uint64_t seed = 0;
  int count = 1;
  std::string out;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.count < 1) throw InputError("--count must be at least 1");
  const synth::Kind kind = synth::parse_kind(a.kind);
  for (int i = 0; i < a.count; ++i) {
    const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(i);
    const synth::Sample s = synth::generate({kind, a.size, a.noise, seed});
    const std::string stem = std::string(synth::to_string(kind)) + "-" + std::to_string(seed);
    synth::write_sample(s, a.out, stem);
    out << "wrote " << (fs::path(a.out) / stem).string() << '\n';
  }
  return kOk;
}

struct EvalArgs {
  std::string pred, gt, out, method = "pred";
};

/// Masks in `pred` are matched to `gt` by stem; a trailing "_mask" is
/// dropped and "_u" heatmaps are skipped.
inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto gts = detail::images_in(a.gt);
  std::vector<ImageScore> scores;
  for (const auto& [stem, path] : detail::images_in(a.pred)) {
    std::string key = stem;
    if (key.ends_with("_u")) continue;
    if (key.ends_with("_mask")) key.resize(key.size() - 5);
    const auto it = gts.find(key);
    if (it == gts.end()) throw InputError("no ground truth for " + path.string() + " in " + a.gt);
    scores.push_back(score(key, load_mask(path), load_mask(it->second)));
  }
  if (scores.empty()) throw InputError("no predicted masks in " + a.pred);
  const EvalResult r = aggregate(std::move(scores));
  write_atomic(a.out, eval_csv(r, a.method));
  out << r.per_image.size() << " images: dice " << r.dice_stat.mean << " (std " << r.dice_stat.std << "), jaccard "
      << r.jaccard_stat.mean << " (std " << r.jaccard_stat.std << ")\n";
  return kOk;
}

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string weights, config, ui;
  int max_side = 512;
  int sessions = 32;
  double budget = 30.0;
};

inline int cmd_serve(const ServeArgs& a, std::ostream& out) {
  service::ServiceConfig sc;
  sc.defaults = detail::config_from(a.config, std::nullopt);
  sc.max_side = a.max_side;
  sc.max_sessions = static_cast<std::size_t>(std::max(1, a.sessions));
  sc.budget_s = a.budget;
  std::shared_ptr<const Model> model;
  if (!a.weights.empty()) model = std::make_shared<const Model>(load_model(a.weights));
  service::Service svc(sc, model);
  httplib::Server srv;
  svc.mount(srv);
  if (!a.ui.empty() && !srv.set_mount_point("/", a.ui)) throw InputError("cannot serve UI directory " + a.ui);
  out << "listening on http://" << a.host << ':' << a.port << '\n' << std::flush;
  if (!srv.listen(a.host, a.port)) throw InputError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return kOk;
}

/// Parses `args` (without the program name) and runs one command.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Selective segmentation: variational solvers, trainable networks and an HTTP service", "selseg"};
  app.require_subcommand(1);

  SegmentArgs seg;
  std::uint64_t seg_seed = 0;
  auto* s = app.add_subcommand("segment", "Segment one image with one method");
  s->add_option("--image", seg.image, "Input image (PGM or PNG)")->required();
  s->add_option("--markers", seg.markers, "Marker polygon as JSON [[row, col], ...]")->required();
  s->add_option("--method", seg.method, "tv, elastica, dip, m1, m2, m3 or m4 (default: config method)");
  s->add_option("--weights", seg.weights, "Checkpoint from `selseg train` (required for m1-m4)");
  s->add_option("--config", seg.config, "key = value configuration file");
  s->add_option("--gt", seg.gt, "Ground-truth mask; adds <stem>_metrics.csv");
  s->add_option("--seed", seg_seed, "Overrides the config seed");
  s->add_option("--out", seg.out,
                "Output directory for <stem>_mask.pgm, <stem>_u.pgm, <stem>_trace.csv (default: config out_dir)");

  TrainArgs tr;
  std::uint64_t tr_seed = 0;
  auto* t = app.add_subcommand("train", "Train a VM network (m1-m4) on a directory of image/marker pairs");
  t->add_option("--method", tr.method, "m1, m2, m3 or m4")->required();
  t->add_option("--data", tr.data, "Directory of <stem>.pgm|png with <stem>.json markers (default: config data_dir)");
  t->add_option("--config", tr.config, "key = value configuration file");
  t->add_option("--seed", tr_seed, "Overrides the config seed");
  t->add_option("--out", tr.out, "Checkpoint path; the loss trace goes to <stem>_loss.csv beside it")->required();

  SynthArgs sy;
  auto* y = app.add_subcommand("synth", "Write seeded synthetic fixtures");
  y->add_option("--kind", sy.kind, "disc, disc-notch or two-object")->capture_default_str();
  y->add_option("--size", sy.size, "Side length, a multiple of 8")->capture_default_str();
  y->add_option("--noise", sy.noise, "Gaussian noise standard deviation")->capture_default_str();
  y->add_option("--seed", sy.seed, "Seed of the first fixture")->capture_default_str();
  y->add_option("--count", sy.count, "Number of fixtures (seeds seed, seed+1, ...)")->capture_default_str();
  y->add_option("--out", sy.out, "Output directory (<kind>-<seed>.pgm/.json, gt/<kind>-<seed>.pgm)")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predicted masks against ground truth");
  e->add_option("--pred", ev.pred, "Directory of predicted masks")->required();
  e->add_option("--gt", ev.gt, "Directory of ground-truth masks")->required();
  e->add_option("--out", ev.out, "Report CSV (image,method,dice,jaccard + mean/std rows)")->required();
  e->add_option("--method", ev.method, "Method label written in the report")->capture_default_str();

  ServeArgs sv;
  auto* v = app.add_subcommand("serve", "Run the HTTP segmentation service");
  v->add_option("--host", sv.host, "Bind address")->capture_default_str();
  v->add_option("--port", sv.port, "TCP port")->capture_default_str();
  v->add_option("--weights", sv.weights, "Checkpoint enabling m1-m4");
  v->add_option("--config", sv.config, "Default parameters");
  v->add_option("--ui", sv.ui, "Directory of static UI files to serve at /");
  v->add_option("--max-side", sv.max_side, "Largest accepted image side")->capture_default_str();
  v->add_option("--sessions", sv.sessions, "Sessions kept before LRU eviction")->capture_default_str();
  v->add_option("--budget", sv.budget, "Per-request solver time budget in seconds")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kInputError;
  }

  try {
    if (s->parsed()) {
      if (s->count("--seed")) seg.seed = seg_seed;
      return cmd_segment(seg, out);
    }
    if (t->parsed()) {
      if (t->count("--seed")) tr.seed = tr_seed;
      return cmd_train(tr, out);
    }
    if (y->parsed()) return cmd_synth(sy, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (v->parsed()) return cmd_serve(sv, out);
  } catch (const InputError& ex) {
    err << "error: " << ex.what() << '\n';
    return kInputError;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumericalError;
  } catch (const BudgetExceeded& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumericalError;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kInputError;
  }
  return kInputError;
}

}  // namespace selseg::cli
