#pragma once

// Experiment configuration and the generate / train / eval / sweep workflows
// behind the command-line tool.
//
// Config schema (unknown keys are rejected at every level):
//   {
//     "dataset": {"generator": "synthetic-gaussian", "n_train", "n_test", "seed"}
//              | {"generator": "toy-hierarchical", "dimension", "n", "ratio", "seed"}
//              | {"path": "<csv>"},
//     "model":   {"kind": "qr-linear" | "lu-linear" | "coupling-multiscale",
//                 "householders", "offset", "init_noise",
//                 "levels", "steps_per_level", "hidden", "log_scale_bound"},
//     "train":   {"iterations", "batch_size", "lr", "lr_schedule": "constant" | "cosine"},
//     "nd":      null | {"lambda", "p", "order", "distance"},
//     "eval":    {"orders": [...], "split": "test", "checkpoint": "<path>"},
//     "output_dir": "<dir>",
//     "seed": <int>,
//     "sweep":   {"grid": {"nd.lambda": [...], ...}, "seeds": [...], "report_k": [1, 2]}
//   }
// Orders are "identity", "reversed", "depth-reversed", "depth-forward",
// "random" or an explicit index array (rank -> latent index).

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "nestedflow/checkpoint.hpp"
#include "nestedflow/coupling.hpp"
#include "nestedflow/data.hpp"
#include "nestedflow/errors.hpp"
#include "nestedflow/eval.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/models.hpp"
#include "nestedflow/nested_dropout.hpp"
#include "nestedflow/optim.hpp"
#include "nestedflow/pca.hpp"

#ifndef NESTEDFLOW_BUILD_ID
#define NESTEDFLOW_BUILD_ID "unknown"
#endif

namespace nestedflow::experiment {

using nlohmann::json;

inline std::string build_id() { return NESTEDFLOW_BUILD_ID; }

/// splitmix64 step; derives independent streams from one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

struct DatasetSpec {
  enum class Source { synthetic, toy, file };
  Source source = Source::synthetic;
  std::size_t n_train = 10000;
  std::size_t n_test = 10000;
  std::size_t dimension = 16;
  std::size_t n = 5000;
  double ratio = 0.6;
  std::uint64_t seed = 0;
  std::string path;
};

struct ModelSpec {
  std::string kind = "qr-linear";
  std::size_t householders = 0;  ///< 0 means D
  bool offset = false;
  double init_noise = 1e-2;
  MultiScaleConfig multiscale;
};

struct NdSpec {
  double lambda = 20.0;
  double p = 0.33;
  json order = "default";
  Distance distance = Distance::per_dimension_mse;
};

struct EvalSpec {
  std::vector<json> orders;  ///< empty means model-dependent default
  std::string split = "test";
  std::optional<std::string> checkpoint;
};

struct SweepSpec {
  std::map<std::string, std::vector<json>> grid;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> report_k = {1, 2};
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig train;
  std::optional<NdSpec> nd;
  EvalSpec eval;
  std::string output_dir = "run";
  std::uint64_t seed = 0;
  std::optional<SweepSpec> sweep;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + "." + it.key() + ": unknown key");
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::size_t get_count(const json& j, const char* key, const std::string& where,
                             std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(where + "." + key + ": expected a nonnegative integer");
  return v.get<std::size_t>();
}

inline std::uint64_t get_seed(const json& j, const char* key, const std::string& where,
                              std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(where + "." + key + ": expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline void check_order_spec(const json& o, const std::string& where) {
  if (o.is_string()) {
    const auto s = o.get<std::string>();
    if (s != "identity" && s != "reversed" && s != "depth-reversed" && s != "depth-forward" &&
        s != "random" && s != "default")
      throw ConfigError(where + ": unknown order '" + s + "'");
    return;
  }
  if (o.is_array()) {
    for (const auto& x : o)
      if (!x.is_number_integer()) throw ConfigError(where + ": order entries must be integers");
    return;
  }
  throw ConfigError(where + ": order must be a name or an index array");
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  using detail::check_keys;
  using detail::get;
  using detail::get_count;
  ExperimentConfig c;
  check_keys(j, {"dataset", "model", "train", "nd", "eval", "output_dir", "seed", "sweep"},
             "config");
  c.seed = detail::get_seed(j, "seed", "config", 0);
  c.output_dir = get<std::string>(j, "output_dir", "config", c.output_dir);

  if (!j.contains("dataset")) throw ConfigError("config.dataset: required");
  {
    const json& d = j.at("dataset");
    const std::string w = "config.dataset";
    if (d.contains("path")) {
      check_keys(d, {"path"}, w);
      c.dataset.source = DatasetSpec::Source::file;
      c.dataset.path = get<std::string>(d, "path", w, "");
    } else {
      const std::string gen = get<std::string>(d, "generator", w, "");
      if (gen == "synthetic-gaussian") {
        check_keys(d, {"generator", "n_train", "n_test", "seed"}, w);
        c.dataset.source = DatasetSpec::Source::synthetic;
        c.dataset.n_train = get_count(d, "n_train", w, 10000);
        c.dataset.n_test = get_count(d, "n_test", w, 10000);
      } else if (gen == "toy-hierarchical") {
        check_keys(d, {"generator", "dimension", "n", "ratio", "seed"}, w);
        c.dataset.source = DatasetSpec::Source::toy;
        c.dataset.dimension = get_count(d, "dimension", w, 16);
        c.dataset.n = get_count(d, "n", w, 5000);
        c.dataset.ratio = get<double>(d, "ratio", w, 0.6);
        if (c.dataset.dimension == 0 || c.dataset.dimension % 4 || c.dataset.dimension > 64)
          throw ConfigError(w + ".dimension: must be a positive multiple of 4, at most 64");
      } else {
        throw ConfigError(w + ".generator: unknown generator '" + gen + "'");
      }
      c.dataset.seed = detail::get_seed(d, "seed", w, 0);
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    const std::string w = "config.model";
    c.model.kind = get<std::string>(m, "kind", w, c.model.kind);
    if (c.model.kind == "qr-linear") {
      check_keys(m, {"kind", "householders", "offset", "init_noise"}, w);
    } else if (c.model.kind == "lu-linear") {
      check_keys(m, {"kind", "offset", "init_noise"}, w);
    } else if (c.model.kind == "coupling-multiscale") {
      check_keys(m, {"kind", "levels", "steps_per_level", "hidden", "log_scale_bound"}, w);
    } else {
      throw ConfigError(w + ".kind: unknown model kind '" + c.model.kind + "'");
    }
    c.model.householders = get_count(m, "householders", w, 0);
    c.model.offset = get<bool>(m, "offset", w, false);
    c.model.init_noise = get<double>(m, "init_noise", w, 1e-2);
    c.model.multiscale.levels = get_count(m, "levels", w, 3);
    c.model.multiscale.steps_per_level = get_count(m, "steps_per_level", w, 4);
    c.model.multiscale.hidden = get_count(m, "hidden", w, 32);
    c.model.multiscale.log_scale_bound = get<double>(m, "log_scale_bound", w, 2.0);
    if (!(c.model.init_noise >= 0.0)) throw ConfigError(w + ".init_noise: must be nonnegative");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    const std::string w = "config.train";
    check_keys(t, {"iterations", "batch_size", "lr", "lr_schedule"}, w);
    c.train.iterations = get_count(t, "iterations", w, c.train.iterations);
    c.train.batch_size = get_count(t, "batch_size", w, c.train.batch_size);
    c.train.lr_initial = get<double>(t, "lr", w, c.train.lr_initial);
    const auto sched = get<std::string>(t, "lr_schedule", w, "constant");
    if (sched == "constant")
      c.train.lr_schedule = LrSchedule::constant;
    else if (sched == "cosine")
      c.train.lr_schedule = LrSchedule::cosine;
    else
      throw ConfigError(w + ".lr_schedule: expected 'constant' or 'cosine'");
    if (c.train.batch_size < 1) throw ConfigError(w + ".batch_size: must be at least 1");
    if (!(c.train.lr_initial > 0.0)) throw ConfigError(w + ".lr: must be positive");
  }

  if (j.contains("nd") && !j.at("nd").is_null()) {
    const json& n = j.at("nd");
    const std::string w = "config.nd";
    check_keys(n, {"lambda", "p", "order", "distance"}, w);
    NdSpec nd;
    nd.lambda = get<double>(n, "lambda", w, nd.lambda);
    nd.p = get<double>(n, "p", w, nd.p);
    if (n.contains("order")) nd.order = n.at("order");
    detail::check_order_spec(nd.order, w + ".order");
    const auto dist = get<std::string>(n, "distance", w, "per-dimension-mse");
    if (dist == "per-dimension-mse")
      nd.distance = Distance::per_dimension_mse;
    else if (dist == "squared-error")
      nd.distance = Distance::squared_error;
    else
      throw ConfigError(w + ".distance: expected 'per-dimension-mse' or 'squared-error'");
    if (!(nd.lambda >= 0.0)) throw ConfigError(w + ".lambda: must be nonnegative");
    if (!(nd.p > 0.0 && nd.p <= 1.0)) throw ConfigError(w + ".p: must lie in (0, 1]");
    c.nd = nd;
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    const std::string w = "config.eval";
    check_keys(e, {"orders", "split", "checkpoint"}, w);
    if (e.contains("orders")) {
      if (!e.at("orders").is_array()) throw ConfigError(w + ".orders: expected an array");
      for (const auto& o : e.at("orders")) {
        detail::check_order_spec(o, w + ".orders");
        c.eval.orders.push_back(o);
      }
    }
    c.eval.split = get<std::string>(e, "split", w, "test");
    if (c.eval.split != "train" && c.eval.split != "val" && c.eval.split != "test")
      throw ConfigError(w + ".split: expected train, val or test");
    if (e.contains("checkpoint")) c.eval.checkpoint = get<std::string>(e, "checkpoint", w, "");
  }

  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    const std::string w = "config.sweep";
    check_keys(s, {"grid", "seeds", "report_k"}, w);
    SweepSpec sw;
    if (s.contains("grid")) {
      if (!s.at("grid").is_object()) throw ConfigError(w + ".grid: expected an object");
      for (auto it = s.at("grid").begin(); it != s.at("grid").end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
          throw ConfigError(w + ".grid." + it.key() + ": expected a nonempty array");
        sw.grid[it.key()] = it.value().get<std::vector<json>>();
      }
    }
    sw.seeds = get<std::vector<std::uint64_t>>(s, "seeds", w, {});
    sw.report_k = get<std::vector<std::size_t>>(s, "report_k", w, sw.report_k);
    c.sweep = sw;
  }
  return c;
}

/// Canonical form with every default filled in.
inline json config_to_json(const ExperimentConfig& c) {
  json j;
  switch (c.dataset.source) {
    case DatasetSpec::Source::synthetic:
      j["dataset"] = {{"generator", "synthetic-gaussian"},
                      {"n_train", c.dataset.n_train},
                      {"n_test", c.dataset.n_test},
                      {"seed", c.dataset.seed}};
      break;
    case DatasetSpec::Source::toy:
      j["dataset"] = {{"generator", "toy-hierarchical"},
                      {"dimension", c.dataset.dimension},
                      {"n", c.dataset.n},
                      {"ratio", c.dataset.ratio},
                      {"seed", c.dataset.seed}};
      break;
    case DatasetSpec::Source::file:
      j["dataset"] = {{"path", c.dataset.path}};
      break;
  }
  json m = {{"kind", c.model.kind}};
  if (c.model.kind == "coupling-multiscale") {
    m["levels"] = c.model.multiscale.levels;
    m["steps_per_level"] = c.model.multiscale.steps_per_level;
    m["hidden"] = c.model.multiscale.hidden;
    m["log_scale_bound"] = c.model.multiscale.log_scale_bound;
  } else {
    if (c.model.kind == "qr-linear") m["householders"] = c.model.householders;
    m["offset"] = c.model.offset;
    m["init_noise"] = c.model.init_noise;
  }
  j["model"] = m;
  j["train"] = {{"iterations", c.train.iterations},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr_initial},
                {"lr_schedule", c.train.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"}};
  if (c.nd)
    j["nd"] = {{"lambda", c.nd->lambda},
               {"p", c.nd->p},
               {"order", c.nd->order},
               {"distance", c.nd->distance == Distance::per_dimension_mse ? "per-dimension-mse"
                                                                          : "squared-error"}};
  else
    j["nd"] = nullptr;
  json e = {{"orders", c.eval.orders}, {"split", c.eval.split}};
  if (c.eval.checkpoint) e["checkpoint"] = *c.eval.checkpoint;
  j["eval"] = e;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  if (c.sweep) {
    json g = json::object();
    for (const auto& [k, v] : c.sweep->grid) g[k] = v;
    j["sweep"] = {{"grid", g}, {"seeds", c.sweep->seeds}, {"report_k", c.sweep->report_k}};
  }
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Hash of the canonical config without its output location.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

inline Dataset materialize_dataset(const DatasetSpec& d, std::vector<std::string>* warnings) {
  switch (d.source) {
    case DatasetSpec::Source::synthetic:
      return gen_synthetic_gaussian(d.n_train, d.n_test, d.seed);
    case DatasetSpec::Source::toy:
      return gen_toy_hierarchical(d.dimension, d.n, d.seed, d.ratio);
    case DatasetSpec::Source::file: {
      if (!std::filesystem::exists(d.path))
        throw ConfigError("config.dataset.path: file not found: " + d.path);
      auto loaded = load_dataset(d.path);
      if (loaded.warning && warnings) warnings->push_back(*loaded.warning);
      return std::move(loaded.dataset);
    }
  }
  throw ConfigError("config.dataset: unsupported source");
}

inline FlowModel build_model(const ModelSpec& m, std::size_t dim, std::uint64_t seed) {
  const std::uint64_t s = derive_seed(seed, 1);
  if (m.kind == "qr-linear") return make_qr_flow(dim, s, m.householders, m.offset, m.init_noise);
  if (m.kind == "lu-linear") return make_lu_flow(dim, s, m.offset, m.init_noise);
  if (m.kind == "coupling-multiscale") return make_multiscale_coupling_flow(dim, m.multiscale, s);
  throw ConfigError("config.model.kind: unknown model kind '" + m.kind + "'");
}

inline std::string order_name(const json& spec) {
  if (spec.is_string()) return spec.get<std::string>();
  return "custom";
}

/// Resolves an order spec against a model. "default" is depth-reversed for
/// multi-scale flows and identity otherwise.
inline DropOrder resolve_order(const json& spec, const FlowModel& m, std::uint64_t seed) {
  if (spec.is_array()) {
    DropOrder o = spec.get<DropOrder>();
    validate_order(o, m.dim);
    return o;
  }
  std::string name = spec.get<std::string>();
  if (name == "default") name = m.multiscale ? "depth-reversed" : "identity";
  if (name == "identity") return identity_order(m.dim);
  if (name == "reversed") return reversed_order(m.dim);
  if (name == "random") {
    Rng rng(derive_seed(seed, 3));
    return random_order(m.dim, rng);
  }
  const MultiScaleLayout layout = m.multiscale ? *m.multiscale : MultiScaleLayout::make(m.dim, 1);
  DropOrder deep = multiscale_depth_order(layout);
  if (name == "depth-reversed") return deep;
  if (name == "depth-forward") return DropOrder(deep.rbegin(), deep.rend());
  throw ConfigError("unknown order '" + name + "'");
}

inline std::vector<json> effective_eval_orders(const ExperimentConfig& c, const FlowModel& m) {
  if (!c.eval.orders.empty()) return c.eval.orders;
  if (m.multiscale) return {"depth-reversed", "depth-forward", "random"};
  if (c.nd) return {c.nd->order};
  return {"identity"};
}

inline NestedDropoutConfig make_nd_config(const NdSpec& s, const FlowModel& m, std::uint64_t seed) {
  NestedDropoutConfig nd;
  nd.lambda = s.lambda;
  nd.schedule = GeometricSchedule{s.p, m.dim};
  nd.order = resolve_order(s.order, m, seed);
  nd.distance = s.distance;
  return nd;
}

inline const SplitRange& eval_range(const Dataset& d, const std::string& split, std::string* used) {
  const SplitRange& r = d.split(split);
  if (!r.empty()) {
    *used = split;
    return r;
  }
  *used = "train";
  return d.splits().train;
}

struct RunResult {
  FlowModel model;
  std::vector<TraceRow> trace;
  RunReport report;
  std::vector<std::string> warnings;
};

/// Fills the evaluation part of a report for a model on a dataset.
inline void evaluate_into(RunReport& r, const FlowModel& m, const Dataset& data,
                          const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const Matrix xs = data.rows(eval_range(data, c.eval.split, &r.eval_split));
  const auto ll = log_likelihood_summary(m, xs);
  r.test_ll_nats = ll.mean_nats;
  r.test_ll_ci95 = ll.ci95_half_width;
  r.test_bpd = bits_per_dim(ll.mean_nats, m.dim);
  if (!data.splits().train.empty())
    r.train_ll_nats = avg_log_likelihood(m, data.rows(data.splits().train));
  for (const auto& spec : effective_eval_orders(c, m)) {
    std::string name = order_name(spec);
    if (name == "default") name = m.multiscale ? "depth-reversed" : "identity";
    const DropOrder o = resolve_order(spec, m, c.seed);
    r.mse_curves[name] = mse_curve(m, xs, o);
    r.drop_orders[name] = o;
  }
  r.wall_clock.eval_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void fill_identity(RunReport& r, const ExperimentConfig& c, const Dataset& data) {
  r.model_kind = c.model.kind;
  r.dimension = data.dim();
  r.seed = c.seed;
  r.config_hash = config_hash(c);
  r.build_id = build_id();
  r.provenance = {{"generator", data.provenance().generator},
                  {"seed", data.provenance().seed},
                  {"parameters", data.provenance().parameters}};
}

/// Generate or load data, build, train and evaluate. No file output.
inline RunResult run_training(const ExperimentConfig& c) {
  RunResult out;
  const Dataset data = materialize_dataset(c.dataset, &out.warnings);
  FlowModel model = build_model(c.model, data.dim(), c.seed);
  TrainConfig tc = c.train;
  tc.seed = derive_seed(c.seed, 2);
  if (c.nd) tc.nd = make_nd_config(*c.nd, model, c.seed);
  TrainOutcome trained = train(std::move(model), data, tc);

  RunReport& r = out.report;
  fill_identity(r, c, data);
  const bool nd_active = c.nd && c.nd->lambda > 0.0;
  r.label = nd_active ? "nested-dropout" : "baseline";
  r.iterations = c.train.iterations;
  if (!trained.trace.empty()) {
    const auto& last = trained.trace.back();
    r.final_loss = last.nll_term + (nd_active ? c.nd->lambda * last.recon_term : 0.0);
  }
  if (tc.nd)
    r.nd = {{"lambda", tc.nd->lambda}, {"p", tc.nd->schedule.p}, {"order", tc.nd->order}};
  r.wall_clock.train_seconds = trained.seconds;
  r.wall_clock.train_seconds_per_step = trained.seconds_per_step;
  evaluate_into(r, trained.model, data, c);
  out.model = std::move(trained.model);
  out.trace = std::move(trained.trace);
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  write_text(p, j.dump(2) + "\n");
}

inline void write_trace_csv(const std::filesystem::path& p, const std::vector<TraceRow>& trace) {
  std::ostringstream s;
  s << "iteration,nll_term,recon_term,lr\n";
  for (const auto& r : trace)
    s << r.iteration << ',' << format_double(r.nll_term) << ',' << format_double(r.recon_term)
      << ',' << format_double(r.lr) << '\n';
  write_text(p, s.str());
}

inline void write_curve_csv(const std::filesystem::path& p, const std::vector<double>& curve) {
  std::ostringstream s;
  s << "k,mse\n";
  for (std::size_t k = 0; k < curve.size(); ++k) s << k + 1 << ',' << format_double(curve[k]) << '\n';
  write_text(p, s.str());
}

inline void write_report_files(const std::filesystem::path& dir, const RunReport& r) {
  write_json(dir / "report.json", report_to_json(r));
  write_json(dir / "timing.json", timing_to_json(r.wall_clock));
  for (const auto& [name, curve] : r.mse_curves)
    write_curve_csv(dir / ("mse_curve_" + name + ".csv"), curve);
}

inline void write_run_header(const std::filesystem::path& dir, const ExperimentConfig& c) {
  std::filesystem::create_directories(dir);
  write_json(dir / "config.json", config_to_json(c));
  write_json(dir / "run_info.json",
             {{"seed", c.seed}, {"build_id", build_id()}, {"config_hash", config_hash(c)}});
}

struct GenerateSummary {
  std::filesystem::path csv;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> mean;
  std::vector<double> covariance_eigenvalues;
};

inline GenerateSummary cmd_generate(const ExperimentConfig& c) {
  if (c.dataset.source == DatasetSpec::Source::file)
    throw ConfigError("config.dataset: generate needs a generator, not a path");
  const Dataset d = materialize_dataset(c.dataset, nullptr);
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  const auto csv = dir / "data.csv";
  save_dataset(d, csv);
  const PCAModel pca = pca_fit(d.points());
  return {csv, d.size(), d.dim(), pca.mean, pca.eigenvalues};
}

inline RunResult cmd_train(const ExperimentConfig& c) {
  RunResult res = run_training(c);
  const std::filesystem::path dir = c.output_dir;
  write_run_header(dir, c);
  save_checkpoint(res.model, dir / "checkpoint.json");
  write_trace_csv(dir / "trace.csv", res.trace);
  write_report_files(dir, res.report);
  return res;
}

/// Evaluates a checkpoint, or the PCA oracle when no checkpoint is given.
inline RunReport cmd_eval(const ExperimentConfig& c, std::optional<std::string> checkpoint) {
  if (!checkpoint) checkpoint = c.eval.checkpoint;
  std::vector<std::string> warnings;
  const Dataset data = materialize_dataset(c.dataset, &warnings);
  RunReport r;
  fill_identity(r, c, data);
  r.iterations = 0;
  if (checkpoint) {
    const FlowModel m = load_checkpoint(*checkpoint);
    if (m.dim != data.dim())
      throw ConfigError("dimension mismatch: checkpoint has D=" + std::to_string(m.dim) +
                        ", dataset has D=" + std::to_string(data.dim()));
    r.label = "eval";
    evaluate_into(r, m, data, c);
  } else {
    r.label = "pca-oracle";
    r.model_kind = "pca";
    if (data.splits().train.size() < 2) throw ConfigError("pca oracle: train split too small");
    const PCAModel pca = pca_fit(data.rows(data.splits().train));
    const Matrix xs = data.rows(eval_range(data, c.eval.split, &r.eval_split));
    r.mse_curves["pca"] = pca_mse_curve(pca, xs);
    r.mse_curves["pca-train"] = pca_mse_curve(pca, data.rows(data.splits().train));
  }
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  write_json(dir / "config.json", config_to_json(c));
  write_report_files(dir, r);
  return r;
}

struct SweepRow {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::map<std::string, json> params;
  bool ok = false;
  std::string error;
  double test_ll_nats = 0.0;
  std::map<std::size_t, double> mse;
};

/// Applies a dotted-path override ("nd.lambda") to a canonical config.
inline void apply_override(json& j, const std::string& path, const json& value) {
  json* cur = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key) || (*cur)[key].is_null()) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

/// Drops model keys that do not apply to the (possibly overridden) kind.
inline void prune_model_keys(json& j) {
  if (!j.contains("model") || !j["model"].contains("kind")) return;
  json& m = j["model"];
  const std::string kind = m["kind"].get<std::string>();
  std::set<std::string> allowed{"kind"};
  if (kind == "qr-linear") allowed.insert({"householders", "offset", "init_noise"});
  if (kind == "lu-linear") allowed.insert({"offset", "init_noise"});
  if (kind == "coupling-multiscale")
    allowed.insert({"levels", "steps_per_level", "hidden", "log_scale_bound"});
  json pruned = json::object();
  for (auto it = m.begin(); it != m.end(); ++it)
    if (allowed.count(it.key())) pruned[it.key()] = it.value();
  m = std::move(pruned);
}

inline std::size_t worker_count() {
  if (const char* env = std::getenv("NESTEDFLOW_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

inline std::vector<SweepRow> cmd_sweep(const ExperimentConfig& c) {
  if (!c.sweep || c.sweep->grid.empty()) throw ConfigError("config.sweep.grid: grid is empty");
  std::vector<std::uint64_t> seeds = c.sweep->seeds;
  if (seeds.empty()) seeds.push_back(c.seed);

  json base = config_to_json(c);
  base.erase("sweep");
  // Cartesian product in key order, seeds innermost.
  std::vector<std::pair<std::string, std::vector<json>>> axes(c.sweep->grid.begin(),
                                                              c.sweep->grid.end());
  std::vector<std::map<std::string, json>> points(1);
  for (const auto& [key, values] : axes) {
    std::vector<std::map<std::string, json>> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        auto q = p;
        q[key] = v;
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }

  struct Job {
    std::map<std::string, json> params;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& p : points)
    for (auto s : seeds) jobs.push_back({p, s});

  const std::filesystem::path root = c.output_dir;
  std::filesystem::create_directories(root);
  write_json(root / "sweep_config.json", config_to_json(c));

  std::vector<SweepRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      SweepRow& row = rows[i];
      row.index = i;
      row.seed = jobs[i].seed;
      row.params = jobs[i].params;
      try {
        json child = base;
        for (const auto& [k, v] : jobs[i].params) apply_override(child, k, v);
        prune_model_keys(child);
        child["seed"] = jobs[i].seed;
        std::ostringstream name;
        name << "run_" << std::setw(3) << std::setfill('0') << i;
        child["output_dir"] = (root / name.str()).string();
        const ExperimentConfig cc = parse_config(child);
        const RunResult res = cmd_train(cc);
        row.test_ll_nats = res.report.test_ll_nats;
        for (const auto& [oname, curve] : res.report.mse_curves) {
          for (std::size_t k : c.sweep->report_k)
            if (k >= 1 && k <= curve.size()) row.mse[k] = curve[k - 1];
          break;
        }
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
    }
  };
  const std::size_t workers = std::min(worker_count(), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::ostringstream csv;
  csv << "run,seed";
  for (const auto& [key, values] : axes) csv << ',' << key;
  csv << ",status,test_ll_nats";
  for (std::size_t k : c.sweep->report_k) csv << ",mse_k" << k;
  csv << '\n';
  for (const auto& r : rows) {
    csv << r.index << ',' << r.seed;
    for (const auto& [key, values] : axes) {
      const json& v = r.params.at(key);
      std::string cell = v.is_string() ? v.get<std::string>() : v.dump();
      if (cell.find_first_of(",\"") != std::string::npos) {
        std::string quoted = "\"";
        for (char ch : cell) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        cell = quoted + "\"";
      }
      csv << ',' << cell;
    }
    csv << ',' << (r.ok ? "ok" : "failed") << ',' << (r.ok ? format_double(r.test_ll_nats) : "");
    for (std::size_t k : c.sweep->report_k) {
      csv << ',';
      if (r.ok && r.mse.count(k)) csv << format_double(r.mse.at(k));
    }
    csv << '\n';
  }
  write_text(root / "aggregate.csv", csv.str());
  return rows;
}

}  // namespace nestedflow::experiment
