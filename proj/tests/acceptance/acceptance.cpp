// Acceptance run: trains the linear-flow comparison and the toy coupling
// study, runs the property suites, and prints one PASS/FAIL line per
// criterion. Exits nonzero if any criterion fails.
//
// NESTEDFLOW_THREADS controls how many training runs execute concurrently
// (default: hardware concurrency). Results do not depend on it.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "../suites.hpp"

using namespace nestedflow;
using namespace nestedflow::experiment;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sample_std(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::size_t threads() {
  if (const char* e = std::getenv("NESTEDFLOW_THREADS")) return std::max<std::size_t>(1, std::stoul(e));
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(n, threads()); ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

json linear_config(const std::string& kind, double lambda, std::uint64_t seed) {
  json model = {{"kind", kind}};
  if (kind == "qr-linear") model["householders"] = 3;
  json j = {{"dataset", {{"generator", "synthetic-gaussian"}, {"n_train", 10000}, {"n_test", 10000}, {"seed", 0}}},
            {"model", model},
            {"train", {{"iterations", 30000}, {"batch_size", 500}, {"lr", 0.005}, {"lr_schedule", "constant"}}},
            {"nd", nullptr},
            {"eval", {{"orders", {"identity"}}}},
            {"output_dir", "unused"},
            {"seed", seed}};
  if (lambda > 0.0) j["nd"] = {{"lambda", lambda}, {"p", 0.33}, {"order", "identity"}};
  return j;
}

json toy_config(std::uint64_t seed) {
  return {{"dataset", {{"generator", "toy-hierarchical"}, {"dimension", 16}, {"n", 5000}, {"ratio", 0.6}, {"seed", 0}}},
          {"model", {{"kind", "coupling-multiscale"}, {"levels", 3}, {"steps_per_level", 4}, {"hidden", 32},
                     {"log_scale_bound", 2.0}}},
          {"train", {{"iterations", 1000}, {"batch_size", 100}, {"lr", 0.005}, {"lr_schedule", "cosine"}}},
          {"nd", {{"lambda", 20.0}, {"p", 0.33}, {"order", "depth-reversed"}}},
          {"eval", {{"orders", {"depth-reversed", "depth-forward", "random"}}, {"split", "test"}}},
          {"output_dir", "unused"},
          {"seed", seed}};
}

struct Outcome {
  double ll = 0.0;
  double train_seconds = 0.0;
  std::vector<double> curve;
  std::map<std::string, std::vector<double>> curves;
  std::string error;
};

std::vector<Outcome> train_all(const std::vector<json>& configs) {
  std::vector<Outcome> out(configs.size());
  parallel_for(configs.size(), [&](std::size_t i) {
    try {
      const RunResult r = run_training(parse_config(configs[i]));
      out[i].ll = r.report.test_ll_nats;
      out[i].train_seconds = r.report.wall_clock.train_seconds;
      out[i].curves = r.report.mse_curves;
      out[i].curve = r.report.mse_curves.begin()->second;
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  });
  return out;
}

std::vector<double> column(const std::vector<Outcome>& o, std::size_t k) {
  std::vector<double> v;
  for (const auto& x : o) v.push_back(x.curve.at(k - 1));
  return v;
}

bool all_ok(const std::vector<Outcome>& o) {
  for (const auto& x : o)
    if (!x.error.empty()) {
      std::printf("  run failed: %s\n", x.error.c_str());
      return false;
    }
  return true;
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t kSeeds = 10;

  std::vector<json> configs;
  for (std::size_t s = 0; s < kSeeds; ++s) configs.push_back(linear_config("qr-linear", 0.0, s));
  for (std::size_t s = 0; s < kSeeds; ++s) configs.push_back(linear_config("qr-linear", 20.0, s));
  for (std::size_t s = 0; s < kSeeds; ++s) configs.push_back(linear_config("lu-linear", 20.0, s));
  const std::vector<Outcome> all = train_all(configs);
  const std::vector<Outcome> qr(all.begin(), all.begin() + kSeeds);
  const std::vector<Outcome> qr_nd(all.begin() + kSeeds, all.begin() + 2 * kSeeds);
  const std::vector<Outcome> lu_nd(all.begin() + 2 * kSeeds, all.end());
  const bool trained = all_ok(all);

  // 1. Baseline likelihood against the entropy bound, and runtime.
  {
    bool ok = trained;
    double worst_time = 0.0, mean_ll = 0.0;
    for (std::size_t s = 0; s < 5 && trained; ++s) {
      mean_ll += qr[s].ll / 5.0;
      worst_time = std::max(worst_time, qr[s].train_seconds);
    }
    ok = ok && mean_ll >= -0.82 && mean_ll <= -0.79 && worst_time <= 180.0;
    verdict(1, ok,
            fmt("QR lambda=0 mean test LL %.4f nats over 5 seeds (target [-0.82,-0.79], entropy bound %.4f); "
                "slowest run %.1f s (limit 180 s)",
                mean_ll, oracle::synthetic_entropy_bound(), worst_time));
  }

  // 2. Nested-dropout QR against its baseline, seed by seed.
  {
    bool ok = trained;
    double worst_dll = 0.0, worst_m2 = 0.0, lo_m1 = 1e9, hi_m1 = -1e9;
    for (std::size_t s = 0; s < 5 && trained; ++s) {
      worst_dll = std::max(worst_dll, std::abs(qr_nd[s].ll - qr[s].ll));
      worst_m2 = std::max(worst_m2, qr_nd[s].curve[1]);
      lo_m1 = std::min(lo_m1, qr_nd[s].curve[0]);
      hi_m1 = std::max(hi_m1, qr_nd[s].curve[0]);
    }
    ok = ok && worst_dll <= 0.01 && worst_m2 <= 0.004 && lo_m1 >= 0.035 && hi_m1 <= 0.040;
    verdict(2, ok,
            fmt("ND-QR over 5 seeds: max |dLL| %.4f (<= 0.01), max MSE(2) %.5f (<= 0.004), "
                "MSE(1) in [%.5f, %.5f] (within [0.035, 0.040])",
                worst_dll, worst_m2, lo_m1, hi_m1));
  }

  // 3. Ordering gap between unordered and ordered QR.
  {
    const double base = trained ? median(column(qr, 2)) : 0.0;
    const double nd = trained ? median(column(qr_nd, 2)) : 1.0;
    const bool ok = trained && base >= 0.10 && base >= 25.0 * nd;
    verdict(3, ok,
            fmt("median MSE(2) over 10 seeds: QR %.4f (>= 0.10), ND-QR %.5f, ratio %.1f (>= 25)", base, nd,
                base / nd));
  }

  // 4. Nested-dropout LU: first component right, larger seed spread.
  {
    double lo = 1e9, hi = -1e9;
    for (const auto& o : lu_nd)
      if (trained) {
        lo = std::min(lo, o.curve[0]);
        hi = std::max(hi, o.curve[0]);
      }
    const double lu_sd = trained ? sample_std(column(lu_nd, 2)) : 0.0;
    const double qr_sd = trained ? sample_std(column(qr_nd, 2)) : 0.0;
    const bool ok = trained && lo >= 0.035 && hi <= 0.040 && lu_sd > qr_sd;
    verdict(4, ok,
            fmt("ND-LU over 10 seeds: MSE(1) in [%.5f, %.5f]; MSE(2) std ND-LU %.2e > ND-QR %.2e", lo, hi,
                lu_sd, qr_sd));
  }

  // 5. PCA reference values and the trailing-eigenvalue identity.
  {
    const Dataset d = gen_synthetic_gaussian(10000, 10000, 0);
    const Matrix train = d.rows("train"), test = d.rows("test");
    const PCAModel pca = pca_fit(train);
    const double m1 = pca_mse(pca, test, 1), m2 = pca_mse(pca, test, 2);
    double identity_err = 0.0;
    for (std::size_t k = 1; k <= 3; ++k) {
      double tail = 0.0;
      for (std::size_t i = k; i < 3; ++i) tail += pca.eigenvalues[i];
      identity_err = std::max(identity_err, std::abs(pca_mse(pca, train, k) - tail / 3.0));
    }
    const bool ok = std::abs(m1 - 0.037) <= 0.002 && std::abs(m2 - 0.003) <= 0.002 && identity_err <= 1e-10;
    verdict(5, ok,
            fmt("PCA test MSE(1) %.5f, MSE(2) %.5f (0.037/0.003 +- 0.002); fitting-set identity error %.2e "
                "(<= 1e-10)",
                m1, m2, identity_err));
  }

  auto suite_line = [](int id, const std::vector<suites::CaseResult>& cases, const char* what) {
    bool ok = true;
    std::string detail = what;
    for (const auto& c : cases) {
      ok = ok && c.ok;
      detail += fmt("; %s %.1e (n=%zu)", c.name.c_str(), c.worst, c.checked);
    }
    verdict(id, ok, detail);
  };
  suite_line(6, suites::gradient_suite(20), "gradient rel. error <= 1e-4, worst per kind");
  suite_line(7, suites::invertibility_suite(100), "round-trip error <= 1e-8, worst per kind");
  suite_line(8, suites::logdet_suite(20), "log-det error (linear <= 1e-10, coupling <= 1e-4)");

  // 9. Clamped geometric sampler.
  {
    const double a = suites::geometric_tv(0.33, 3, 1000000, 1);
    const double b = suites::geometric_tv(0.33, 64, 1000000, 2);
    const double c = suites::geometric_tv(1e-3, 64, 1000000, 3);
    const bool ok = a <= 0.005 && b <= 0.005 && c <= 0.005;
    verdict(9, ok, fmt("TV over 1e6 draws: p=0.33 K=3 %.5f, p=0.33 K=64 %.5f, p=1e-3 K=64 %.5f (<= 0.005)", a,
                       b, c));
  }

  // 10. Toy hierarchical data, multi-scale coupling flow, 5 seeds.
  {
    std::vector<json> toy;
    for (std::uint64_t s = 0; s < 5; ++s) toy.push_back(toy_config(s));
    const auto runs = train_all(toy);
    constexpr double slack = 1e-12;
    std::size_t good = 0;
    std::string detail;
    for (std::size_t s = 0; s < runs.size(); ++s) {
      if (!runs[s].error.empty()) {
        detail += fmt(" seed%zu:failed", s);
        continue;
      }
      const auto& dr = runs[s].curves.at("depth-reversed");
      const auto& df = runs[s].curves.at("depth-forward");
      const auto& rnd = runs[s].curves.at("random");
      bool ok = true;
      for (std::size_t k = 0; k < dr.size(); ++k) {
        ok = ok && dr[k] <= df[k] + slack;
        if (k + 1 <= dr.size() / 2) ok = ok && dr[k] <= rnd[k] + slack;
      }
      good += ok;
      detail += fmt(" seed%zu:%s(k=4 %.3f/%.3f/%.3f)", s, ok ? "ok" : "no", dr[3], df[3], rnd[3]);
    }
    verdict(10, good >= 4,
            fmt("depth-reversed <= depth-forward at all k and <= random for k <= 8 in %zu/5 seeds (>= 4);", good) +
                detail + " [MSE at k=4 reversed/forward/random]");
  }

  // 11. Repeat runs from the stored config reproduce the report exactly.
  {
    bool ok = true;
    std::vector<std::string> checked;
    for (const json& j : {linear_config("lu-linear", 20.0, 3), toy_config(1)}) {
      json short_run = j;
      short_run["train"]["iterations"] = 400;
      const ExperimentConfig cfg = parse_config(short_run);
      const std::string first = report_to_json(run_training(cfg).report).dump();
      const ExperimentConfig again = parse_config(config_to_json(cfg));
      const std::string second = report_to_json(run_training(again).report).dump();
      ok = ok && first == second;
      checked.push_back(cfg.model.kind + (first == second ? " identical" : " differs"));
    }
    verdict(11, ok, fmt("report JSON byte-compare after re-run from canonical config: %s, %s",
                        checked[0].c_str(), checked[1].c_str()));
  }

  const double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("acceptance: %d failure(s), %.1f s total\n", failures, total);
  return failures == 0 ? 0 : 1;
}
