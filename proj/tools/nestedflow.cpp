// Command-line front end: generate, train, eval and sweep.
//
// Exit codes: 0 success, 1 usage / config / I/O error, 2 numerical failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nestedflow/nestedflow.hpp"

namespace {

using namespace nestedflow;
using nestedflow::experiment::ExperimentConfig;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("-c,--config", o.config, "Experiment config (JSON)")->required();
  sub->add_option("-s,--seed", o.seed, "Override the run seed");
  sub->add_option("-o,--output", o.output, "Override the output directory");
}

ExperimentConfig load(const CommonOptions& o) {
  ExperimentConfig c = experiment::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.output) c.output_dir = *o.output;
  return c;
}

void print_curve(const std::string& name, const std::vector<double>& curve) {
  std::cout << "  mse[" << name << "]:";
  for (std::size_t k = 0; k < curve.size() && k < 8; ++k) std::cout << ' ' << curve[k];
  if (curve.size() > 8) std::cout << " ...";
  std::cout << '\n';
}

void print_report(const RunReport& r) {
  std::cout << "label: " << r.label << "\nmodel: " << r.model_kind << " (D=" << r.dimension
            << ")\n";
  if (r.model_kind != "pca")
    std::cout << "test LL (" << r.eval_split << "): " << r.test_ll_nats << " +- " << r.test_ll_ci95
              << " nats, " << r.test_bpd << " bits/dim\n";
  for (const auto& [name, curve] : r.mse_curves) print_curve(name, curve);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nested-dropout normalizing flows"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, sweep_opts;
  std::optional<std::string> checkpoint;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset with its split sidecar");
  add_common(gen, gen_opts);
  auto* trn = app.add_subcommand("train", "Train a flow and write its run directory");
  add_common(trn, train_opts);
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint, or PCA when none is given");
  add_common(evl, eval_opts);
  evl->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  auto* swp = app.add_subcommand("sweep", "Train every grid point and seed of a sweep");
  add_common(swp, sweep_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      const auto s = experiment::cmd_generate(load(gen_opts));
      std::cout << "wrote " << s.csv.string() << " (" << s.rows << " x " << s.cols << ")\n";
      std::cout << "covariance eigenvalues:";
      for (double w : s.covariance_eigenvalues) std::cout << ' ' << w;
      std::cout << '\n';
    } else if (trn->parsed()) {
      const ExperimentConfig c = load(train_opts);
      const auto res = experiment::cmd_train(c);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
      print_report(res.report);
      std::cout << "run directory: " << c.output_dir << '\n';
    } else if (evl->parsed()) {
      print_report(experiment::cmd_eval(load(eval_opts), checkpoint));
    } else if (swp->parsed()) {
      const ExperimentConfig c = load(sweep_opts);
      const auto rows = experiment::cmd_sweep(c);
      std::size_t failed = 0;
      for (const auto& r : rows)
        if (!r.ok) {
          ++failed;
          std::cerr << "run " << r.index << " failed: " << r.error << '\n';
        }
      std::cout << rows.size() - failed << " of " << rows.size() << " runs succeeded; see "
                << c.output_dir << "/aggregate.csv\n";
      if (failed == rows.size()) return 2;
    }
  } catch (const NonFiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const SingularityError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
