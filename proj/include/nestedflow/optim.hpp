#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nestedflow/data.hpp"
#include "nestedflow/errors.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/nested_dropout.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

/// lr0 * (1 + cos(pi t / T)) / 2.
inline double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (t > total) throw DomainError("cosine_lr: t exceeds the schedule length");
  if (total == 0) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t n = 0) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// Bias-corrected Adam update, in place.
inline void adam_step(AdamState& s, std::span<double> theta, std::span<const double> grad,
                      double lr) {
  if (theta.size() != grad.size() || s.first_moment.size() != theta.size())
    throw DomainError("adam_step: shape mismatch");
  if (!all_finite(grad))
    throw NumericalError("adam_step: non-finite gradient at step " +
                         std::to_string(s.step_count + 1));
  ++s.step_count;
  const double t = static_cast<double>(s.step_count);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * grad[i];
    s.second_moment[i] = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double mhat = s.first_moment[i] / c1;
    const double vhat = s.second_moment[i] / c2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + s.epsilon);
  }
}

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  std::size_t iterations = 30000;
  std::size_t batch_size = 500;
  double lr_initial = 5e-3;
  LrSchedule lr_schedule = LrSchedule::constant;
  std::uint64_t seed = 0;
  std::optional<NestedDropoutConfig> nd;

  void validate() const {
    if (batch_size < 1) throw DomainError("TrainConfig: batch_size must be at least 1");
    if (!(lr_initial > 0.0)) throw DomainError("TrainConfig: lr must be positive");
    if (nd) nd->validate();
  }

  double lr_at(std::size_t t) const {
    return lr_schedule == LrSchedule::cosine ? cosine_lr(t, iterations, lr_initial) : lr_initial;
  }
};

struct TraceRow {
  std::size_t iteration = 0;
  double nll_term = 0.0;
  double recon_term = 0.0;  ///< mean distance before weighting by lambda
  double lr = 0.0;
};

struct TrainOutcome {
  FlowModel model;
  std::vector<TraceRow> trace;
  double seconds = 0.0;
  double seconds_per_step = 0.0;
};

/// Adam on i.i.d. minibatches drawn with replacement from the train split.
/// Deterministic for a given (model, data, config).
inline TrainOutcome train(FlowModel model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  const SplitRange& tr = data.splits().train;
  if (tr.empty()) throw DomainError("train: empty train split");
  if (data.dim() != model.dim)
    throw DomainError("train: data dimension " + std::to_string(data.dim()) +
                      " does not match model dimension " + std::to_string(model.dim));
  const NestedDropoutConfig* nd = cfg.nd && cfg.nd->lambda > 0.0 ? &*cfg.nd : nullptr;

  Rng rng(cfg.seed);
  ParameterVector theta = model.parameters();
  AdamState adam(theta.size());
  TrainOutcome out;
  out.trace.reserve(cfg.iterations);
  const Matrix& pts = data.points();
  const std::size_t d = data.dim();
  Matrix batch(cfg.batch_size, d);
  std::vector<std::size_t> ks;
  std::vector<double> grad;

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t row = tr.begin + rng.index(tr.size());
      std::copy_n(pts.row_span(row).begin(), d, batch.row_span(b).begin());
    }
    if (nd) ks = sample_ks(nd->schedule, cfg.batch_size, rng);
    const double lr = cfg.lr_at(it);

    ad::Graph g;
    const ad::Var th = g.variable(Matrix::row(theta.values()));
    LossTerms terms;
    try {
      const auto bound = bind_parameters(model, th);
      terms = combined_loss_terms(g, model, bound, g.constant(batch), nd, ks);
    } catch (const NonFiniteError& e) {
      throw NumericalError("train: non-finite loss at iteration " + std::to_string(it) + ": " +
                           e.what());
    }
    g.backward(terms.total);
    TraceRow row{it, terms.nll.scalar(), terms.recon ? terms.recon->scalar() : 0.0, lr};
    out.trace.push_back(row);
    grad = g.gradient(th).data();
    try {
      adam_step(adam, theta.values(), grad, lr);
    } catch (const NumericalError& e) {
      std::ostringstream msg;
      msg << "train: iteration " << it << " (nll_term " << row.nll_term << ", recon_term "
          << row.recon_term << "): " << e.what();
      throw NumericalError(msg.str());
    }
  }
  const auto stop = std::chrono::steady_clock::now();
  out.seconds = std::chrono::duration<double>(stop - start).count();
  out.seconds_per_step = cfg.iterations ? out.seconds / static_cast<double>(cfg.iterations) : 0.0;
  model.set_parameters(theta.values());
  out.model = std::move(model);
  return out;
}

}  // namespace nestedflow
