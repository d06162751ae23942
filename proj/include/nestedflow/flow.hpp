#pragma once

// Flow models: an ordered composition of invertible transforms over a
// standard-normal base density.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "nestedflow/coupling.hpp"
#include "nestedflow/errors.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/rng.hpp"
#include "nestedflow/transforms.hpp"

namespace nestedflow {

using Transform =
    std::variant<LULinearTransform, QRLinearTransform, OffsetTransform, AffineCouplingTransform>;

inline std::string_view transform_kind(const Transform& t) {
  return std::visit([](const auto& x) { return std::decay_t<decltype(x)>::kind; }, t);
}

struct FlowModel {
  std::size_t dim = 0;
  std::vector<Transform> transforms;
  std::optional<MultiScaleLayout> multiscale;
  std::uint64_t rng_seed = 0;

  std::size_t latent_dim() const noexcept { return dim; }

  void validate() const {
    if (dim == 0) throw DomainError("FlowModel: dimension must be positive");
    for (const auto& t : transforms)
      std::visit(
          [&](const auto& x) {
            if (x.dim != dim) throw DomainError("FlowModel: transform dimension mismatch");
            x.validate();
          },
          t);
    if (multiscale && multiscale->dim != dim)
      throw DomainError("FlowModel: multi-scale layout dimension mismatch");
  }

  /// Flattened trainable parameters, blocks named "t<i>.<kind>.<block>".
  ParameterVector parameters() const {
    ParameterVector pv;
    for (std::size_t i = 0; i < transforms.size(); ++i)
      std::visit(
          [&](const auto& x) {
            for (const auto& b : x.blocks())
              pv.add_block("t" + std::to_string(i) + "." + std::string(x.kind) + "." +
                               std::string(b.name),
                           b.value->rows(), b.value->cols(), b.value->data());
          },
          transforms[i]);
    return pv;
  }

  /// Writes values back; the vector must have this model's layout.
  void set_parameters(std::span<const double> values) {
    std::size_t offset = 0;
    for (auto& t : transforms)
      std::visit(
          [&](auto& x) {
            for (auto& b : x.blocks()) {
              const std::size_t n = b.value->size();
              if (offset + n > values.size())
                throw DomainError("set_parameters: parameter vector too short");
              std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), n,
                          b.value->data().begin());
              offset += n;
            }
          },
          t);
    if (offset != values.size()) throw DomainError("set_parameters: parameter vector too long");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : transforms)
      std::visit(
          [&](const auto& x) {
            for (const auto& b : x.blocks()) n += b.value->size();
          },
          t);
    return n;
  }
};

/// Per-transform parameter nodes sliced out of the flat theta node.
using BoundParameters = std::vector<std::vector<ad::Var>>;

inline BoundParameters bind_parameters(const FlowModel& m, ad::Var theta) {
  BoundParameters out;
  out.reserve(m.transforms.size());
  std::size_t offset = 0;
  for (const auto& t : m.transforms)
    std::visit(
        [&](const auto& x) {
          std::vector<ad::Var> vars;
          for (const auto& b : x.blocks()) {
            vars.push_back(ad::slice(theta, offset, b.value->rows(), b.value->cols()));
            offset += b.value->size();
          }
          out.push_back(std::move(vars));
        },
        t);
  if (offset != theta.value().size())
    throw DomainError("bind_parameters: theta does not match the model layout");
  return out;
}

namespace detail {

[[noreturn]] inline void rethrow_in_transform(const NonFiniteError& e, std::size_t index,
                                              const Transform& t, const char* direction) {
  throw NonFiniteError("transform " + std::to_string(index) + " (" +
                           std::string(transform_kind(t)) + ", " + direction + "): " + e.what(),
                       e.op(), e.row());
}

}  // namespace detail

/// f(x) row-wise with the accumulated log|det J|.
inline TapeResult flow_forward(ad::Graph& g, const FlowModel& m, const BoundParameters& p,
                               ad::Var x) {
  if (x.cols() != m.dim) throw DomainError("flow_forward: input dimension mismatch");
  ad::Var y = x;
  ad::Var log_det = g.constant(Matrix(1, 1));
  for (std::size_t i = 0; i < m.transforms.size(); ++i) {
    try {
      const TapeResult r =
          std::visit([&](const auto& t) { return t.forward(g, p[i], y); }, m.transforms[i]);
      y = r.output;
      log_det = ad::add(r.log_det, log_det);
    } catch (const NonFiniteError& e) {
      detail::rethrow_in_transform(e, i, m.transforms[i], "forward");
    }
  }
  return {y, log_det};
}

/// f^{-1}(z) row-wise.
inline ad::Var flow_inverse(ad::Graph& g, const FlowModel& m, const BoundParameters& p,
                            ad::Var z) {
  if (z.cols() != m.dim) throw DomainError("flow_inverse: input dimension mismatch");
  ad::Var y = z;
  for (std::size_t i = m.transforms.size(); i-- > 0;) {
    try {
      y = std::visit([&](const auto& t) { return t.inverse(g, p[i], y); }, m.transforms[i]);
    } catch (const NonFiniteError& e) {
      detail::rethrow_in_transform(e, i, m.transforms[i], "inverse");
    }
  }
  return y;
}

/// Row-wise -(D/2) log(2 pi) - |z|^2 / 2, N x 1.
inline ad::Var standard_normal_logpdf_rows(ad::Var z) {
  const double d = static_cast<double>(z.cols());
  return ad::add_scalar(ad::scale(ad::sum_rows(ad::square(z)), -0.5),
                        -0.5 * d * std::log(2.0 * std::numbers::pi));
}

/// Row-wise log p(x) in nats, N x 1.
inline ad::Var flow_log_likelihood_rows(ad::Graph& g, const FlowModel& m,
                                        const BoundParameters& p, ad::Var x) {
  const TapeResult r = flow_forward(g, m, p, x);
  return ad::add(standard_normal_logpdf_rows(r.output), r.log_det);
}

// Plain evaluation helpers. Each builds a throwaway tape with constant
// parameters.

inline double standard_normal_logpdf(std::span<const double> z) {
  return -0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi) -
         0.5 * dot(z, z);
}

template <class T>
TransformResult transform_forward(const T& t, std::span<const double> x) {
  if (x.size() != t.dim) throw DomainError("transform_forward: dimension mismatch");
  ad::Graph g;
  std::vector<ad::Var> p;
  for (const auto& b : t.blocks()) p.push_back(g.constant(*b.value));
  const TapeResult r = t.forward(g, p, g.constant(Matrix::row(x)));
  return {r.output.value().data(), r.log_det.scalar()};
}

template <class T>
Vector transform_inverse(const T& t, std::span<const double> z) {
  if (z.size() != t.dim) throw DomainError("transform_inverse: dimension mismatch");
  ad::Graph g;
  std::vector<ad::Var> p;
  for (const auto& b : t.blocks()) p.push_back(g.constant(*b.value));
  return t.inverse(g, p, g.constant(Matrix::row(z))).value().data();
}

inline TransformResult linear_forward(const LULinearTransform& t, std::span<const double> x) {
  return transform_forward(t, x);
}
inline TransformResult linear_forward(const QRLinearTransform& t, std::span<const double> x) {
  return transform_forward(t, x);
}
inline Vector linear_inverse(const LULinearTransform& t, std::span<const double> z) {
  return transform_inverse(t, z);
}
inline Vector linear_inverse(const QRLinearTransform& t, std::span<const double> z) {
  return transform_inverse(t, z);
}
inline TransformResult coupling_forward(const AffineCouplingTransform& t,
                                        std::span<const double> x) {
  return transform_forward(t, x);
}
inline Vector coupling_inverse(const AffineCouplingTransform& t, std::span<const double> z) {
  return transform_inverse(t, z);
}

/// Forward pass over a batch (rows are points).
struct BatchForward {
  Matrix latents;
  std::vector<double> log_det;
};

inline BatchForward flow_forward(const FlowModel& m, const Matrix& x) {
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  const TapeResult r = flow_forward(g, m, p, g.constant(x));
  std::vector<double> ld(x.rows());
  const Matrix& l = r.log_det.value();
  for (std::size_t i = 0; i < x.rows(); ++i) ld[i] = l.rows() == 1 ? l[0] : l(i, 0);
  return {r.output.value(), std::move(ld)};
}

inline Matrix flow_inverse(const FlowModel& m, const Matrix& z) {
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  return flow_inverse(g, m, p, g.constant(z)).value();
}

inline std::vector<double> flow_log_likelihood(const FlowModel& m, const Matrix& x) {
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  return flow_log_likelihood_rows(g, m, p, g.constant(x)).value().data();
}

inline double flow_log_likelihood(const FlowModel& m, std::span<const double> x) {
  return flow_log_likelihood(m, Matrix::row(x))[0];
}

inline Matrix standard_normal_batch(std::size_t n, std::size_t d, Rng& rng) {
  Matrix z(n, d);
  for (auto& v : z.data()) v = rng.normal();
  return z;
}

/// f^{-1}(z) with z drawn from the base density.
inline Vector flow_sample(const FlowModel& m, Rng& rng) {
  return flow_inverse(m, standard_normal_batch(1, m.dim, rng)).data();
}

inline Matrix flow_sample(const FlowModel& m, std::size_t n, Rng& rng) {
  return flow_inverse(m, standard_normal_batch(n, m.dim, rng));
}

}  // namespace nestedflow
