#pragma once

#include <cstdint>
#include <vector>

#include "nestedflow/coupling.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/rng.hpp"
#include "nestedflow/transforms.hpp"

namespace nestedflow {

/// A single LU-parameterized linear map, optionally followed by an offset.
inline FlowModel make_lu_flow(std::size_t d, std::uint64_t seed, bool offset = false,
                              double noise = 1e-2) {
  Rng rng(seed);
  FlowModel m;
  m.dim = d;
  m.rng_seed = seed;
  m.transforms.emplace_back(LULinearTransform::random(d, rng, noise));
  if (offset) m.transforms.emplace_back(OffsetTransform::zero(d));
  return m;
}

/// A single QR-parameterized linear map. `reflections` = 0 means D.
inline FlowModel make_qr_flow(std::size_t d, std::uint64_t seed, std::size_t reflections = 0,
                              bool offset = false, double noise = 1e-2) {
  Rng rng(seed);
  FlowModel m;
  m.dim = d;
  m.rng_seed = seed;
  m.transforms.emplace_back(QRLinearTransform::random(d, reflections ? reflections : d, rng, noise));
  if (offset) m.transforms.emplace_back(OffsetTransform::zero(d));
  return m;
}

struct MultiScaleConfig {
  std::size_t levels = 3;
  std::size_t steps_per_level = 4;
  std::size_t hidden = 32;
  double log_scale_bound = 2.0;
};

/// Affine couplings wired as a flat multi-scale flow. Within a level the
/// steps alternate which half (even or odd positions of the active set)
/// conditions the other.
inline FlowModel make_multiscale_coupling_flow(std::size_t d, const MultiScaleConfig& cfg,
                                               std::uint64_t seed) {
  if (cfg.steps_per_level == 0) throw DomainError("multi-scale flow: need at least one step");
  Rng rng(seed);
  FlowModel m;
  m.dim = d;
  m.rng_seed = seed;
  m.multiscale = MultiScaleLayout::make(d, cfg.levels);
  for (const auto& active : m.multiscale->levels) {
    for (std::size_t step = 0; step < cfg.steps_per_level; ++step) {
      std::vector<std::size_t> a, b;
      for (std::size_t i = 0; i < active.size(); ++i)
        ((i % 2 == step % 2) ? a : b).push_back(active[i]);
      m.transforms.emplace_back(AffineCouplingTransform::make(d, std::move(a), std::move(b),
                                                              cfg.hidden, cfg.log_scale_bound, rng));
    }
  }
  return m;
}

}  // namespace nestedflow
