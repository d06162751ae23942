#pragma once

// JSON checkpoints:
//   {schema_version, dimension, rng_seed,
//    transforms: [{kind, <structure>, parameters: {block: [[row], ...]}}],
//    multiscale: {levels, depth_rank} | null}
// Doubles are written in shortest round-trip form, so loading a saved model
// reproduces every parameter bit for bit.

#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "nestedflow/data.hpp"
#include "nestedflow/errors.hpp"
#include "nestedflow/flow.hpp"

namespace nestedflow {

inline constexpr int kCheckpointSchemaVersion = 1;

namespace detail {

inline Matrix matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols,
                               const std::string& what) {
  if (!j.is_array() || j.size() != rows) throw ConfigError("checkpoint: bad shape for " + what);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& row = j.at(i);
    if (!row.is_array() || row.size() != cols)
      throw ConfigError("checkpoint: bad shape for " + what);
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = row.at(c).get<double>();
  }
  return m;
}

template <class T>
void read_blocks(T& t, const nlohmann::json& params) {
  for (auto& b : t.blocks()) {
    const std::string name(b.name);
    if (!params.contains(name)) throw ConfigError("checkpoint: missing parameter block " + name);
    *b.value = matrix_from_json(params.at(name), b.value->rows(), b.value->cols(), name);
  }
}

}  // namespace detail

inline nlohmann::json transform_to_json(const Transform& t) {
  return std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        nlohmann::json j = {{"kind", std::string(T::kind)}};
        if constexpr (std::is_same_v<T, LULinearTransform>) {
          j["permutation"] = x.permutation;
        } else if constexpr (std::is_same_v<T, QRLinearTransform>) {
          j["reflections"] = x.reflections();
        } else if constexpr (std::is_same_v<T, AffineCouplingTransform>) {
          j["identity_set"] = x.identity_set;
          j["transformed_set"] = x.transformed_set;
          j["hidden"] = x.hidden;
          j["log_scale_bound"] = x.log_scale_bound;
        }
        nlohmann::json params = nlohmann::json::object();
        for (const auto& b : x.blocks()) params[std::string(b.name)] = matrix_to_json(*b.value);
        j["parameters"] = std::move(params);
        return j;
      },
      t);
}

inline nlohmann::json model_to_json(const FlowModel& m) {
  nlohmann::json transforms = nlohmann::json::array();
  for (const auto& t : m.transforms) transforms.push_back(transform_to_json(t));
  nlohmann::json ms = nullptr;
  if (m.multiscale) ms = {{"levels", m.multiscale->levels}, {"depth_rank", m.multiscale->depth_rank}};
  return {{"schema_version", kCheckpointSchemaVersion},
          {"dimension", m.dim},
          {"rng_seed", m.rng_seed},
          {"transforms", std::move(transforms)},
          {"multiscale", std::move(ms)}};
}

inline Transform transform_from_json(const nlohmann::json& j, std::size_t d) {
  const std::string kind = j.at("kind").get<std::string>();
  const auto& params = j.at("parameters");
  const std::size_t tri = d * (d - 1) / 2;
  if (kind == LULinearTransform::kind) {
    LULinearTransform t = LULinearTransform::identity(d);
    t.permutation = j.at("permutation").get<std::vector<std::size_t>>();
    detail::read_blocks(t, params);
    t.validate();
    return t;
  }
  if (kind == QRLinearTransform::kind) {
    QRLinearTransform t;
    t.dim = d;
    t.householder = Matrix(j.at("reflections").get<std::size_t>(), d);
    t.upper_offdiag = Matrix(1, tri);
    t.upper_logdiag = Matrix(1, d);
    detail::read_blocks(t, params);
    t.validate();
    return t;
  }
  if (kind == OffsetTransform::kind) {
    OffsetTransform t = OffsetTransform::zero(d);
    detail::read_blocks(t, params);
    return t;
  }
  if (kind == AffineCouplingTransform::kind) {
    AffineCouplingTransform t;
    t.dim = d;
    t.identity_set = j.at("identity_set").get<std::vector<std::size_t>>();
    t.transformed_set = j.at("transformed_set").get<std::vector<std::size_t>>();
    t.hidden = j.at("hidden").get<std::size_t>();
    t.log_scale_bound = j.at("log_scale_bound").get<double>();
    const std::size_t na = t.identity_size(), nb = t.transformed_size(), h = t.hidden;
    t.w1 = Matrix(na, h);
    t.b1 = Matrix(1, h);
    t.w2 = Matrix(h, h);
    t.b2 = Matrix(1, h);
    t.w3 = Matrix(h, 2 * nb);
    t.b3 = Matrix(1, 2 * nb);
    detail::read_blocks(t, params);
    t.validate();
    return t;
  }
  throw ConfigError("checkpoint: unknown transform kind '" + kind + "'");
}

inline FlowModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kCheckpointSchemaVersion)
      throw ConfigError("checkpoint: unsupported schema_version");
    FlowModel m;
    m.dim = j.at("dimension").get<std::size_t>();
    m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    for (const auto& t : j.at("transforms")) m.transforms.push_back(transform_from_json(t, m.dim));
    if (j.contains("multiscale") && !j.at("multiscale").is_null()) {
      MultiScaleLayout ms;
      ms.dim = m.dim;
      ms.levels = j.at("multiscale").at("levels").get<std::vector<std::vector<std::size_t>>>();
      ms.depth_rank = j.at("multiscale").at("depth_rank").get<std::vector<std::size_t>>();
      m.multiscale = std::move(ms);
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const FlowModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << model_to_json(m).dump(1) << '\n';
}

inline FlowModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace nestedflow
