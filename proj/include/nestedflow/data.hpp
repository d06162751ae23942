#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestedflow/errors.hpp"
#include "nestedflow/linalg.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

struct SplitRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end == begin; }
};

struct Splits {
  SplitRange train, val, test;
};

struct Provenance {
  std::string generator;  ///< empty when unknown
  std::uint64_t seed = 0;
  nlohmann::json parameters = nlohmann::json::object();
};

/// N x D table of points (one per row) with contiguous train/val/test
/// ranges.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Matrix points, Splits splits, Provenance provenance = {})
      : points_(std::move(points)), splits_(splits), provenance_(std::move(provenance)) {
    validate();
  }

  const Matrix& points() const noexcept { return points_; }
  const Splits& splits() const noexcept { return splits_; }
  const Provenance& provenance() const noexcept { return provenance_; }
  std::size_t size() const noexcept { return points_.rows(); }
  std::size_t dim() const noexcept { return points_.cols(); }

  const SplitRange& split(std::string_view name) const {
    if (name == "train") return splits_.train;
    if (name == "val") return splits_.val;
    if (name == "test") return splits_.test;
    throw DomainError("unknown split '" + std::string(name) + "'");
  }

  /// Copy of the rows of one split.
  Matrix rows(const SplitRange& r) const {
    Matrix out(r.size(), dim());
    std::copy(points_.data().begin() + static_cast<std::ptrdiff_t>(r.begin * dim()),
              points_.data().begin() + static_cast<std::ptrdiff_t>(r.end * dim()),
              out.data().begin());
    return out;
  }
  Matrix rows(std::string_view split_name) const { return rows(split(split_name)); }

 private:
  void validate() const {
    if (!points_.all_finite()) throw DomainError("Dataset: non-finite values");
    const SplitRange* rs[] = {&splits_.train, &splits_.val, &splits_.test};
    for (const auto* r : rs)
      if (r->begin > r->end || r->end > points_.rows())
        throw DomainError("Dataset: split out of bounds");
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j)
        if (!rs[i]->empty() && !rs[j]->empty() && rs[i]->begin < rs[j]->end &&
            rs[j]->begin < rs[i]->end)
          throw DomainError("Dataset: splits overlap");
  }

  Matrix points_;
  Splits splits_;
  Provenance provenance_;
};

/// Haar-random rotation (det +1): QR of a Gaussian matrix with the column
/// signs fixed by diag(R).
inline Matrix random_rotation(std::size_t d, Rng& rng) {
  Matrix a(d, d);
  for (auto& x : a.data()) x = rng.normal();
  auto [q, r] = qr_decompose(a);
  for (std::size_t j = 0; j < d; ++j)
    if (r(j, j) < 0.0)
      for (std::size_t i = 0; i < d; ++i) q(i, j) = -q(i, j);
  // det(Q) = sign of the product of the LU pivots of Q.
  Matrix lu = q;
  double sign = 1.0;
  for (std::size_t k = 0; k < d; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < d; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (piv != k) {
      for (std::size_t c = 0; c < d; ++c) std::swap(lu(k, c), lu(piv, c));
      sign = -sign;
    }
    if (lu(k, k) < 0.0) sign = -sign;
    for (std::size_t i = k + 1; i < d; ++i) {
      const double f = lu(i, k) / lu(k, k);
      for (std::size_t c = k; c < d; ++c) lu(i, c) -= f * lu(k, c);
    }
  }
  if (sign < 0.0)
    for (std::size_t i = 0; i < d; ++i) q(i, 0) = -q(i, 0);
  return q;
}

/// Points x = R diag(sqrt(eigenvalues)) g with g standard normal.
inline Matrix sample_rotated_gaussian(const Matrix& rotation, std::span<const double> eigenvalues,
                                      std::size_t n, Rng& rng) {
  const std::size_t d = eigenvalues.size();
  Matrix x(n, d);
  std::vector<double> g(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) g[j] = std::sqrt(eigenvalues[j]) * rng.normal();
    const Vector row = matvec(rotation, g);
    std::copy(row.begin(), row.end(), x.row_span(i).begin());
  }
  return x;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(m.row_vector(i));
  return rows;
}

/// Centered 3-D Gaussian with covariance eigenvalues (1, 0.1, 0.01) under a
/// seed-derived rotation. Train rows first, then test rows.
inline Dataset gen_synthetic_gaussian(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  if (n_train + n_test < 1) throw DomainError("gen_synthetic_gaussian: need at least one point");
  Rng rng(seed);
  const Matrix rot = random_rotation(3, rng);
  const std::vector<double> eig = {1.0, 0.1, 0.01};
  Matrix pts = sample_rotated_gaussian(rot, eig, n_train + n_test, rng);
  Provenance prov{"synthetic-gaussian", seed,
                  {{"n_train", n_train},
                   {"n_test", n_test},
                   {"eigenvalues", eig},
                   {"rotation", matrix_to_json(rot)}}};
  Splits s{{0, n_train}, {n_train, n_train}, {n_train, n_train + n_test}};
  return Dataset(std::move(pts), s, std::move(prov));
}

/// Gaussian in D dimensions with spectrum ratio^i, i = 0..D-1, under a
/// seed-derived rotation. Split 80/10/10 into train/val/test.
inline Dataset gen_toy_hierarchical(std::size_t d, std::size_t n, std::uint64_t seed,
                                    double ratio = 0.6) {
  if (d == 0 || d % 4 != 0 || d > 64)
    throw DomainError("gen_toy_hierarchical: D must be a positive multiple of 4, at most 64");
  if (n < 1) throw DomainError("gen_toy_hierarchical: need at least one point");
  Rng rng(seed);
  const Matrix rot = random_rotation(d, rng);
  std::vector<double> eig(d);
  for (std::size_t i = 0; i < d; ++i) eig[i] = std::pow(ratio, static_cast<double>(i));
  Matrix pts = sample_rotated_gaussian(rot, eig, n, rng);
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  Provenance prov{"toy-hierarchical", seed,
                  {{"dimension", d},
                   {"n", n},
                   {"ratio", ratio},
                   {"eigenvalues", eig},
                   {"rotation", matrix_to_json(rot)},
                   {"substitute_for", "image data (not used at desk scale)"}}};
  Splits s{{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, n}};
  return Dataset(std::move(pts), s, std::move(prov));
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline nlohmann::json splits_to_json(const Splits& s) {
  auto r = [](const SplitRange& x) { return nlohmann::json::array({x.begin, x.end}); };
  return {{"train", r(s.train)}, {"val", r(s.val)}, {"test", r(s.test)}};
}

inline Splits splits_from_json(const nlohmann::json& j) {
  auto r = [&](const char* name) {
    const auto& a = j.at(name);
    return SplitRange{a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>()};
  };
  return {r("train"), r("val"), r("test")};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta.json");
}

/// Headerless CSV (17 significant digits) plus <path>.meta.json.
inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const Matrix& p = d.points();
    for (std::size_t i = 0; i < p.rows(); ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) {
        if (j) out << ',';
        out << format_double(p(i, j));
      }
      out << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  const nlohmann::json meta = {{"generator", d.provenance().generator},
                               {"seed", d.provenance().seed},
                               {"parameters", d.provenance().parameters},
                               {"splits", splits_to_json(d.splits())}};
  std::ofstream side(sidecar_path(path));
  if (!side) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  side << meta.dump(2) << '\n';
}

inline Matrix parse_csv(std::istream& in) {
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::string cell = line.substr(pos, comma == std::string::npos ? comma : comma - pos);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
      if (cell.empty() || used != cell.size() || !std::isfinite(v))
        throw ParseError("line " + std::to_string(line_no) + ": invalid number '" + cell + "'",
                         line_no);
      values.push_back(v);
      ++count;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (rows == 0) cols = count;
    if (count != cols)
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(cols) +
                           " columns, found " + std::to_string(count),
                       line_no);
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

struct LoadedDataset {
  Dataset dataset;
  std::optional<std::string> warning;
};

/// Reads a CSV and its sidecar. Without a sidecar the provenance is empty
/// and every row is assigned to the train split.
inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  Matrix pts = parse_csv(in);
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) {
    const std::size_t n = pts.rows();
    return {Dataset(std::move(pts), Splits{{0, n}, {n, n}, {n, n}}),
            "no sidecar " + side.string() + "; provenance empty, all rows in train split"};
  }
  std::ifstream sin(side);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(sin);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(side.string() + ": " + e.what(), 0);
  }
  Provenance prov{meta.value("generator", std::string()), meta.value("seed", std::uint64_t{0}),
                  meta.value("parameters", nlohmann::json::object())};
  return {Dataset(std::move(pts), splits_from_json(meta.at("splits")), std::move(prov)),
          std::nullopt};
}

}  // namespace nestedflow
