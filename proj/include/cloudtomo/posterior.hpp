#pragma once
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cloudtomo/io.hpp"
#include "cloudtomo/scene.hpp"

namespace cloudtomo {

/// Discretization of the extinction posterior: Q bins of width dbeta,
/// bin q representing the value q * dbeta [1/km].
struct PosteriorSpec {
  int Q = 301;
  double dbeta = 1.0;

  void validate() const {
    if (Q < 2) throw std::invalid_argument("PosteriorSpec: Q >= 2 required");
    if (!(dbeta > 0)) throw std::invalid_argument("PosteriorSpec: dbeta > 0 required");
  }

  double max_beta() const { return Q * dbeta; }

  /// True-posterior bin of a known extinction (floor rule, clamped to range).
  int bin_of(double beta) const {
    int q = static_cast<int>(std::floor(beta / dbeta));
    return std::clamp(q, 0, Q - 1);
  }
};

inline void check_probability(std::span<const double> p, double tol = 1e-6) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x))
      throw std::invalid_argument("probability vector has negative or non-finite entries");
    s += x;
  }
  if (std::abs(s - 1.0) > tol) throw std::invalid_argument("probability vector does not sum to 1");
}

/// MAP estimate; ties break toward the smaller bin.
inline double map_estimate(std::span<const double> p, const PosteriorSpec& spec) {
  int best = 0;
  for (int q = 1; q < spec.Q; ++q)
    if (p[q] > p[best]) best = q;
  return best * spec.dbeta;
}

/// Posterior mean.
inline double mean_estimate(std::span<const double> p, const PosteriorSpec& spec) {
  double s = 0.0;
  for (int q = 0; q < spec.Q; ++q) s += q * spec.dbeta * p[q];
  return s;
}

/// Shannon entropy over the bins divided by log2(Q); 0 for a delta,
/// 1 for the uniform vector.
inline double normalized_entropy(std::span<const double> p, const PosteriorSpec& spec) {
  double h = 0.0;
  for (int q = 0; q < spec.Q; ++q)
    if (p[q] > 0.0) h -= p[q] * std::log2(p[q]);
  return h / std::log2(static_cast<double>(spec.Q));
}

/// Standard deviation of the binned posterior.
inline double posterior_std(std::span<const double> p, const PosteriorSpec& spec) {
  double mean = mean_estimate(p, spec);
  double var = 0.0;
  for (int q = 0; q < spec.Q; ++q) {
    double d = q * spec.dbeta - mean;
    var += p[q] * d * d;
  }
  return std::sqrt(std::max(0.0, var));
}

/// Differentiable MAP surrogate: bin values averaged under the
/// alpha-amplified, renormalized distribution.
inline double smoothmax_estimate(std::span<const double> p, const PosteriorSpec& spec,
                                 double alpha = 10.0) {
  double s = 0.0, num = 0.0;
  for (int q = 0; q < spec.Q; ++q) {
    double t = std::pow(std::max(0.0, p[q]), alpha);
    s += t;
    num += t * (q * spec.dbeta);
  }
  if (s <= 0.0) throw std::runtime_error("smoothmax_estimate: vanishing amplified mass");
  return num / s;
}

/// KL divergence sum_q p log(p/q) in nats; zero-probability reference bins
/// are floored to keep the sum finite.
inline double kl_nats(std::span<const double> p, std::span<const double> q,
                      double floor_q = 1e-300) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_nats: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor_q)));
  }
  return kl;
}

/// Sparse per-voxel posteriors over a grid: only queried voxels are stored,
/// everything else is implicitly a delta at bin 0.
struct PosteriorGrid {
  PosteriorSpec spec;
  VoxelGrid grid;
  std::vector<std::uint32_t> voxels;  // linear indices of queried voxels
  std::vector<float> probs;           // voxels.size() x Q

  std::size_t count() const { return voxels.size(); }

  std::span<const float> row(std::size_t i) const {
    return {probs.data() + i * static_cast<std::size_t>(spec.Q),
            static_cast<std::size_t>(spec.Q)};
  }

  /// Dense probability vector for one queried row.
  std::vector<double> row_dense(std::size_t i) const {
    auto r = row(i);
    return std::vector<double>(r.begin(), r.end());
  }

  /// Probability vector at a voxel; delta at bin 0 when not queried.
  std::vector<double> at_voxel(std::uint32_t linear) const {
    for (std::size_t i = 0; i < voxels.size(); ++i)
      if (voxels[i] == linear) return row_dense(i);
    std::vector<double> delta(static_cast<std::size_t>(spec.Q), 0.0);
    delta[0] = 1.0;
    return delta;
  }

  void validate() const {
    spec.validate();
    if (probs.size() != voxels.size() * static_cast<std::size_t>(spec.Q))
      throw std::invalid_argument("PosteriorGrid: payload size mismatch");
    for (std::size_t i = 0; i < voxels.size(); ++i) {
      auto r = row_dense(i);
      check_probability(r);
    }
  }
};

inline void save_pgrid(const std::string& path, const PosteriorGrid& pg) {
  json h;
  h["magic"] = "PGR1";
  h["Q"] = pg.spec.Q;
  h["dbeta"] = pg.spec.dbeta;
  h["grid"] = {{"nx", pg.grid.nx}, {"ny", pg.grid.ny}, {"nz", pg.grid.nz},
               {"dx", pg.grid.dx}, {"dy", pg.grid.dy}, {"dz", pg.grid.dz},
               {"origin", {pg.grid.origin.x, pg.grid.origin.y, pg.grid.origin.z}}};
  h["voxels"] = pg.voxels;
  h["dtype"] = "f32le";
  write_header_payload(path, h, pg.probs);
}

inline PosteriorGrid load_pgrid(const std::string& path) {
  std::vector<float> payload;
  json h = read_header_payload(path, payload);
  expect_magic(h, "PGR1", path);
  PosteriorGrid pg;
  pg.spec.Q = h.at("Q").get<int>();
  pg.spec.dbeta = h.at("dbeta").get<double>();
  const json& gj = h.at("grid");
  pg.grid = VoxelGrid(gj.at("nx").get<int>(), gj.at("ny").get<int>(), gj.at("nz").get<int>(),
                      gj.at("dx").get<double>(), gj.at("dy").get<double>(),
                      gj.at("dz").get<double>(),
                      Vec3{gj.at("origin")[0].get<double>(), gj.at("origin")[1].get<double>(),
                           gj.at("origin")[2].get<double>()});
  pg.voxels = h.at("voxels").get<std::vector<std::uint32_t>>();
  pg.probs = std::move(payload);
  if (pg.probs.size() != pg.voxels.size() * static_cast<std::size_t>(pg.spec.Q))
    throw std::runtime_error("pgrid payload size mismatch: " + path);
  return pg;
}

}  // namespace cloudtomo
