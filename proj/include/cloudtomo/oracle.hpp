#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cloudtomo/parallel.hpp"
#include "cloudtomo/posterior.hpp"
#include "cloudtomo/rng.hpp"
#include "cloudtomo/rt.hpp"
#include "cloudtomo/sensor.hpp"
#include "cloudtomo/training.hpp"

namespace cloudtomo {

/// Two-mode Gaussian mixture prior over the extinction of a single voxel,
/// truncated at zero (rejection; the default modes make truncation
/// negligible).
struct BimodalPrior {
  double mean_low = 42.0, mean_high = 75.0;  // [1/km]
  double std = 5.0;
  double weight_low = 0.75;

  void validate() const {
    if (!(std > 0)) throw std::invalid_argument("BimodalPrior: std must be > 0");
    if (!(weight_low >= 0 && weight_low <= 1))
      throw std::invalid_argument("BimodalPrior: weight must be in [0,1]");
  }

  double density(double beta) const {
    auto g = [&](double mu) {
      double z = (beta - mu) / std;
      return std::exp(-0.5 * z * z) / (std * std::sqrt(2.0 * kPi));
    };
    return weight_low * g(mean_low) + (1.0 - weight_low) * g(mean_high);
  }

  double sample(Rng& rng) const {
    for (;;) {
      double mu = rng.uniform() < weight_low ? mean_low : mean_high;
      double b = rng.normal(mu, std);
      if (b >= 0.0) return b;
    }
  }
};

/// Log-normal-shaped prior with density proportional to
/// (scale/beta) * exp(-k [ln(beta/scale) + shift]^2); the normalization
/// constant is computed numerically. With the defaults, ln(beta/scale) is
/// normal with mean -1 and variance 1/16.
struct LogNormalPrior {
  double scale = 160.0;  // [1/km]
  double k = 8.0;
  double shift = 1.0;

  double unnormalized(double beta) const {
    if (!(beta > 0.0)) return 0.0;
    double u = std::log(beta / scale) + shift;
    return (scale / beta) * std::exp(-k * u * u);
  }

  /// Numeric normalization over a wide support.
  double normalizer() const {
    if (norm_ == 0.0) {
      const int n = 200000;
      const double lo = 1e-4, hi = scale * 4.0;
      double acc = 0.0;
      double prev = unnormalized(lo);
      for (int i = 1; i <= n; ++i) {
        double b = lo + (hi - lo) * i / n;
        double cur = unnormalized(b);
        acc += 0.5 * (prev + cur) * (hi - lo) / n;
        prev = cur;
      }
      norm_ = 1.0 / acc;
    }
    return norm_;
  }

  double density(double beta) const { return normalizer() * unnormalized(beta); }

  double sigma_log() const { return std::sqrt(1.0 / (2.0 * k)); }

  double sample(Rng& rng) const {
    return scale * std::exp(rng.normal(-shift, sigma_log()));
  }

 private:
  mutable double norm_ = 0.0;
};

// ---- single-voxel Bayes oracle ---------------------------------------------

/// Continuous posterior density over a beta grid, normalized by trapezoid
/// quadrature.
struct BayesResult {
  std::vector<double> beta_grid;
  std::vector<double> density;

  double integral() const {
    double acc = 0.0;
    for (std::size_t i = 1; i < beta_grid.size(); ++i)
      acc += 0.5 * (density[i - 1] + density[i]) * (beta_grid[i] - beta_grid[i - 1]);
    return acc;
  }

  /// Posterior mass within [lo, hi].
  double mass(double lo, double hi) const {
    double acc = 0.0;
    for (std::size_t i = 1; i < beta_grid.size(); ++i) {
      double a = beta_grid[i - 1], b = beta_grid[i];
      double ov_lo = std::max(a, lo), ov_hi = std::min(b, hi);
      if (ov_hi <= ov_lo) continue;
      auto lerp = [&](double x) {
        double t = (x - a) / (b - a);
        return density[i - 1] + t * (density[i] - density[i - 1]);
      };
      acc += 0.5 * (lerp(ov_lo) + lerp(ov_hi)) * (ov_hi - ov_lo);
    }
    return acc;
  }
};

/// Uniformly spaced grid over [0, spec.max_beta()] at half-bin resolution.
inline std::vector<double> default_bayes_grid(const PosteriorSpec& spec) {
  std::vector<double> g;
  double step = 0.5 * spec.dbeta;
  for (double b = 0.0; b <= spec.max_beta() + 1e-9; b += step) g.push_back(b);
  return g;
}

/// Brute-force posterior over one unknown voxel: renders the scene for every
/// grid value and combines the image likelihood with the prior. Points where
/// the prior is below prior_cut * max(prior) are skipped (their posterior is
/// forced to zero without spending a render).
inline BayesResult bayes_posterior(const ExtinctionField& base, const Index3& voxel,
                                   const std::function<double(double)>& prior_density,
                                   const ImageSet& observed, const CameraRig& rig,
                                   const MediumOptics& optics, const AirProfile& air,
                                   const RTConfig& cfg, const SensorSpec& sensor,
                                   const std::vector<double>& beta_grid,
                                   const Exec& exec = Exec{}, double prior_cut = 0.0) {
  if (beta_grid.size() < 2) throw std::invalid_argument("bayes_posterior: grid too small");
  const bool have_data = !rig.cameras.empty() && !observed.views.empty();
  if (have_data && observed.units != ImageUnits::Graylevel)
    throw std::invalid_argument("bayes_posterior: observation must be graylevel");

  std::vector<double> log_prior(beta_grid.size());
  double max_prior = 0.0;
  for (std::size_t i = 0; i < beta_grid.size(); ++i)
    max_prior = std::max(max_prior, prior_density(beta_grid[i]));
  std::vector<char> evaluate(beta_grid.size(), 1);
  for (std::size_t i = 0; i < beta_grid.size(); ++i) {
    double p = prior_density(beta_grid[i]);
    log_prior[i] = p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    if (p < prior_cut * max_prior) evaluate[i] = 0;
  }

  std::vector<double> logpost(beta_grid.size(), -std::numeric_limits<double>::infinity());
  parallel_blocks(static_cast<int>(beta_grid.size()), exec, [&](int i) {
    if (!evaluate[static_cast<std::size_t>(i)]) return;
    double lp = log_prior[static_cast<std::size_t>(i)];
    if (!std::isfinite(lp)) return;
    if (have_data) {
      ExtinctionField f = base;
      f.beta[f.grid.linear(voxel)] = static_cast<float>(beta_grid[static_cast<std::size_t>(i)]);
      ImageSet expected = render(f, optics, air, rig, cfg, Exec{1});
      lp += imageset_log_likelihood(observed, expected, sensor);
    }
    logpost[static_cast<std::size_t>(i)] = lp;
  });

  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logpost) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw std::runtime_error("bayes_posterior: all grid points excluded");

  BayesResult res;
  res.beta_grid = beta_grid;
  res.density.resize(beta_grid.size());
  for (std::size_t i = 0; i < beta_grid.size(); ++i)
    res.density[i] = std::isfinite(logpost[i]) ? std::exp(logpost[i] - mx) : 0.0;
  double z = res.integral();
  if (!(z > 0.0)) throw std::runtime_error("bayes_posterior: zero posterior mass");
  for (double& d : res.density) d /= z;
  return res;
}

/// Integrates a piecewise-linear density over the posterior bins
/// [q*dbeta, (q+1)*dbeta); the result sums to the grid's total mass.
inline std::vector<double> bin_density(const std::vector<double>& beta_grid,
                                       const std::vector<double>& density,
                                       const PosteriorSpec& spec) {
  std::vector<double> bins(static_cast<std::size_t>(spec.Q), 0.0);
  for (std::size_t i = 1; i < beta_grid.size(); ++i) {
    double a = beta_grid[i - 1], b = beta_grid[i];
    if (!(b > a)) continue;
    int qa = std::clamp(static_cast<int>(std::floor(a / spec.dbeta)), 0, spec.Q - 1);
    int qb = std::clamp(static_cast<int>(std::floor((b - 1e-12) / spec.dbeta)), 0, spec.Q - 1);
    for (int q = qa; q <= qb; ++q) {
      double lo = std::max(a, q * spec.dbeta);
      double hi = std::min(b, (q + 1) * spec.dbeta);
      if (hi <= lo) continue;
      auto lerp = [&](double x) {
        double t = (x - a) / (b - a);
        return density[i - 1] + t * (density[i] - density[i - 1]);
      };
      bins[static_cast<std::size_t>(q)] += 0.5 * (lerp(lo) + lerp(hi)) * (hi - lo);
    }
  }
  return bins;
}

/// Binned prior from a continuous density (fine trapezoid per bin).
inline std::vector<double> bin_prior(const std::function<double(double)>& density,
                                     const PosteriorSpec& spec, int samples_per_bin = 16) {
  std::vector<double> bins(static_cast<std::size_t>(spec.Q), 0.0);
  for (int q = 0; q < spec.Q; ++q) {
    double lo = q * spec.dbeta, hi = (q + 1) * spec.dbeta;
    double acc = 0.0, prev = density(lo);
    for (int i = 1; i <= samples_per_bin; ++i) {
      double b = lo + (hi - lo) * i / samples_per_bin;
      double cur = density(b);
      acc += 0.5 * (prev + cur) * (hi - lo) / samples_per_bin;
      prev = cur;
    }
    bins[static_cast<std::size_t>(q)] = acc;
  }
  double s = 0.0;
  for (double b : bins) s += b;
  if (s > 0.0)
    for (double& b : bins) b /= s;
  return bins;
}

// ---- spherical three-shell scene --------------------------------------------

enum class Shell : std::uint8_t { Empty = 0, Core = 1, Inter = 2, Outer = 3 };

struct SphericalCloudSpec {
  Vec3 center{800.0, 800.0, 1280.0};  // [m]
  double r_core = 60.0, r_inter = 500.0, r_outer = 600.0;
  double beta_inter = 190.0;  // [1/km]
  LogNormalPrior prior;

  void validate() const {
    if (!(r_core < r_inter && r_inter < r_outer))
      throw std::invalid_argument("SphericalCloudSpec: radii must increase");
    if (!(beta_inter >= 0)) throw std::invalid_argument("SphericalCloudSpec: beta must be >= 0");
  }
};

struct SphericalCloud {
  ExtinctionField field;
  std::vector<std::uint8_t> labels;  // Shell per voxel
  double beta_core = 0.0, beta_outer = 0.0;
};

/// Three concentric shells around the spec centre; core and outer values are
/// independent draws from the log-normal prior.
inline SphericalCloud make_spherical_cloud(const SphericalCloudSpec& spec, std::uint64_t seed,
                                           const VoxelGrid& grid) {
  spec.validate();
  Rng rng(seed);
  SphericalCloud out{ExtinctionField(grid, 0.f), std::vector<std::uint8_t>(grid.size(), 0), 0, 0};
  out.beta_core = spec.prior.sample(rng);
  out.beta_outer = spec.prior.sample(rng);
  for (std::size_t v = 0; v < grid.size(); ++v) {
    Vec3 X = grid.index_to_world(grid.from_linear(v));
    double d = norm(X - spec.center);
    if (d <= spec.r_core) {
      out.field.beta[v] = static_cast<float>(out.beta_core);
      out.labels[v] = static_cast<std::uint8_t>(Shell::Core);
    } else if (d <= spec.r_inter) {
      out.field.beta[v] = static_cast<float>(spec.beta_inter);
      out.labels[v] = static_cast<std::uint8_t>(Shell::Inter);
    } else if (d <= spec.r_outer) {
      out.field.beta[v] = static_cast<float>(out.beta_outer);
      out.labels[v] = static_cast<std::uint8_t>(Shell::Outer);
    }
  }
  return out;
}

/// Arithmetic mean of the per-voxel posteriors across one shell.
inline std::vector<double> shell_average_posterior(const PosteriorGrid& pg,
                                                   const std::vector<std::uint8_t>& labels,
                                                   Shell shell) {
  if (labels.size() != pg.grid.size())
    throw std::invalid_argument("shell_average_posterior: label size mismatch");
  std::vector<double> acc(static_cast<std::size_t>(pg.spec.Q), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < pg.voxels.size(); ++i) {
    if (labels[pg.voxels[i]] != static_cast<std::uint8_t>(shell)) continue;
    auto row = pg.row(i);
    for (int q = 0; q < pg.spec.Q; ++q) acc[static_cast<std::size_t>(q)] += row[q];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("shell_average_posterior: empty shell");
  for (double& x : acc) x /= static_cast<double>(count);
  return acc;
}

// ---- procedural blob clouds --------------------------------------------------

/// Parameters of the procedural puff-sum cloud generator. Two classes with
/// disjoint peak ranges serve as the in/out-of-distribution pair.
struct BlobCloudClass {
  int blobs_min = 2, blobs_max = 4;
  double radius_min_frac = 0.15, radius_max_frac = 0.3;  // of the domain diagonal
  double peak_min = 30.0, peak_max = 90.0;               // [1/km]
  double vertical_exponent = 0.5;  // density rises with height inside the cloud layer
  std::uint64_t seed = 0;

  void validate() const {
    if (blobs_min < 1 || blobs_max < blobs_min)
      throw std::invalid_argument("BlobCloudClass: bad blob counts");
    if (!(peak_min >= 0 && peak_max >= peak_min))
      throw std::invalid_argument("BlobCloudClass: bad peak range");
  }
};

/// One random puff-sum extinction field, clamped to the class peak.
inline ExtinctionField gen_blob_field(const BlobCloudClass& cls, const VoxelGrid& grid,
                                      std::uint64_t seed) {
  cls.validate();
  Rng rng(seed);
  ExtinctionField f(grid, 0.f);
  Vec3 lo = grid.min_corner(), hi = grid.max_corner();
  double diag = norm(hi - lo);
  int n_blobs = cls.blobs_min + static_cast<int>(rng.below(cls.blobs_max - cls.blobs_min + 1));
  struct Puff {
    Vec3 c;
    double sigma, peak;
  };
  std::vector<Puff> puffs;
  for (int b = 0; b < n_blobs; ++b) {
    Vec3 c{rng.uniform(lo.x + 0.25 * (hi.x - lo.x), hi.x - 0.25 * (hi.x - lo.x)),
           rng.uniform(lo.y + 0.25 * (hi.y - lo.y), hi.y - 0.25 * (hi.y - lo.y)),
           rng.uniform(lo.z + 0.3 * (hi.z - lo.z), hi.z - 0.2 * (hi.z - lo.z))};
    double r = diag * rng.uniform(cls.radius_min_frac, cls.radius_max_frac);
    puffs.push_back({c, 0.5 * r, rng.uniform(cls.peak_min, cls.peak_max)});
  }
  for (std::size_t v = 0; v < grid.size(); ++v) {
    Vec3 X = grid.index_to_world(grid.from_linear(v));
    double val = 0.0;
    for (const Puff& p : puffs) {
      Vec3 d = X - p.c;
      val += p.peak * std::exp(-0.5 * dot(d, d) / (p.sigma * p.sigma));
    }
    if (cls.vertical_exponent > 0.0) {
      double zr = (X.z - lo.z) / (hi.z - lo.z);
      val *= std::pow(zr, cls.vertical_exponent);
    }
    if (val < 0.05) val = 0.0;  // trim the far tails so most of the scene is empty
    f.beta[v] = static_cast<float>(std::min(val, cls.peak_max));
  }
  return f;
}

/// Environment shared by generated datasets.
struct DataGenEnv {
  MediumOptics optics;
  AirProfile air = AirProfile::exponential();
  RTConfig rt;
  SensorSpec sensor;
};

/// Renders and degrades `count` random scenes of a class. Deterministic per
/// class seed; scene i only depends on (seed, i).
inline std::vector<LabeledScene> gen_blob_class(const BlobCloudClass& cls, int count,
                                                const VoxelGrid& grid, const CameraRig& rig,
                                                const DataGenEnv& env, const Exec& exec = Exec{}) {
  std::vector<LabeledScene> scenes(static_cast<std::size_t>(count));
  parallel_blocks(count, exec, [&](int i) {
    ExtinctionField f = gen_blob_field(cls, grid, derive_seed(cls.seed, static_cast<std::uint64_t>(i)));
    ImageSet clean = render(f, env.optics, env.air, rig, env.rt, Exec{1});
    ImageSet noisy =
        apply_noise(clean, env.sensor, derive_seed(cls.seed, 0x10000000ull + static_cast<std::uint64_t>(i)));
    scenes[static_cast<std::size_t>(i)] = LabeledScene{std::move(f), std::move(noisy), rig};
  });
  return scenes;
}

/// Labeled scenes that differ from a base field in one voxel whose value is
/// drawn from the prior.
inline std::vector<LabeledScene> make_single_voxel_dataset(
    const ExtinctionField& base, const Index3& voxel, const BimodalPrior& prior,
    const CameraRig& rig, const DataGenEnv& env, int count, std::uint64_t seed,
    const Exec& exec = Exec{}) {
  std::vector<LabeledScene> scenes(static_cast<std::size_t>(count));
  parallel_blocks(count, exec, [&](int i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    ExtinctionField f = base;
    f.beta[f.grid.linear(voxel)] = static_cast<float>(prior.sample(rng));
    ImageSet clean = render(f, env.optics, env.air, rig, env.rt, Exec{1});
    ImageSet noisy =
        apply_noise(clean, env.sensor, derive_seed(seed, 0x20000000ull + static_cast<std::uint64_t>(i)));
    scenes[static_cast<std::size_t>(i)] = LabeledScene{std::move(f), std::move(noisy), rig};
  });
  return scenes;
}

}  // namespace cloudtomo
