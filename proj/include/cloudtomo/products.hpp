#pragma once
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cloudtomo/parallel.hpp"
#include "cloudtomo/quadrature.hpp"
#include "cloudtomo/rt.hpp"

namespace cloudtomo {

/// Relative L1 reconstruction errors; eps >= 0, -1 <= delta <= 1.
struct EpsilonDelta {
  double epsilon = 0.0;
  double delta = 0.0;
};

inline EpsilonDelta epsilon_delta(const ExtinctionField& truth, const ExtinctionField& estimate) {
  if (!truth.grid.same_layout(estimate.grid))
    throw std::invalid_argument("epsilon_delta: grids differ");
  double l1_truth = 0.0, l1_est = 0.0, l1_diff = 0.0;
  for (std::size_t v = 0; v < truth.beta.size(); ++v) {
    l1_truth += std::abs(static_cast<double>(truth.beta[v]));
    l1_est += std::abs(static_cast<double>(estimate.beta[v]));
    l1_diff += std::abs(static_cast<double>(truth.beta[v]) - estimate.beta[v]);
  }
  if (!(l1_truth > 0.0)) throw std::invalid_argument("epsilon_delta: all-zero truth");
  return {l1_diff / l1_truth, (l1_truth - l1_est) / l1_truth};
}

// ---- PV cover optics ----------------------------------------------------------

/// Refraction angle into a flat cover of index n (angles in radians).
inline double snell_refract(double psi, double n) {
  return std::asin(std::sin(psi) / n);
}

/// Unpolarized Fresnel transmissivity of the cover at incidence angle psi
/// [rad]. Normal incidence uses the analytic limit.
inline double cover_transmissivity(double psi, double n) {
  if (psi < 0.0 || psi >= 0.5 * kPi) return psi >= 0.5 * kPi ? 0.0 : throw std::invalid_argument(
      "cover_transmissivity: angle out of range");
  if (psi < 1e-9) {
    double r = (n - 1.0) / (n + 1.0);
    return 1.0 - r * r;
  }
  double psit = snell_refract(psi, n);
  double sm = std::sin(psi - psit), sp = std::sin(psi + psit);
  double tm = std::tan(psi - psit), tp = std::tan(psi + psit);
  double reflect = 0.5 * (sm * sm) / (sp * sp) + 0.5 * (tm * tm) / (tp * tp);
  return 1.0 - reflect;
}

/// Mono-Si style PV panel description. The spectral response table is
/// normalized to peak 1 (the relative response cancels the scale).
struct PVSpec {
  double n = 1.5;
  std::vector<double> wavelengths_nm = {460, 560, 660, 860, 1060};
  std::vector<double> spectral_response = {0.35, 0.55, 0.72, 1.0, 0.8};  // [A/W], relative
  double bandwidth_nm = 20.0;
  int quad_mu = 16, quad_phi = 32;  // hemisphere quadrature for the GHI

  void validate() const {
    if (!(n > 1.0)) throw std::invalid_argument("PVSpec: refractive index must exceed 1");
    if (wavelengths_nm.size() != spectral_response.size() || wavelengths_nm.empty())
      throw std::invalid_argument("PVSpec: response table shape mismatch");
    for (double sr : spectral_response)
      if (!(sr >= 0)) throw std::invalid_argument("PVSpec: responses must be >= 0");
  }
};

/// Diffuse part of the (optionally cover-corrected) global horizontal
/// irradiance: hemispheric cosine-weighted quadrature of the downwelling
/// radiance sampler. The sampler receives the propagation direction.
inline double ghi_diffuse(const std::function<double(const Vec3&)>& radiance, bool corrected,
                          double n, int quad_mu = 16, int quad_phi = 32) {
  Quadrature q = gauss_legendre(quad_mu, 0.0, 1.0);
  double acc = 0.0;
  for (int i = 0; i < quad_mu; ++i) {
    double mu = q.nodes[i];  // cos of the zenith angle
    double s = std::sqrt(std::max(0.0, 1.0 - mu * mu));
    double tilde = corrected ? cover_transmissivity(std::acos(std::min(1.0, mu)), n) : 1.0;
    for (int j = 0; j < quad_phi; ++j) {
      double phi = 2.0 * kPi * (j + 0.5) / quad_phi;
      Vec3 w{s * std::cos(phi), s * std::sin(phi), -mu};  // travelling downward
      acc += q.weights[i] * (2.0 * kPi / quad_phi) * mu * radiance(w) * tilde;
    }
  }
  return acc;
}

/// Full GHI at a ground point from a solved scene: diffuse quadrature plus
/// the direct beam added analytically.
inline double ghi_at_ground(const SceneTables& scene, const SosSolution& sol, const RTConfig& cfg,
                            const Vec3& X, bool corrected, const PVSpec& pv) {
  auto sampler = [&](const Vec3& w) { return gather_radiance(scene, sol, X, w, cfg); };
  double diffuse = ghi_diffuse(sampler, corrected, pv.n, pv.quad_mu, pv.quad_phi);
  double cos_sun = std::max(0.0, -scene.sun_dir.z);
  double direct = scene.direct_beam(X) * cos_sun;
  if (corrected && cos_sun > 0.0)
    direct *= cover_transmissivity(std::acos(std::min(1.0, cos_sun)), pv.n);
  return diffuse + direct;
}

/// PV current map over ground points: five-band rectangle rule over the
/// spectral response, with the molecular extinction scaled per band by the
/// Rayleigh law relative to the solver's reference wavelength.
inline std::vector<double> pv_current(const ExtinctionField& field, const MediumOptics& optics,
                                      const AirProfile& air, const CameraRig& rig,
                                      const RTConfig& cfg, const std::vector<Vec3>& ground_points,
                                      const PVSpec& pv, const Exec& exec = Exec{}) {
  pv.validate();
  std::vector<double> current(ground_points.size(), 0.0);
  for (std::size_t b = 0; b < pv.wavelengths_nm.size(); ++b) {
    double lam = pv.wavelengths_nm[b];
    double air_scale = std::pow(cfg.wavelength_nm / lam, 4.0);
    SceneTables scene(field, optics, air, rig, air_scale);
    SosSolution sol = solve_rt(scene, cfg, exec);
    std::vector<double> ghi(ground_points.size(), 0.0);
    parallel_blocks(static_cast<int>(ground_points.size()), exec, [&](int i) {
      ghi[static_cast<std::size_t>(i)] =
          ghi_at_ground(scene, sol, cfg, ground_points[static_cast<std::size_t>(i)], true, pv);
    });
    for (std::size_t i = 0; i < current.size(); ++i)
      current[i] += pv.spectral_response[b] * ghi[i] * pv.bandwidth_nm;
  }
  return current;
}

/// Relative response of the PV current to the per-voxel posterior spread:
/// [i(beta + std) - i(beta - std)] / i(beta), with the lower field clamped
/// at zero.
inline std::vector<double> pv_relative_response(
    const ExtinctionField& beta_hat, const std::vector<double>& beta_std,
    const MediumOptics& optics, const AirProfile& air, const CameraRig& rig, const RTConfig& cfg,
    const std::vector<Vec3>& ground_points, const PVSpec& pv, const Exec& exec = Exec{}) {
  if (beta_std.size() != beta_hat.beta.size())
    throw std::invalid_argument("pv_relative_response: std field size mismatch");
  ExtinctionField lo = beta_hat, hi = beta_hat;
  for (std::size_t v = 0; v < beta_hat.beta.size(); ++v) {
    lo.beta[v] = static_cast<float>(std::max(0.0, beta_hat.beta[v] - beta_std[v]));
    hi.beta[v] = static_cast<float>(beta_hat.beta[v] + beta_std[v]);
  }
  std::vector<double> i_base = pv_current(beta_hat, optics, air, rig, cfg, ground_points, pv, exec);
  std::vector<double> i_lo = pv_current(lo, optics, air, rig, cfg, ground_points, pv, exec);
  std::vector<double> i_hi = pv_current(hi, optics, air, rig, cfg, ground_points, pv, exec);
  std::vector<double> rel(ground_points.size(), 0.0);
  for (std::size_t i = 0; i < rel.size(); ++i)
    rel[i] = i_base[i] > 0.0 ? (i_hi[i] - i_lo[i]) / i_base[i] : 0.0;
  return rel;
}

// ---- microphysics products -----------------------------------------------------

struct MicrophysConstants {
  double q_eff = 2.0;          // droplet scattering efficiency
  double rho_w = 1e6;          // liquid water density [g/m^3]
  double r_trigger_um = 14.0;  // precipitation trigger radius
  double core_margin_m = 100.0;

  void validate() const {
    if (!(q_eff > 0) || !(rho_w > 0) || !(r_trigger_um > 0) || !(core_margin_m >= 0))
      throw std::invalid_argument("MicrophysConstants: all fields must be positive");
  }
};

/// Droplet effective radius [um] from extinction [1/km] and liquid water
/// content [g/m^3].
inline double effective_radius(double beta_per_km, double lwc, const MicrophysConstants& c) {
  double beta_m = beta_per_km * kPerKmToPerM;
  if (!(beta_m > 0.0)) throw std::domain_error("effective_radius: beta must be > 0");
  return 3.0 * c.q_eff / (4.0 * c.rho_w) * lwc / beta_m * 1e6;
}

/// Exact algebraic inverse of effective_radius.
inline double lwc_from_re(double re_um, double beta_per_km, const MicrophysConstants& c) {
  double beta_m = beta_per_km * kPerKmToPerM;
  return 4.0 * c.rho_w / (3.0 * c.q_eff) * (re_um * 1e-6) * beta_m;
}

/// Adiabatic liquid water content vs height above the cloud base: either a
/// linear model c*z or a tabulated piecewise-linear profile.
struct AdiabaticProfile {
  std::vector<double> height_m;  // above cloud base, increasing
  std::vector<double> lwc;       // [g/m^3]
  double linear_coeff = 2e-3;    // [g/m^3 per m]
  bool use_table = false;

  static AdiabaticProfile linear(double coeff_g_per_m3_per_m = 2e-3) {
    AdiabaticProfile p;
    p.linear_coeff = coeff_g_per_m3_per_m;
    return p;
  }

  static AdiabaticProfile table(std::vector<double> z, std::vector<double> values) {
    AdiabaticProfile p;
    p.height_m = std::move(z);
    p.lwc = std::move(values);
    p.use_table = true;
    p.validate();
    return p;
  }

  void validate() const {
    if (!use_table) {
      if (!(linear_coeff >= 0)) throw std::invalid_argument("AdiabaticProfile: negative slope");
      return;
    }
    if (height_m.size() != lwc.size() || height_m.size() < 2)
      throw std::invalid_argument("AdiabaticProfile: table shape mismatch");
    for (std::size_t i = 1; i < height_m.size(); ++i)
      if (!(height_m[i] > height_m[i - 1]))
        throw std::invalid_argument("AdiabaticProfile: heights must increase");
    for (double v : lwc)
      if (!(v >= 0)) throw std::invalid_argument("AdiabaticProfile: negative value");
  }

  double value_at(double height_above_base) const {
    if (height_above_base <= 0.0) return 0.0;
    if (!use_table) return linear_coeff * height_above_base;
    if (height_above_base <= height_m.front()) {
      double t = height_above_base / height_m.front();
      return t * lwc.front();
    }
    if (height_above_base >= height_m.back()) return lwc.back();
    auto it = std::upper_bound(height_m.begin(), height_m.end(), height_above_base);
    std::size_t hi = static_cast<std::size_t>(it - height_m.begin());
    std::size_t lo = hi - 1;
    double t = (height_above_base - height_m[lo]) / (height_m[hi] - height_m[lo]);
    return lwc[lo] + t * (lwc[hi] - lwc[lo]);
  }
};

/// Cloud-core voxels: cloudy, and at least core_margin_m horizontally away
/// from every empty voxel of the same layer. Layers with no empty voxels are
/// all core.
inline std::vector<std::uint8_t> core_mask(const ExtinctionField& field,
                                           const MicrophysConstants& c,
                                           double cloud_threshold = 1e-6) {
  const VoxelGrid& g = field.grid;
  std::vector<std::uint8_t> core(g.size(), 0);
  for (int k = 0; k < g.nz; ++k) {
    std::vector<std::pair<double, double>> empties;
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i)
        if (field.at(i, j, k) <= cloud_threshold)
          empties.push_back({g.origin.x + (i + 0.5) * g.dx, g.origin.y + (j + 0.5) * g.dy});
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        if (field.at(i, j, k) <= cloud_threshold) continue;
        double cx = g.origin.x + (i + 0.5) * g.dx, cy = g.origin.y + (j + 0.5) * g.dy;
        bool is_core = true;
        for (const auto& [ex, ey] : empties) {
          double dx = cx - ex, dy = cy - ey;
          if (dx * dx + dy * dy < c.core_margin_m * c.core_margin_m) {
            is_core = false;
            break;
          }
        }
        if (is_core) core[g.linear(i, j, k)] = 1;
      }
  }
  return core;
}

struct ReProfileRow {
  double height_above_base;  // [m], at the layer centre
  double mean_re_um;
  int core_voxels;
  bool precipitation;  // mean effective radius above the trigger
};

/// Layer-mean effective radius over the cloud core, with the adiabatic LWC
/// substituted for the true liquid water content. Layers without core voxels
/// are omitted.
inline std::vector<ReProfileRow> core_re_profile(const ExtinctionField& field,
                                                 const AdiabaticProfile& profile,
                                                 const MicrophysConstants& c,
                                                 double cloud_base_z) {
  const VoxelGrid& g = field.grid;
  std::vector<std::uint8_t> core = core_mask(field, c);
  std::vector<ReProfileRow> rows;
  for (int k = 0; k < g.nz; ++k) {
    double z = g.origin.z + (k + 0.5) * g.dz;
    double lwc_ad = profile.value_at(z - cloud_base_z);
    double acc = 0.0;
    int count = 0;
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        std::size_t v = g.linear(i, j, k);
        if (!core[v]) continue;
        acc += effective_radius(field.beta[v], lwc_ad, c);
        ++count;
      }
    if (count == 0) continue;
    double mean = acc / count;
    rows.push_back({z - cloud_base_z, mean, count, mean > c.r_trigger_um});
  }
  return rows;
}

struct AdiabaticFractionField {
  std::vector<double> af;
  std::vector<std::uint8_t> defined;  // zero where the adiabatic LWC vanishes
  bool any_super_adiabatic = false;   // AF > 1 somewhere
};

/// AF(X) = LWC(X) / LWC_ad(Z above base); masked below the cloud base.
inline AdiabaticFractionField adiabatic_fraction(const std::vector<double>& lwc,
                                                 const VoxelGrid& grid,
                                                 const AdiabaticProfile& profile,
                                                 double cloud_base_z) {
  if (lwc.size() != grid.size())
    throw std::invalid_argument("adiabatic_fraction: field size mismatch");
  AdiabaticFractionField out;
  out.af.assign(grid.size(), 0.0);
  out.defined.assign(grid.size(), 0);
  for (std::size_t v = 0; v < grid.size(); ++v) {
    int k = static_cast<int>(v / (static_cast<std::size_t>(grid.nx) * grid.ny));
    double z = grid.origin.z + (k + 0.5) * grid.dz;
    double ad = profile.value_at(z - cloud_base_z);
    if (!(ad > 0.0)) continue;
    out.defined[v] = 1;
    out.af[v] = lwc[v] / ad;
    if (out.af[v] > 1.0) out.any_super_adiabatic = true;
  }
  return out;
}

}  // namespace cloudtomo
