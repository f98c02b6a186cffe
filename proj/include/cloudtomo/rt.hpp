#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cloudtomo/math.hpp"
#include "cloudtomo/parallel.hpp"
#include "cloudtomo/quadrature.hpp"
#include "cloudtomo/scene.hpp"

namespace cloudtomo {

/// Solver discretization knobs.
struct RTConfig {
  int max_order = 8;        // scattering-order cap K
  int n_mu = 8;             // Gauss-Legendre nodes in cos(theta)
  int n_phi = 16;           // uniform azimuth count
  double step_m = 0.0;      // ray-march step for the direct-beam source; <=0 : min voxel edge / 2
  double wavelength_nm = 672.0;

  void validate() const {
    if (max_order < 1) throw std::invalid_argument("RTConfig: max_order >= 1 required");
    if (n_mu < 1 || n_phi < 2 || n_mu * n_phi < 2)
      throw std::invalid_argument("RTConfig: need at least 2 ordinates");
    if (!(wavelength_nm > 0)) throw std::invalid_argument("RTConfig: wavelength must be > 0");
  }

  double step_for(const VoxelGrid& g) const {
    if (step_m > 0) return step_m;
    return 0.5 * std::min({g.dx, g.dy, g.dz});
  }
};

/// Discrete ordinates: Gauss-Legendre in cos(theta) x uniform azimuth.
/// Weights sum to 4*pi.
struct OrdinateSet {
  std::vector<Vec3> dir;
  std::vector<double> weight;
  std::vector<double> mu;  // z-component per ordinate

  OrdinateSet(int n_mu, int n_phi) {
    Quadrature q = gauss_legendre(n_mu);
    dir.reserve(static_cast<std::size_t>(n_mu) * n_phi);
    for (int i = 0; i < n_mu; ++i) {
      double m = q.nodes[i];
      double s = std::sqrt(std::max(0.0, 1.0 - m * m));
      for (int j = 0; j < n_phi; ++j) {
        double phi = 2.0 * kPi * (j + 0.5) / n_phi;
        dir.push_back({s * std::cos(phi), s * std::sin(phi), m});
        weight.push_back(q.weights[i] * 2.0 * kPi / n_phi);
        mu.push_back(m);
      }
    }
  }

  int count() const { return static_cast<int>(dir.size()); }
};

// Gauss-Legendre node offset for 2-point rules on a unit interval.
inline constexpr double kHalfInvSqrt3 = 0.28867513459481287;

/// One voxel crossed by a ray, with the ray parameter range inside it.
struct RaySegment {
  Index3 voxel;
  double s0, s1;
};

/// Walks the voxels crossed by the ray origin + s*dir for s in [0, s_max],
/// clipped to the grid. Calls fn for every crossed voxel in near-to-far order.
inline void traverse(const VoxelGrid& g, const Vec3& origin, const Vec3& dir, double s_max,
                     const std::function<void(const RaySegment&)>& fn) {
  const Vec3 lo = g.min_corner(), hi = g.max_corner();
  double t0 = 0.0, t1 = s_max;
  const double d[3] = {dir.x, dir.y, dir.z};
  const double o[3] = {origin.x, origin.y, origin.z};
  const double lo3[3] = {lo.x, lo.y, lo.z}, hi3[3] = {hi.x, hi.y, hi.z};
  // slab clip
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (o[a] < lo3[a] || o[a] >= hi3[a]) return;
    } else {
      double ta = (lo3[a] - o[a]) / d[a];
      double tb = (hi3[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
  }
  if (!(t1 > t0)) return;

  const double dd[3] = {g.dx, g.dy, g.dz};
  const int nn[3] = {g.nx, g.ny, g.nz};
  // entry voxel; the nudge keeps boundary hits inside the lattice
  double tin = t0 * (1.0 + 1e-14) + 1e-14;
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    double p = o[a] + tin * d[a];
    idx[a] = static_cast<int>(std::floor((p - lo3[a]) / dd[a]));
    idx[a] = std::clamp(idx[a], 0, nn[a] - 1);
  }
  int step[3];
  double t_next[3], t_delta[3];
  for (int a = 0; a < 3; ++a) {
    if (d[a] > 0) {
      step[a] = 1;
      t_delta[a] = dd[a] / d[a];
      t_next[a] = ((lo3[a] + (idx[a] + 1) * dd[a]) - o[a]) / d[a];
    } else if (d[a] < 0) {
      step[a] = -1;
      t_delta[a] = -dd[a] / d[a];
      t_next[a] = ((lo3[a] + idx[a] * dd[a]) - o[a]) / d[a];
    } else {
      step[a] = 0;
      t_delta[a] = std::numeric_limits<double>::infinity();
      t_next[a] = std::numeric_limits<double>::infinity();
    }
  }
  double t = t0;
  while (t < t1) {
    int axis = 0;
    if (t_next[1] < t_next[0]) axis = 1;
    if (t_next[2] < t_next[axis]) axis = 2;
    double t_exit = std::min(t_next[axis], t1);
    if (t_exit > t) fn(RaySegment{{idx[0], idx[1], idx[2]}, t, t_exit});
    if (t_next[axis] >= t1) break;
    t = t_next[axis];
    t_next[axis] += t_delta[axis];
    idx[axis] += step[axis];
    if (idx[axis] < 0 || idx[axis] >= nn[axis]) break;
  }
}

/// Scene bundled with the per-voxel coefficient tables the solver needs.
/// All members are immutable after construction and safe to share.
struct SceneTables {
  const VoxelGrid grid;
  const MediumOptics optics;
  std::vector<double> beta_tot_m;   // cloud + air extinction [1/m], per voxel
  std::vector<double> scat_cloud_m; // albedo_cloud * beta_cloud [1/m]
  std::vector<double> scat_air_m;   // albedo_air * beta_air [1/m], per voxel (layer value)
  std::vector<double> air_layer;    // beta_air [1/km] per z-layer
  Vec3 sun_dir;                     // propagation of sunlight
  double sun_irr = 1.0;

  SceneTables(const ExtinctionField& field, const MediumOptics& opt, const AirProfile& air,
              const CameraRig& rig, double air_scale = 1.0)
      : grid(field.grid), optics(opt), sun_dir(rig.sun_dir), sun_irr(rig.solar_irradiance) {
    field.validate();
    opt.validate();
    air.validate();
    air_layer.resize(grid.nz);
    for (int k = 0; k < grid.nz; ++k)
      air_layer[k] = air_scale * air.value_at(grid.origin.z + (k + 0.5) * grid.dz);
    std::size_t n = grid.size();
    beta_tot_m.resize(n);
    scat_cloud_m.resize(n);
    scat_air_m.resize(n);
    for (std::size_t id = 0; id < n; ++id) {
      int k = static_cast<int>(id / (static_cast<std::size_t>(grid.nx) * grid.ny));
      double bc = field.beta[id] * kPerKmToPerM;
      double ba = air_layer[k] * kPerKmToPerM;
      beta_tot_m[id] = bc + ba;
      scat_cloud_m[id] = opt.albedo_cloud * bc;
      scat_air_m[id] = opt.albedo_air * ba;
    }
  }

  double beta_at(const Index3& v) const { return beta_tot_m[grid.linear(v)]; }

  /// Optical depth along origin + s*dir for s in [0, s_max].
  double optical_depth(const Vec3& origin, const Vec3& dir, double s_max) const {
    double tau = 0.0;
    traverse(grid, origin, dir, s_max, [&](const RaySegment& r) {
      tau += beta_tot_m[grid.linear(r.voxel)] * (r.s1 - r.s0);
    });
    return tau;
  }

  /// Optical depth from X toward the sun (to the domain boundary).
  double sun_depth(const Vec3& X) const {
    return optical_depth(X, -sun_dir, std::numeric_limits<double>::infinity());
  }

  /// Direct-beam spectral irradiance at X.
  double direct_beam(const Vec3& X) const { return sun_irr * std::exp(-sun_depth(X)); }

  int ground_cell(double x, double y) const {
    int i = std::clamp(static_cast<int>(std::floor((x - grid.origin.x) / grid.dx)), 0, grid.nx - 1);
    int j = std::clamp(static_cast<int>(std::floor((y - grid.origin.y) / grid.dy)), 0, grid.ny - 1);
    return i + grid.nx * j;
  }
};

/// Transmittance between two points, composited exactly per crossed voxel.
inline double transmittance(const SceneTables& scene, const Vec3& a, const Vec3& b) {
  Vec3 d = b - a;
  double len = norm(d);
  if (len == 0.0) return 1.0;
  return std::exp(-scene.optical_depth(a, d / len, len));
}

/// Phase coupling matrices between ordinates, with quadrature weights and the
/// 1/4pi factor folded in. source[d_out] = scat * sum_in M[d_out][d_in] * I[d_in].
struct PhaseMatrices {
  int ndir;
  std::vector<double> cloud, air;       // ndir x ndir, row = outgoing
  std::vector<double> sun_cloud, sun_air;  // phase at (ordinate, sun beam)

  PhaseMatrices(const OrdinateSet& ords, const MediumOptics& opt, const Vec3& sun_dir) {
    ndir = ords.count();
    cloud.resize(static_cast<std::size_t>(ndir) * ndir);
    air.resize(cloud.size());
    sun_cloud.resize(ndir);
    sun_air.resize(ndir);
    for (int o = 0; o < ndir; ++o) {
      for (int i = 0; i < ndir; ++i) {
        double c = dot(ords.dir[o], ords.dir[i]);
        double w = ords.weight[i] / kFourPi;
        cloud[static_cast<std::size_t>(o) * ndir + i] = w * hg_phase(c, opt.g_cloud);
        air[static_cast<std::size_t>(o) * ndir + i] = w * hg_phase(c, opt.g_air);
      }
      double cs = dot(ords.dir[o], sun_dir);
      sun_cloud[o] = hg_phase(cs, opt.g_cloud) / kFourPi;
      sun_air[o] = hg_phase(cs, opt.g_air) / kFourPi;
    }
  }
};

/// Per-voxel, per-ordinate field. Layout: value(v, d) = data[v * ndir + d].
struct AngularField {
  int ndir = 0;
  std::vector<double> data;

  AngularField() = default;
  AngularField(std::size_t nvox, int nd) : ndir(nd), data(nvox * nd, 0.0) {}
  double& at(std::size_t v, int d) { return data[v * ndir + d]; }
  double at(std::size_t v, int d) const { return data[v * ndir + d]; }
  void add(const AngularField& o) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  }
};

/// Output of the successive-orders solve.
struct SosSolution {
  OrdinateSet ordinates;
  PhaseMatrices phase;
  AngularField total;                      // sum of orders 1..K
  AngularField gather;                     // sum of orders 1..K-1 (feeds the camera gather)
  std::vector<std::vector<double>> ground; // Lambertian ground radiance per order, 1..K
  std::vector<double> ground_total;        // sum of ground orders
  std::vector<double> direct;              // direct-beam irradiance at voxel centers
  std::vector<AngularField> orders;        // orders 1..K-1 when kept (for the adjoint)

  SosSolution(const OrdinateSet& o, const PhaseMatrices& p) : ordinates(o), phase(p) {}
};

namespace detail {

/// Radiance at every voxel center from a per-voxel/per-ordinate source and a
/// Lambertian ground boundary; exact per-voxel compositing along the path.
inline void sweep_order(const SceneTables& scene, const OrdinateSet& ords,
                        const AngularField& source, const std::vector<double>& ground,
                        AngularField& out, const Exec& exec) {
  const VoxelGrid& g = scene.grid;
  const std::size_t nvox = g.size();
  const int ndir = ords.count();
  parallel_blocks(ndir, exec, [&](int d) {
    const Vec3 back = -ords.dir[d];
    const bool may_hit_ground = ords.mu[d] > 0.0;  // looking back goes downward
    for (std::size_t v = 0; v < nvox; ++v) {
      Vec3 c = g.index_to_world(g.from_linear(v));
      double tau = 0.0;
      double acc = 0.0;
      double s_end = 0.0;
      traverse(g, c, back, std::numeric_limits<double>::infinity(), [&](const RaySegment& r) {
        std::size_t w = g.linear(r.voxel);
        double len = r.s1 - r.s0;
        double bm = scene.beta_tot_m[w];
        double x = bm * len;
        acc += source.at(w, d) * std::exp(-tau) * len * expm1_over(x);
        tau += x;
        s_end = r.s1;
      });
      if (may_hit_ground && !ground.empty()) {
        Vec3 exitp = c + back * s_end;
        if (exitp.z <= g.origin.z + 1e-6 * g.dz) {
          acc += ground[scene.ground_cell(exitp.x, exitp.y)] * std::exp(-tau);
        }
      }
      out.at(v, d) = acc;
    }
  });
}

/// source_{k+1} from radiance_k via the phase matrices.
inline void scatter_order(const SceneTables& scene, const PhaseMatrices& pm,
                          const AngularField& rad, AngularField& src, const Exec& exec) {
  const std::size_t nvox = scene.grid.size();
  const int ndir = pm.ndir;
  int nblocks = std::min<std::size_t>(64, nvox);
  parallel_blocks(nblocks, exec, [&](int b) {
    std::size_t lo = nvox * b / nblocks, hi = nvox * (b + 1) / nblocks;
    for (std::size_t v = lo; v < hi; ++v) {
      const double sc = scene.scat_cloud_m[v];
      const double sa = scene.scat_air_m[v];
      const double* I = &rad.data[v * ndir];
      double* S = &src.data[v * ndir];
      if (sc == 0.0 && sa == 0.0) {
        std::fill(S, S + ndir, 0.0);
        continue;
      }
      for (int o = 0; o < ndir; ++o) {
        const double* mc = &pm.cloud[static_cast<std::size_t>(o) * ndir];
        const double* ma = &pm.air[static_cast<std::size_t>(o) * ndir];
        double ac = 0.0, aa = 0.0;
        for (int i = 0; i < ndir; ++i) {
          ac += mc[i] * I[i];
          aa += ma[i] * I[i];
        }
        S[o] = sc * ac + sa * aa;
      }
    }
  });
}

/// Downwelling flux on each ground cell from one order's radiance.
inline std::vector<double> ground_flux(const SceneTables& scene, const OrdinateSet& ords,
                                       const AngularField& rad) {
  const VoxelGrid& g = scene.grid;
  std::vector<double> flux(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
  const int ndir = ords.count();
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      std::size_t v = g.linear(i, j, 0);
      double e = 0.0;
      for (int d = 0; d < ndir; ++d)
        if (ords.mu[d] < 0.0) e += -ords.mu[d] * ords.weight[d] * rad.at(v, d);
      flux[static_cast<std::size_t>(i) + g.nx * j] = e;
    }
  return flux;
}

}  // namespace detail

/// Successive-orders-of-scattering solve up to order K. The returned solution
/// carries everything the renderer and the ground products need.
inline SosSolution solve_rt(const SceneTables& scene, const RTConfig& cfg,
                            const Exec& exec = Exec{}, bool keep_orders = false) {
  cfg.validate();
  const MediumOptics& optics = scene.optics;
  OrdinateSet ords(cfg.n_mu, cfg.n_phi);
  PhaseMatrices pm(ords, optics, scene.sun_dir);
  const VoxelGrid& g = scene.grid;
  const std::size_t nvox = g.size();
  const int ndir = ords.count();
  const int K = cfg.max_order;

  SosSolution sol(ords, pm);
  sol.total = AngularField(nvox, ndir);
  sol.gather = AngularField(nvox, ndir);
  sol.direct.resize(nvox);

  // direct beam at voxel centers
  int nblocks = std::min<std::size_t>(64, nvox);
  parallel_blocks(nblocks, exec, [&](int b) {
    std::size_t lo = nvox * b / nblocks, hi = nvox * (b + 1) / nblocks;
    for (std::size_t v = lo; v < hi; ++v)
      sol.direct[v] = scene.direct_beam(g.index_to_world(g.from_linear(v)));
  });

  // first-order source and ground bounce of the direct beam
  AngularField src(nvox, ndir);
  for (std::size_t v = 0; v < nvox; ++v) {
    double f = sol.direct[v];
    if (f == 0.0) continue;
    const double sc = scene.scat_cloud_m[v];
    const double sa = scene.scat_air_m[v];
    for (int d = 0; d < ndir; ++d) src.at(v, d) = (sc * pm.sun_cloud[d] + sa * pm.sun_air[d]) * f;
  }
  std::vector<double> bounce(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
  const double cos_sun = std::max(0.0, -scene.sun_dir.z);
  if (optics.ground_albedo > 0.0 && cos_sun > 0.0) {
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        Vec3 p{g.origin.x + (i + 0.5) * g.dx, g.origin.y + (j + 0.5) * g.dy, g.origin.z};
        bounce[static_cast<std::size_t>(i) + g.nx * j] =
            optics.ground_albedo / kPi * cos_sun * scene.direct_beam(p);
      }
  }

  sol.ground_total.assign(bounce.size(), 0.0);
  AngularField rad(nvox, ndir);
  for (int k = 1; k <= K; ++k) {
    sol.ground.push_back(bounce);
    for (std::size_t i = 0; i < bounce.size(); ++i) sol.ground_total[i] += bounce[i];
    detail::sweep_order(scene, ords, src, bounce, rad, exec);
    sol.total.add(rad);
    if (k < K) {
      sol.gather.add(rad);
      if (keep_orders) sol.orders.push_back(rad);
      detail::scatter_order(scene, pm, rad, src, exec);
      if (optics.ground_albedo > 0.0) {
        std::vector<double> e = detail::ground_flux(scene, ords, rad);
        for (std::size_t i = 0; i < e.size(); ++i) bounce[i] = optics.ground_albedo / kPi * e[i];
      } else {
        std::fill(bounce.begin(), bounce.end(), 0.0);
      }
    }
  }
  return sol;
}

inline SosSolution solve_rt(const ExtinctionField& field, const MediumOptics& optics,
                            const AirProfile& air, const CameraRig& rig, const RTConfig& cfg,
                            const Exec& exec = Exec{}, bool keep_orders = false,
                            double air_scale = 1.0) {
  SceneTables scene(field, optics, air, rig, air_scale);
  return solve_rt(scene, cfg, exec, keep_orders);
}

/// Radiance arriving at X with propagation direction w (unit), from the solved
/// scattering field: one more scattering event gathered along the line of
/// sight, plus the first-order term evaluated with the continuous direct beam
/// (sub-voxel quadrature at the configured march step), plus the ground term.
inline double gather_radiance(const SceneTables& scene, const SosSolution& sol, const Vec3& X,
                              const Vec3& w_prop, const RTConfig& cfg) {
  const VoxelGrid& g = scene.grid;
  const int ndir = sol.ordinates.count();
  const double step = cfg.step_for(g);
  const Vec3 back = -w_prop;
  // phase values toward the exit direction for each ordinate and the sun beam
  std::vector<double> pc(ndir), pa(ndir);
  for (int d = 0; d < ndir; ++d) {
    double c = dot(w_prop, sol.ordinates.dir[d]);
    pc[d] = sol.ordinates.weight[d] / kFourPi * hg_phase(c, scene.optics.g_cloud);
    pa[d] = sol.ordinates.weight[d] / kFourPi * hg_phase(c, scene.optics.g_air);
  }
  double cs = dot(w_prop, scene.sun_dir);
  const double ps_c = hg_phase(cs, scene.optics.g_cloud) / kFourPi;
  const double ps_a = hg_phase(cs, scene.optics.g_air) / kFourPi;

  double tau = 0.0, acc = 0.0, s_end = 0.0;
  bool entered = false;
  traverse(g, X, back, std::numeric_limits<double>::infinity(), [&](const RaySegment& r) {
    entered = true;
    std::size_t v = g.linear(r.voxel);
    double len = r.s1 - r.s0;
    double bm = scene.beta_tot_m[v];
    const double sc = scene.scat_cloud_m[v];
    const double sa = scene.scat_air_m[v];
    if (sc != 0.0 || sa != 0.0) {
      // multiply-scattered source, constant inside the voxel
      const double* I = &sol.gather.data[v * ndir];
      double gc = 0.0, ga = 0.0;
      for (int d = 0; d < ndir; ++d) {
        gc += pc[d] * I[d];
        ga += pa[d] * I[d];
      }
      acc += (sc * gc + sa * ga) * std::exp(-tau) * len * expm1_over(bm * len);
      // first order: direct beam integrated on sub-voxel steps, two
      // Gauss-Legendre nodes per step
      double coef = sc * ps_c + sa * ps_a;
      if (coef > 0.0) {
        int nsub = std::max(1, static_cast<int>(std::ceil(len / step)));
        double h = len / nsub;
        for (int m = 0; m < nsub; ++m) {
          for (double off : {0.5 - kHalfInvSqrt3, 0.5 + kHalfInvSqrt3}) {
            double sm = r.s0 + (m + off) * h;
            Vec3 Xm = X + back * sm;
            double f = scene.direct_beam(Xm);
            acc += coef * f * std::exp(-(tau + bm * (sm - r.s0))) * 0.5 * h;
          }
        }
      }
    }
    tau += bm * len;
    s_end = r.s1;
  });
  if (entered && !sol.ground_total.empty()) {
    Vec3 exitp = X + back * s_end;
    if (back.z < 0.0 && exitp.z <= g.origin.z + 1e-6 * g.dz)
      acc += sol.ground_total[scene.ground_cell(exitp.x, exitp.y)] * std::exp(-tau);
  }
  return acc;
}

/// Renders noiseless radiance images for every camera of the rig.
inline ImageSet render(const SceneTables& scene, const SosSolution& sol, const CameraRig& rig,
                       const RTConfig& cfg, const Exec& exec = Exec{}) {
  rig.validate();
  ImageSet out = ImageSet::like(rig);
  out.units = ImageUnits::Radiance;
  for (std::size_t c = 0; c < rig.cameras.size(); ++c) {
    const Camera& cam = rig.cameras[c];
    ImageSet::View& view = out.views[c];
    parallel_blocks(cam.height, exec, [&](int y) {
      for (int x = 0; x < cam.width; ++x) {
        Vec3 d = cam.pixel_ray(x, y);
        view.at(x, y) = gather_radiance(scene, sol, cam.center, -d, cfg);
      }
    });
  }
  return out;
}

inline ImageSet render(const ExtinctionField& field, const MediumOptics& optics,
                       const AirProfile& air, const CameraRig& rig, const RTConfig& cfg,
                       const Exec& exec = Exec{}, double air_scale = 1.0) {
  SceneTables scene(field, optics, air, rig, air_scale);
  SosSolution sol = solve_rt(scene, cfg, exec, false);
  return render(scene, sol, rig, cfg, exec);
}

}  // namespace cloudtomo
