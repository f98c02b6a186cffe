#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloudtomo/rt.hpp"
#include "cloudtomo/sensor.hpp"

namespace cloudtomo {

/// Per-voxel gradient of an image-residual loss with respect to the cloud
/// extinction, in units of 1/(1/km).
struct RenderGradient {
  VoxelGrid grid;
  std::vector<double> d_beta;

  explicit RenderGradient(const VoxelGrid& g) : grid(g), d_beta(g.size(), 0.0) {}
};

namespace detail {

/// Everything the reverse pass reuses from the forward solve.
struct AdjointWorkspace {
  SceneTables scene;
  OrdinateSet ords;
  PhaseMatrices pm;
  std::vector<double> direct;               // F at voxel centers
  std::vector<AngularField> sources;        // S_k, k = 1..K-1
  std::vector<AngularField> radiances;      // I_k, k = 1..K-1
  std::vector<std::vector<double>> ground;  // B_k, k = 1..K
  AngularField gather;                      // sum I_1..I_{K-1}
  std::vector<double> ground_total;         // sum B_1..B_K
};

/// Forward solve that keeps per-order sources and radiances. Order K's
/// radiance is never formed: rendered pixels only consume orders 1..K-1
/// plus the ground bounce of order K.
inline AdjointWorkspace forward_for_adjoint(const ExtinctionField& field,
                                            const MediumOptics& optics, const AirProfile& air,
                                            const CameraRig& rig, const RTConfig& cfg,
                                            const Exec& exec) {
  cfg.validate();
  AdjointWorkspace ws{SceneTables(field, optics, air, rig),
                      OrdinateSet(cfg.n_mu, cfg.n_phi),
                      PhaseMatrices(OrdinateSet(cfg.n_mu, cfg.n_phi), optics, rig.sun_dir),
                      {}, {}, {}, {}, {}, {}};
  const VoxelGrid& g = ws.scene.grid;
  const std::size_t nvox = g.size();
  const int ndir = ws.ords.count();
  const int K = cfg.max_order;

  ws.direct.resize(nvox);
  int nblocks = std::min<std::size_t>(64, nvox);
  parallel_blocks(nblocks, exec, [&](int b) {
    std::size_t lo = nvox * b / nblocks, hi = nvox * (b + 1) / nblocks;
    for (std::size_t v = lo; v < hi; ++v)
      ws.direct[v] = ws.scene.direct_beam(g.index_to_world(g.from_linear(v)));
  });

  AngularField src(nvox, ndir);
  for (std::size_t v = 0; v < nvox; ++v) {
    double f = ws.direct[v];
    if (f == 0.0) continue;
    double sc = ws.scene.scat_cloud_m[v], sa = ws.scene.scat_air_m[v];
    for (int d = 0; d < ndir; ++d)
      src.at(v, d) = (sc * ws.pm.sun_cloud[d] + sa * ws.pm.sun_air[d]) * f;
  }
  std::vector<double> bounce(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
  const double cos_sun = std::max(0.0, -ws.scene.sun_dir.z);
  if (optics.ground_albedo > 0.0 && cos_sun > 0.0) {
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        Vec3 p{g.origin.x + (i + 0.5) * g.dx, g.origin.y + (j + 0.5) * g.dy, g.origin.z};
        bounce[static_cast<std::size_t>(i) + g.nx * j] =
            optics.ground_albedo / kPi * cos_sun * ws.scene.direct_beam(p);
      }
  }

  ws.gather = AngularField(nvox, ndir);
  ws.ground_total.assign(bounce.size(), 0.0);
  AngularField rad(nvox, ndir);
  for (int k = 1; k <= K; ++k) {
    ws.ground.push_back(bounce);
    for (std::size_t i = 0; i < bounce.size(); ++i) ws.ground_total[i] += bounce[i];
    if (k == K) break;  // I_K and S_K feed nothing the renderer sees
    detail::sweep_order(ws.scene, ws.ords, src, bounce, rad, exec);
    ws.sources.push_back(src);
    ws.radiances.push_back(rad);
    ws.gather.add(rad);
    if (k < K) {
      detail::scatter_order(ws.scene, ws.pm, rad, src, exec);
      if (optics.ground_albedo > 0.0) {
        std::vector<double> e = detail::ground_flux(ws.scene, ws.ords, rad);
        for (std::size_t i = 0; i < e.size(); ++i) bounce[i] = optics.ground_albedo / kPi * e[i];
      } else {
        std::fill(bounce.begin(), bounce.end(), 0.0);
      }
    }
  }
  return ws;
}

/// Adds the sun-path derivative of exp(-tau_sun(X)) into grad:
/// each voxel on the path gets -seed * len * 1e-3.
inline void add_sun_path_adjoint(const SceneTables& scene, const Vec3& X, double seed,
                                 std::vector<double>& grad) {
  if (seed == 0.0) return;
  traverse(scene.grid, X, -scene.sun_dir, std::numeric_limits<double>::infinity(),
           [&](const RaySegment& r) {
             grad[scene.grid.linear(r.voxel)] -= seed * (r.s1 - r.s0) * kPerKmToPerM;
           });
}

struct GatherAdjointOut {
  AngularField gather_bar;           // dL/d gather[v][d]
  std::vector<double> ground_bar;    // dL/d ground_total[cell]
  std::vector<double> beta_bar;      // direct dL/d beta (per 1/km)
};

/// Reverse pass of gather_radiance for one line of sight, seeded with the
/// adjoint of the returned radiance. Mirrors the forward term by term; the
/// suffix sum carries d/d(tau) of everything further down the ray.
/// With seed == 0 this is a pure forward evaluation.
inline double gather_ray_adjoint(const SceneTables& scene, const AngularField& gather,
                                 const std::vector<double>& ground_total,
                                 const std::vector<double>& pc, const std::vector<double>& pa,
                                 double ps_c, double ps_a, const Vec3& X, const Vec3& w_prop,
                                 const RTConfig& cfg, double seed, GatherAdjointOut& out) {
  const VoxelGrid& g = scene.grid;
  const int ndir = gather.ndir;
  const double step = cfg.step_for(g);
  const Vec3 back = -w_prop;

  struct Seg {
    std::size_t v;
    double s0, len;
  };
  std::vector<Seg> segs;
  double tau_end = 0.0, s_end = 0.0;
  traverse(g, X, back, std::numeric_limits<double>::infinity(), [&](const RaySegment& r) {
    std::size_t v = g.linear(r.voxel);
    segs.push_back({v, r.s0, r.s1 - r.s0});
    tau_end += scene.beta_tot_m[v] * (r.s1 - r.s0);
    s_end = r.s1;
  });
  if (segs.empty()) return 0.0;

  bool hits_ground = false;
  std::size_t ground_cell = 0;
  double ground_value = 0.0;
  if (!ground_total.empty() && back.z < 0.0) {
    Vec3 exitp = X + back * s_end;
    if (exitp.z <= g.origin.z + 1e-6 * g.dz) {
      hits_ground = true;
      ground_cell = static_cast<std::size_t>(scene.ground_cell(exitp.x, exitp.y));
      ground_value = ground_total[ground_cell];
    }
  }

  // forward replay storing per-segment tau and the suffix-tau sensitivities.
  // Emission derivatives stay non-zero at beta = 0 (the value is linear in the
  // scattering coefficient), so the caches are filled for empty voxels too
  // whenever a seeded pass runs.
  // The value accumulation below repeats gather_radiance term by term in the
  // same floating-point order, so a target rendered from the same field gives
  // an exactly zero residual.
  std::vector<double> tau0(segs.size()), Dsuffix(segs.size() + 1, 0.0);
  std::vector<double> value_ms(segs.size(), 0.0), value_ss(segs.size(), 0.0);
  std::vector<double> gc_cache(segs.size(), 0.0), ga_cache(segs.size(), 0.0);
  std::vector<double> ss_base(segs.size(), 0.0);  // first-order sum without the emission coefficient
  double tau = 0.0, total = 0.0;
  for (std::size_t si = 0; si < segs.size(); ++si) {
    const Seg& sgm = segs[si];
    tau0[si] = tau;
    double bm = scene.beta_tot_m[sgm.v];
    double sc = scene.scat_cloud_m[sgm.v], sa = scene.scat_air_m[sgm.v];
    const bool active = sc != 0.0 || sa != 0.0;
    if (active || seed != 0.0) {
      const double* I = &gather.data[sgm.v * ndir];
      double gc = 0.0, ga = 0.0;
      for (int d = 0; d < ndir; ++d) {
        gc += pc[d] * I[d];
        ga += pa[d] * I[d];
      }
      gc_cache[si] = gc;
      ga_cache[si] = ga;
      value_ms[si] = (sc * gc + sa * ga) * std::exp(-tau) * sgm.len * expm1_over(bm * sgm.len);
      if (active) total += value_ms[si];
      double coef = sc * ps_c + sa * ps_a;
      int nsub = std::max(1, static_cast<int>(std::ceil(sgm.len / step)));
      double h = sgm.len / nsub;
      double base = 0.0, ss = 0.0;
      for (int m = 0; m < nsub; ++m)
        for (double off : {0.5 - kHalfInvSqrt3, 0.5 + kHalfInvSqrt3}) {
          double sm = sgm.s0 + (m + off) * h;
          double f = scene.direct_beam(X + back * sm);
          base += f * std::exp(-(tau + bm * (sm - sgm.s0))) * 0.5 * h;
          if (coef > 0.0) {
            double term = coef * f * std::exp(-(tau + bm * (sm - sgm.s0))) * 0.5 * h;
            ss += term;
            if (active) total += term;
          }
        }
      ss_base[si] = base;
      value_ss[si] = ss;
    }
    tau += bm * sgm.len;
  }
  double ground_term = hits_ground ? ground_value * std::exp(-tau_end) : 0.0;
  total += ground_term;

  if (seed == 0.0) return total;

  // suffix sensitivities: d(total)/d(tau0 of segment i) for everything at or
  // after segment i
  Dsuffix[segs.size()] = -ground_term;
  for (std::size_t si = segs.size(); si-- > 0;)
    Dsuffix[si] = Dsuffix[si + 1] - value_ms[si] - value_ss[si];

  if (hits_ground) out.ground_bar[ground_cell] += seed * std::exp(-tau_end);

  for (std::size_t si = 0; si < segs.size(); ++si) {
    const Seg& sgm = segs[si];
    double bm = scene.beta_tot_m[sgm.v];
    double sc = scene.scat_cloud_m[sgm.v], sa = scene.scat_air_m[sgm.v];
    // optical depth of this voxel shadows everything after it
    out.beta_bar[sgm.v] += seed * Dsuffix[si + 1] * sgm.len * kPerKmToPerM;

    double x = bm * sgm.len;
    double A = std::exp(-tau0[si]) * sgm.len * expm1_over(x);
    double Sms = sc * gc_cache[si] + sa * ga_cache[si];
    // emission coefficients (valid at zero extinction as well)
    out.beta_bar[sgm.v] += seed * (A * gc_cache[si] + ps_c * ss_base[si]) *
                           scene.optics.albedo_cloud * kPerKmToPerM;
    if (sc != 0.0 || sa != 0.0) {
      for (int d = 0; d < ndir; ++d)
        out.gather_bar.at(sgm.v, d) += seed * A * (sc * pc[d] + sa * pa[d]);
      // own-extinction dependence of the compositing factor
      out.beta_bar[sgm.v] += seed * Sms * std::exp(-tau0[si]) * sgm.len * sgm.len *
                             expm1_over_deriv(x) * kPerKmToPerM;
    }

    double coef = sc * ps_c + sa * ps_a;
    int nsub = std::max(1, static_cast<int>(std::ceil(sgm.len / step)));
    double h = sgm.len / nsub;
    for (int m = 0; m < nsub; ++m)
      for (double off : {0.5 - kHalfInvSqrt3, 0.5 + kHalfInvSqrt3}) {
        double sm = sgm.s0 + (m + off) * h;
        Vec3 Xm = X + back * sm;
        double f = scene.direct_beam(Xm);
        double base_term = f * std::exp(-(tau0[si] + bm * (sm - sgm.s0))) * 0.5 * h;
        double term = coef * base_term;
        if (term != 0.0) {
          // attenuation inside the voxel
          out.beta_bar[sgm.v] -= seed * term * (sm - sgm.s0) * kPerKmToPerM;
          // attenuation of the sun path feeding this sample
          add_sun_path_adjoint(scene, Xm, seed * term, out.beta_bar);
        }
      }
  }
  return total;
}

}  // namespace detail

/// L2 image loss against a radiance-unit target and its exact gradient with
/// respect to the cloud extinction of every voxel, via reverse accumulation
/// through the renderer and the successive-orders recursion.
inline std::pair<double, RenderGradient> render_loss_grad(
    const ExtinctionField& field, const MediumOptics& optics, const AirProfile& air,
    const CameraRig& rig, const RTConfig& cfg, const ImageSet& target, const Exec& exec = Exec{}) {
  rig.validate();
  if (target.units != ImageUnits::Radiance)
    throw std::invalid_argument("render_loss_grad: target must be in radiance units");
  target.validate_against(rig);

  detail::AdjointWorkspace ws = detail::forward_for_adjoint(field, optics, air, rig, cfg, exec);
  const SceneTables& scene = ws.scene;
  const VoxelGrid& g = scene.grid;
  const std::size_t nvox = g.size();
  const int ndir = ws.ords.count();
  const int K = cfg.max_order;
  const std::size_t ncell = static_cast<std::size_t>(g.nx) * g.ny;

  double loss = 0.0;
  RenderGradient grad(g);
  AngularField gather_bar(nvox, ndir);
  std::vector<double> ground_total_bar(ncell, 0.0);

  // ---- phase A: pixels. One partial buffer per camera, reduced in order.
  const int ncam = rig.n_cameras();
  std::vector<detail::GatherAdjointOut> per_cam;
  std::vector<double> per_cam_loss(ncam, 0.0);
  per_cam.reserve(ncam);
  for (int c = 0; c < ncam; ++c)
    per_cam.push_back({AngularField(nvox, ndir), std::vector<double>(ncell, 0.0),
                       std::vector<double>(nvox, 0.0)});
  parallel_blocks(ncam, exec, [&](int c) {
    const Camera& cam = rig.cameras[c];
    std::vector<double> pc(ndir), pa(ndir);
    double lloss = 0.0;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        Vec3 dir = cam.pixel_ray(x, y);
        Vec3 w_prop = -dir;
        for (int d = 0; d < ndir; ++d) {
          double cth = dot(w_prop, ws.ords.dir[d]);
          pc[d] = ws.ords.weight[d] / kFourPi * hg_phase(cth, optics.g_cloud);
          pa[d] = ws.ords.weight[d] / kFourPi * hg_phase(cth, optics.g_air);
        }
        double cs = dot(w_prop, scene.sun_dir);
        double ps_c = hg_phase(cs, optics.g_cloud) / kFourPi;
        double ps_a = hg_phase(cs, optics.g_air) / kFourPi;
        // first pass: value only, to form the residual seed
        detail::GatherAdjointOut dummy{AngularField(0, 1), {}, {}};
        double value = detail::gather_ray_adjoint(scene, ws.gather, ws.ground_total, pc, pa, ps_c,
                                                  ps_a, cam.center, w_prop, cfg, 0.0, dummy);
        double resid = value - target.views[c].at(x, y);
        lloss += resid * resid;
        detail::gather_ray_adjoint(scene, ws.gather, ws.ground_total, pc, pa, ps_c, ps_a,
                                   cam.center, w_prop, cfg, 2.0 * resid, per_cam[c]);
      }
    per_cam_loss[c] = lloss;
  });
  for (int c = 0; c < ncam; ++c) {
    loss += per_cam_loss[c];
    for (std::size_t i = 0; i < nvox * ndir; ++i) gather_bar.data[i] += per_cam[c].gather_bar.data[i];
    for (std::size_t i = 0; i < ncell; ++i) ground_total_bar[i] += per_cam[c].ground_bar[i];
    for (std::size_t i = 0; i < nvox; ++i) grad.d_beta[i] += per_cam[c].beta_bar[i];
  }
  per_cam.clear();

  // ---- phase B: reverse the order recursion, k = K-1 .. 1.
  // ground_bar[k] tracks dL/d B_k; every B_k is seen by the pixels.
  std::vector<std::vector<double>> ground_bar(K, ground_total_bar);
  AngularField src_bar;  // dL/d S_{k+1} while walking down
  const double inv_pi_albedo = optics.ground_albedo / kPi;

  for (int k = K - 1; k >= 1; --k) {
    const AngularField& I_k = ws.radiances[k - 1];
    const AngularField& S_k = ws.sources[k - 1];
    const std::vector<double>& B_k = ws.ground[k - 1];

    // collect dL/d I_k
    AngularField rad_bar = gather_bar;  // every order feeds the pixel gather
    if (src_bar.ndir != 0) {
      // transpose of the scattering step that produced S_{k+1}
      int nblocks = std::min<std::size_t>(64, nvox);
      parallel_blocks(nblocks, exec, [&](int b) {
        std::size_t lo = nvox * b / nblocks, hi = nvox * (b + 1) / nblocks;
        for (std::size_t v = lo; v < hi; ++v) {
          double sc = scene.scat_cloud_m[v], sa = scene.scat_air_m[v];
          const double* sb = &src_bar.data[v * ndir];
          double* rb = &rad_bar.data[v * ndir];
          const double* Iv = &I_k.data[v * ndir];
          double cloud_dot = 0.0;
          for (int o = 0; o < ndir; ++o) {
            if (sb[o] == 0.0) continue;
            const double* mc = &ws.pm.cloud[static_cast<std::size_t>(o) * ndir];
            const double* ma = &ws.pm.air[static_cast<std::size_t>(o) * ndir];
            double mdotc = 0.0;
            for (int i = 0; i < ndir; ++i) {
              rb[i] += sb[o] * (sc * mc[i] + sa * ma[i]);
              mdotc += mc[i] * Iv[i];
            }
            cloud_dot += sb[o] * mdotc;
          }
          grad.d_beta[v] += cloud_dot * scene.optics.albedo_cloud * kPerKmToPerM;
        }
      });
    }
    // ground bounce built from I_k feeds B_{k+1}
    if (optics.ground_albedo > 0.0 && k + 1 <= K) {
      const std::vector<double>& bb = ground_bar[k];  // dL/dB_{k+1}
      for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i) {
          double s = bb[static_cast<std::size_t>(i) + g.nx * j] * inv_pi_albedo;
          if (s == 0.0) continue;
          std::size_t v = g.linear(i, j, 0);
          for (int d = 0; d < ndir; ++d)
            if (ws.ords.mu[d] < 0.0)
              rad_bar.at(v, d) += s * (-ws.ords.mu[d]) * ws.ords.weight[d];
        }
    }

    // reverse the sweep that formed I_k from (S_k, B_k)
    AngularField new_src_bar(nvox, ndir);
    {
      std::vector<std::vector<double>> beta_slices(ndir);
      std::vector<std::vector<double>> ground_slices(ndir);
      parallel_blocks(ndir, exec, [&](int d) {
        beta_slices[d].assign(nvox, 0.0);
        ground_slices[d].assign(ncell, 0.0);
        const Vec3 back = -ws.ords.dir[d];
        const bool may_hit_ground = ws.ords.mu[d] > 0.0;
        struct Seg {
          std::size_t v;
          double len;
        };
        std::vector<Seg> segs;
        for (std::size_t v = 0; v < nvox; ++v) {
          double seed = rad_bar.at(v, d);
          if (seed == 0.0) continue;
          Vec3 c = g.index_to_world(g.from_linear(v));
          segs.clear();
          double tau_end = 0.0, s_end = 0.0;
          traverse(g, c, back, std::numeric_limits<double>::infinity(), [&](const RaySegment& r) {
            std::size_t w = g.linear(r.voxel);
            segs.push_back({w, r.s1 - r.s0});
            tau_end += scene.beta_tot_m[w] * (r.s1 - r.s0);
            s_end = r.s1;
          });
          bool hit_ground = false;
          std::size_t cell = 0;
          double bval = 0.0;
          if (may_hit_ground) {
            Vec3 exitp = c + back * s_end;
            if (exitp.z <= g.origin.z + 1e-6 * g.dz) {
              hit_ground = true;
              cell = static_cast<std::size_t>(scene.ground_cell(exitp.x, exitp.y));
              bval = B_k[cell];
            }
          }
          double tau = tau_end;
          // walk segments backwards carrying the suffix sensitivity
          double suffix = hit_ground ? -bval * std::exp(-tau_end) : 0.0;
          if (hit_ground) ground_slices[d][cell] += seed * std::exp(-tau_end);
          for (std::size_t si = segs.size(); si-- > 0;) {
            const Seg& sgm = segs[si];
            double bm = scene.beta_tot_m[sgm.v];
            double x = bm * sgm.len;
            tau -= x;  // tau is now tau0 of this segment
            double sval = S_k.at(sgm.v, d);
            double A = std::exp(-tau) * sgm.len * expm1_over(x);
            new_src_bar.at(sgm.v, d) += seed * A;
            beta_slices[d][sgm.v] += seed * sval * std::exp(-tau) * sgm.len * sgm.len *
                                     expm1_over_deriv(x) * kPerKmToPerM;
            beta_slices[d][sgm.v] += seed * suffix * sgm.len * kPerKmToPerM;
            suffix -= sval * A;
          }
        }
      });
      for (int d = 0; d < ndir; ++d) {
        for (std::size_t v = 0; v < nvox; ++v) grad.d_beta[v] += beta_slices[d][v];
        if (optics.ground_albedo > 0.0)
          for (std::size_t i = 0; i < ncell; ++i) ground_bar[k - 1][i] += ground_slices[d][i];
      }
    }
    src_bar = std::move(new_src_bar);
  }

  // ---- close the chain at order 1: S_1 and B_1 come from the direct beam.
  if (src_bar.ndir != 0) {
    for (std::size_t v = 0; v < nvox; ++v) {
      double f = ws.direct[v];
      double sc = scene.scat_cloud_m[v], sa = scene.scat_air_m[v];
      double fbar = 0.0, scbar = 0.0;
      for (int d = 0; d < ndir; ++d) {
        double sb = src_bar.at(v, d);
        if (sb == 0.0) continue;
        fbar += sb * (sc * ws.pm.sun_cloud[d] + sa * ws.pm.sun_air[d]);
        scbar += sb * ws.pm.sun_cloud[d] * f;
      }
      grad.d_beta[v] += scbar * scene.optics.albedo_cloud * kPerKmToPerM;
      if (fbar != 0.0 && f != 0.0)
        detail::add_sun_path_adjoint(scene, g.index_to_world(g.from_linear(v)), fbar * f,
                                     grad.d_beta);
    }
  }
  if (optics.ground_albedo > 0.0) {
    const double cos_sun = std::max(0.0, -scene.sun_dir.z);
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        double bb = ground_bar[0][static_cast<std::size_t>(i) + g.nx * j];
        if (bb == 0.0 || cos_sun == 0.0) continue;
        Vec3 p{g.origin.x + (i + 0.5) * g.dx, g.origin.y + (j + 0.5) * g.dy, g.origin.z};
        double b1 = inv_pi_albedo * cos_sun * scene.direct_beam(p);
        detail::add_sun_path_adjoint(scene, p, bb * b1, grad.d_beta);
      }
  }

  for (double& v : grad.d_beta)
    if (!std::isfinite(v)) throw std::runtime_error("render_loss_grad: non-finite gradient");
  return {loss, grad};
}

/// Options for the iterative physics baseline.
struct PhysicsOptions {
  double lr = 0.1;
  int iterations = 500;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool accept_only_improving = false;  // revert steps that raise the loss
  int divergence_window = 50;          // consecutive loss increases before giving up
};

struct PhysicsResult {
  ExtinctionField field;
  std::vector<double> loss_history;
};

/// First-order reconstruction by differential rendering: Adam on the masked
/// voxels with a clamp to non-negative extinction after every step.
inline PhysicsResult solve_physics(const ExtinctionField& init, const MediumOptics& optics,
                                   const AirProfile& air, const CameraRig& rig,
                                   const RTConfig& cfg, const ImageSet& target,
                                   const std::vector<std::uint8_t>& mask,
                                   const PhysicsOptions& opts, const Exec& exec = Exec{}) {
  if (mask.size() != init.grid.size())
    throw std::invalid_argument("solve_physics: mask size mismatch");
  ImageSet target_rad =
      target.units == ImageUnits::Radiance ? target : dequantize_to_radiance(target);

  ExtinctionField field = init;
  for (std::size_t v = 0; v < mask.size(); ++v)
    if (!mask[v]) field.beta[v] = 0.f;

  std::vector<double> m(field.beta.size(), 0.0), vv(field.beta.size(), 0.0);
  PhysicsResult res{field, {}};
  ExtinctionField best = field;
  double best_loss = std::numeric_limits<double>::infinity();
  int rising = 0;
  double prev_loss = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= opts.iterations; ++it) {
    auto [loss, grad] = render_loss_grad(res.field, optics, air, rig, cfg, target_rad, exec);
    res.loss_history.push_back(loss);
    if (!std::isfinite(loss)) throw std::runtime_error("solve_physics: non-finite loss");

    if (loss < best_loss) {
      best_loss = loss;
      best = res.field;
    }
    if (loss > prev_loss) {
      if (++rising >= opts.divergence_window)
        throw std::runtime_error("solve_physics: loss increased for " +
                                 std::to_string(opts.divergence_window) + " consecutive steps");
      if (opts.accept_only_improving) res.field = best;
    } else {
      rising = 0;
    }
    prev_loss = loss;

    double bc1 = 1.0 - std::pow(opts.beta1, it);
    double bc2 = 1.0 - std::pow(opts.beta2, it);
    for (std::size_t v = 0; v < mask.size(); ++v) {
      if (!mask[v]) continue;
      double gv = grad.d_beta[v];
      m[v] = opts.beta1 * m[v] + (1.0 - opts.beta1) * gv;
      vv[v] = opts.beta2 * vv[v] + (1.0 - opts.beta2) * gv * gv;
      double upd = opts.lr * (m[v] / bc1) / (std::sqrt(vv[v] / bc2) + opts.eps);
      double nb = static_cast<double>(res.field.beta[v]) - upd;
      res.field.beta[v] = static_cast<float>(std::max(0.0, nb));
    }
  }
  // hand back the best candidate seen when in acceptance mode
  if (opts.accept_only_improving) {
    auto [final_loss, g2] = render_loss_grad(res.field, optics, air, rig, cfg, target_rad, exec);
    (void)g2;
    if (final_loss > best_loss) res.field = best;
  }
  return res;
}

}  // namespace cloudtomo
