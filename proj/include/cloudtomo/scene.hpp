#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloudtomo/math.hpp"

namespace cloudtomo {

/// Axis-aligned voxel lattice. `origin` is the minimum corner; voxel (i,j,k)
/// spans [origin + (i,j,k)*d, origin + (i+1,j+1,k+1)*d).
struct VoxelGrid {
  int nx = 1, ny = 1, nz = 1;
  double dx = 1, dy = 1, dz = 1;  // [m]
  Vec3 origin;                    // [m]

  VoxelGrid() = default;
  VoxelGrid(int nx_, int ny_, int nz_, double dx_, double dy_, double dz_, Vec3 origin_ = {})
      : nx(nx_), ny(ny_), nz(nz_), dx(dx_), dy(dy_), dz(dz_), origin(origin_) {
    validate();
  }

  void validate() const {
    if (nx < 1 || ny < 1 || nz < 1) throw std::invalid_argument("VoxelGrid: counts must be >= 1");
    if (!(dx > 0) || !(dy > 0) || !(dz > 0))
      throw std::invalid_argument("VoxelGrid: edge lengths must be > 0");
  }

  std::size_t size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }

  // x-fastest linear ordering
  std::size_t linear(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(j) +
                                           static_cast<std::size_t>(ny) * static_cast<std::size_t>(k));
  }
  std::size_t linear(const Index3& v) const { return linear(v.i, v.j, v.k); }

  Index3 from_linear(std::size_t id) const {
    int i = static_cast<int>(id % nx);
    int j = static_cast<int>((id / nx) % ny);
    int k = static_cast<int>(id / (static_cast<std::size_t>(nx) * ny));
    return {i, j, k};
  }

  Vec3 min_corner() const { return origin; }
  Vec3 max_corner() const { return {origin.x + nx * dx, origin.y + ny * dy, origin.z + nz * dz}; }

  bool contains(const Vec3& p) const {
    Vec3 hi = max_corner();
    return p.x >= origin.x && p.x < hi.x && p.y >= origin.y && p.y < hi.y && p.z >= origin.z &&
           p.z < hi.z;
  }

  std::optional<Index3> world_to_index(const Vec3& p) const {
    if (!contains(p)) return std::nullopt;
    int i = static_cast<int>(std::floor((p.x - origin.x) / dx));
    int j = static_cast<int>(std::floor((p.y - origin.y) / dy));
    int k = static_cast<int>(std::floor((p.z - origin.z) / dz));
    i = std::clamp(i, 0, nx - 1);
    j = std::clamp(j, 0, ny - 1);
    k = std::clamp(k, 0, nz - 1);
    return Index3{i, j, k};
  }

  /// Center of a voxel.
  Vec3 index_to_world(const Index3& v) const {
    return {origin.x + (v.i + 0.5) * dx, origin.y + (v.j + 0.5) * dy, origin.z + (v.k + 0.5) * dz};
  }

  bool same_layout(const VoxelGrid& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz && dx == o.dx && dy == o.dy && dz == o.dz &&
           origin.x == o.origin.x && origin.y == o.origin.y && origin.z == o.origin.z;
  }
};

/// Cloud extinction coefficient on a voxel grid, stored in [1/km].
struct ExtinctionField {
  VoxelGrid grid;
  std::vector<float> beta;  // x-fastest, [1/km]

  ExtinctionField() = default;
  explicit ExtinctionField(const VoxelGrid& g, float fill = 0.f)
      : grid(g), beta(g.size(), fill) {}

  float& at(int i, int j, int k) { return beta[grid.linear(i, j, k)]; }
  float at(int i, int j, int k) const { return beta[grid.linear(i, j, k)]; }

  void validate() const {
    grid.validate();
    if (beta.size() != grid.size())
      throw std::invalid_argument("ExtinctionField: payload size mismatch");
    for (float b : beta)
      if (!(b >= 0.f) || !std::isfinite(b))
        throw std::invalid_argument("ExtinctionField: beta must be finite and >= 0");
  }

  double max_beta() const {
    double m = 0;
    for (float b : beta) m = std::max(m, static_cast<double>(b));
    return m;
  }
};

/// Molecular extinction vs altitude, piecewise linear in z [m], values [1/km].
/// Evaluation clamps to the end values outside the table.
struct AirProfile {
  std::vector<double> altitude;  // strictly increasing [m]
  std::vector<double> beta;      // [1/km]

  AirProfile() = default;
  AirProfile(std::vector<double> alt, std::vector<double> val)
      : altitude(std::move(alt)), beta(std::move(val)) {
    validate();
  }

  void validate() const {
    if (altitude.size() != beta.size() || altitude.empty())
      throw std::invalid_argument("AirProfile: table shape mismatch");
    for (std::size_t i = 1; i < altitude.size(); ++i)
      if (!(altitude[i] > altitude[i - 1]))
        throw std::invalid_argument("AirProfile: altitudes must be strictly increasing");
    for (double v : beta)
      if (!(v >= 0)) throw std::invalid_argument("AirProfile: values must be >= 0");
  }

  double value_at(double z) const {
    if (altitude.empty()) return 0.0;
    if (z <= altitude.front()) return beta.front();
    if (z >= altitude.back()) return beta.back();
    auto it = std::upper_bound(altitude.begin(), altitude.end(), z);
    std::size_t hi = static_cast<std::size_t>(it - altitude.begin());
    std::size_t lo = hi - 1;
    double t = (z - altitude[lo]) / (altitude[hi] - altitude[lo]);
    return beta[lo] + t * (beta[hi] - beta[lo]);
  }

  /// Exponential profile beta0 * exp(-z/H) sampled to a table.
  static AirProfile exponential(double beta0_per_km = 0.01, double scale_height_m = 8000.0,
                                double top_m = 20000.0, int samples = 41) {
    std::vector<double> alt(samples), val(samples);
    for (int i = 0; i < samples; ++i) {
      alt[i] = top_m * i / (samples - 1.0);
      val[i] = beta0_per_km * std::exp(-alt[i] / scale_height_m);
    }
    return AirProfile(std::move(alt), std::move(val));
  }

  static AirProfile vacuum() { return AirProfile({0.0, 1.0}, {0.0, 0.0}); }
};

/// Henyey-Greenstein phase value at cos(theta), normalized so that the
/// average over the sphere is 1: (1/4pi) * integral p dOmega = 1.
inline double hg_phase(double cos_theta, double g) {
  double denom = 1.0 + g * g - 2.0 * g * cos_theta;
  return (1.0 - g * g) / (denom * std::sqrt(denom));
}

/// Scattering properties of the cloud droplets and of the background air.
struct MediumOptics {
  double albedo_cloud = 0.99;  // single-scattering albedo of droplets
  double g_cloud = 0.85;       // HG asymmetry of droplets
  double albedo_air = 1.0;     // molecular component
  double g_air = 0.0;
  double ground_albedo = 0.0;  // Lambertian; 0 = black surface

  void validate() const {
    auto chk01 = [](double v, const char* n) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(n) + " must be in [0,1]");
    };
    chk01(albedo_cloud, "albedo_cloud");
    chk01(albedo_air, "albedo_air");
    chk01(ground_albedo, "ground_albedo");
    if (!(std::abs(g_cloud) < 1.0) || !(std::abs(g_air) < 1.0))
      throw std::invalid_argument("asymmetry parameter must satisfy |g| < 1");
  }
};

/// Pinhole camera. `right/up/forward` form an orthonormal basis; `forward`
/// is the optical axis. Pixel coordinates are continuous, with (0,0) at the
/// center of the top-left pixel.
struct Camera {
  Vec3 center;          // [m]
  Vec3 right, up, forward;
  double focal = 1.0;   // [px]
  double cx = 0, cy = 0;  // principal point [px]
  int width = 1, height = 1;

  void validate() const {
    if (!(focal > 0)) throw std::invalid_argument("Camera: focal must be > 0");
    if (width < 1 || height < 1) throw std::invalid_argument("Camera: image size must be >= 1");
    const double tol = 1e-10;
    auto unit = [&](const Vec3& v) { return std::abs(norm(v) - 1.0) <= tol; };
    if (!unit(right) || !unit(up) || !unit(forward))
      throw std::invalid_argument("Camera: basis vectors must be unit length");
    if (std::abs(dot(right, up)) > tol || std::abs(dot(right, forward)) > tol ||
        std::abs(dot(up, forward)) > tol)
      throw std::invalid_argument("Camera: basis must be orthonormal");
  }

  /// Projects a world point to continuous pixel coordinates.
  /// Throws if the point is not strictly in front of the camera.
  std::pair<double, double> project(const Vec3& X) const {
    Vec3 d = X - center;
    double zc = dot(d, forward);
    if (!(zc > 0)) throw std::domain_error("Camera::project: point behind camera");
    double xc = dot(d, right);
    double yc = dot(d, up);
    return {focal * xc / zc + cx, focal * yc / zc + cy};
  }

  bool sees(const Vec3& X) const {
    Vec3 d = X - center;
    double zc = dot(d, forward);
    if (!(zc > 0)) return false;
    double px = focal * dot(d, right) / zc + cx;
    double py = focal * dot(d, up) / zc + cy;
    return px >= -0.5 && px <= width - 0.5 && py >= -0.5 && py <= height - 0.5;
  }

  /// Unit world-space direction of the line of sight through pixel p.
  Vec3 pixel_ray(double px, double py) const {
    if (px < -0.5 || px > width - 0.5 || py < -0.5 || py > height - 0.5)
      throw std::out_of_range("Camera::pixel_ray: pixel outside sensor bounds");
    Vec3 d = right * ((px - cx) / focal) + up * ((py - cy) / focal) + forward;
    return normalized(d);
  }

  /// Camera looking from `pos` toward `target`; roll chosen so that image
  /// "up" tracks -world-z as closely as possible.
  static Camera look_at(const Vec3& pos, const Vec3& target, double focal, int width, int height) {
    Camera c;
    c.center = pos;
    c.forward = normalized(target - pos);
    Vec3 up_hint{0, 0, 1};
    if (std::abs(dot(up_hint, c.forward)) > 0.999) up_hint = {0, 1, 0};
    c.right = normalized(cross(c.forward, up_hint));
    c.up = cross(c.forward, c.right);
    c.focal = focal;
    c.width = width;
    c.height = height;
    c.cx = 0.5 * (width - 1);
    c.cy = 0.5 * (height - 1);
    c.validate();
    return c;
  }
};

/// Camera formation plus the solar boundary condition.
struct CameraRig {
  std::vector<Camera> cameras;
  Vec3 sun_dir{0, 0, -1};        // propagation direction of sunlight (unit)
  double solar_irradiance = 1.0;  // spectral irradiance at domain top [W m^-2 nm^-1]

  void validate() const {
    if (cameras.empty()) throw std::invalid_argument("CameraRig: at least one camera required");
    for (const auto& c : cameras) c.validate();
    if (std::abs(norm(sun_dir) - 1.0) > 1e-9)
      throw std::invalid_argument("CameraRig: sun direction must be unit length");
    if (!(solar_irradiance > 0)) throw std::invalid_argument("CameraRig: irradiance must be > 0");
  }

  int n_cameras() const { return static_cast<int>(cameras.size()); }

  CameraRig subset(const std::vector<int>& ids) const {
    CameraRig r = *this;
    r.cameras.clear();
    for (int id : ids) r.cameras.push_back(cameras.at(static_cast<std::size_t>(id)));
    return r;
  }
};

/// Parameters for a fan of cameras looking at a common target.
struct FanRigSpec {
  int n_cam = 10;
  double distance = 4000.0;        // [m] from target
  double max_off_nadir_deg = 60.0; // fan half-angle
  double azimuth_deg = 0.0;        // plane of the fan
  int width = 32, height = 32;
  double fov_deg = 12.0;
  double sun_zenith_deg = 25.0;
  double sun_azimuth_deg = 0.0;
  double solar_irradiance = 1.0;
};

/// Cameras spread on an arc above `target`, all looking at it.
inline CameraRig make_fan_rig(const Vec3& target, const FanRigSpec& s) {
  CameraRig rig;
  double focal = 0.5 * s.width / std::tan(0.5 * s.fov_deg * kPi / 180.0);
  double az = s.azimuth_deg * kPi / 180.0;
  for (int c = 0; c < s.n_cam; ++c) {
    double t = s.n_cam == 1 ? 0.0 : (2.0 * c / (s.n_cam - 1.0) - 1.0);
    double theta = t * s.max_off_nadir_deg * kPi / 180.0;
    Vec3 dir{std::sin(theta) * std::cos(az), std::sin(theta) * std::sin(az), std::cos(theta)};
    rig.cameras.push_back(Camera::look_at(target + dir * s.distance, target, focal, s.width, s.height));
  }
  double sz = s.sun_zenith_deg * kPi / 180.0;
  double sa = s.sun_azimuth_deg * kPi / 180.0;
  // sunlight travels downward, from zenith angle sz at azimuth sa
  rig.sun_dir = {-std::sin(sz) * std::cos(sa), -std::sin(sz) * std::sin(sa), -std::cos(sz)};
  rig.solar_irradiance = s.solar_irradiance;
  rig.validate();
  return rig;
}

/// CMOS-style sensor description for the imaging noise operator.
struct SensorSpec {
  double full_well = 13500.0;     // [e-]
  double headroom = 0.9;          // exposure targets headroom * full_well
  double gain = 13.0;             // [e- per graylevel]
  double read_std = 13.0;         // readout noise STD [e-]
  int bits = 10;

  void validate() const {
    if (!(full_well > 0) || !(headroom > 0) || !(gain > 0) || !(read_std > 0) || bits < 1)
      throw std::invalid_argument("SensorSpec: all fields must be positive");
  }

  double max_graylevel() const { return static_cast<double>((1u << bits) - 1u); }
};

enum class ImageUnits { Radiance, Graylevel };

/// Multi-view image stack. Shapes follow the rig that produced it. When the
/// images are graylevels, `electrons_per_radiance` records the exposure
/// scaling applied by the noise operator so that observations can be mapped
/// back to radiance units. Pixels are double in memory; the .imset container
/// stores them as f32le.
struct ImageSet {
  struct View {
    int width = 0, height = 0;
    std::vector<double> data;  // row-major, data[y*width + x]

    double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  };

  std::vector<View> views;
  ImageUnits units = ImageUnits::Radiance;
  double electrons_per_radiance = 0.0;  // set by the noise operator
  double gain = 0.0;                    // [e-/graylevel], set by the noise operator
  int bits = 0;                         // quantization depth, set by the noise operator

  static ImageSet like(const CameraRig& rig) {
    ImageSet s;
    for (const auto& c : rig.cameras) {
      View v;
      v.width = c.width;
      v.height = c.height;
      v.data.assign(static_cast<std::size_t>(c.width) * c.height, 0.0);
      s.views.push_back(std::move(v));
    }
    return s;
  }

  void validate_against(const CameraRig& rig) const {
    if (views.size() != rig.cameras.size())
      throw std::invalid_argument("ImageSet: view count does not match rig");
    for (std::size_t i = 0; i < views.size(); ++i) {
      if (views[i].width != rig.cameras[i].width || views[i].height != rig.cameras[i].height)
        throw std::invalid_argument("ImageSet: image shape does not match camera");
    }
    double maxgl = bits > 0 ? static_cast<double>((1u << bits) - 1u) : 0.0;
    for (const auto& v : views)
      for (double x : v.data) {
        if (!std::isfinite(x)) throw std::invalid_argument("ImageSet: non-finite pixel");
        if (units == ImageUnits::Graylevel && (x < 0.f || x > maxgl))
          throw std::invalid_argument("ImageSet: graylevel out of range");
      }
  }

  double max_pixel() const {
    double m = 0.0;
    for (const auto& v : views)
      for (double x : v.data) m = std::max(m, x);
    return m;
  }

  ImageSet subset(const std::vector<int>& ids) const {
    ImageSet s = *this;
    s.views.clear();
    for (int id : ids) s.views.push_back(views.at(static_cast<std::size_t>(id)));
    return s;
  }
};

}  // namespace cloudtomo
