#pragma once
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>

namespace cloudtomo {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kFourPi = 4.0 * kPi;
// Extinction fields are stored in 1/km; path lengths are in meters.
inline constexpr double kPerKmToPerM = 1e-3;

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) {
  double n = norm(v);
  if (n <= 0) throw std::invalid_argument("cannot normalize zero vector");
  return v / n;
}

struct Index3 {
  int i = 0, j = 0, k = 0;
  bool operator==(const Index3&) const = default;
};

/// (1 - exp(-x)) / x, stable near x = 0.
inline double expm1_over(double x) {
  if (std::abs(x) < 1e-5) return 1.0 - 0.5 * x + x * x / 6.0;
  return -std::expm1(-x) / x;
}

/// d/dx of (1 - exp(-x)) / x, stable near x = 0.
inline double expm1_over_deriv(double x) {
  if (std::abs(x) < 1e-4) return -0.5 + x / 3.0 - x * x / 8.0;
  return (std::exp(-x) * (1.0 + x) - 1.0) / (x * x);
}

inline bool almost_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace cloudtomo
