#pragma once
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "cloudtomo/math.hpp"
#include "cloudtomo/rng.hpp"
#include "cloudtomo/scene.hpp"

namespace cloudtomo {

/// Imaging noise operator. Exposure is set once per image set so that the
/// brightest pixel across all views maps to headroom * full_well expected
/// photo-electrons; each pixel then draws Poisson shot noise, Gaussian
/// readout noise, and is quantized to the sensor bit depth.
///
/// Each pixel uses its own counter-derived random stream, so the result is
/// byte-identical for a fixed seed regardless of worker count.
inline ImageSet apply_noise(const ImageSet& images, const SensorSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (images.units != ImageUnits::Radiance)
    throw std::invalid_argument("apply_noise: input must be in radiance units");
  ImageSet out = images;
  out.units = ImageUnits::Graylevel;
  out.gain = spec.gain;
  out.bits = spec.bits;
  double vmax = images.max_pixel();
  double scale = vmax > 0.0 ? spec.headroom * spec.full_well / vmax : 0.0;
  out.electrons_per_radiance = scale;
  const double maxgl = spec.max_graylevel();
  for (std::size_t c = 0; c < images.views.size(); ++c) {
    const auto& src = images.views[c];
    auto& dst = out.views[c];
    for (std::size_t p = 0; p < src.data.size(); ++p) {
      Rng rng(derive_seed(seed, (c << 40) + p));
      double lam = std::max(0.0, static_cast<double>(src.data[p])) * scale;
      double electrons = static_cast<double>(rng.poisson(lam)) + rng.normal(0.0, spec.read_std);
      double gl = std::round(electrons / spec.gain);
      dst.data[p] = std::clamp(gl, 0.0, maxgl);
    }
  }
  return out;
}

/// Maps recorded graylevels back to radiance units using the exposure scale
/// stored in the image set.
inline ImageSet dequantize_to_radiance(const ImageSet& images) {
  if (images.units != ImageUnits::Graylevel)
    throw std::invalid_argument("dequantize_to_radiance: input must be graylevel");
  if (!(images.electrons_per_radiance > 0.0))
    throw std::invalid_argument("dequantize_to_radiance: missing exposure scale");
  ImageSet out = images;
  out.units = ImageUnits::Radiance;
  double f = images.gain / images.electrons_per_radiance;
  for (auto& v : out.views)
    for (auto& x : v.data) x *= f;
  return out;
}

/// Log-likelihood of one observed graylevel under an expected photo-electron
/// count: Gaussian approximation with variance = expected + read_std^2,
/// evaluated in electron units at the dequantized observation.
inline double pixel_log_likelihood(double observed_graylevel, double expected_electrons,
                                   const SensorSpec& spec) {
  if (!(expected_electrons >= 0.0))
    throw std::invalid_argument("pixel_log_likelihood: expected electrons must be >= 0");
  double obs = observed_graylevel * spec.gain;
  double var = expected_electrons + spec.read_std * spec.read_std;
  double d = obs - expected_electrons;
  return -0.5 * (d * d / var + std::log(2.0 * kPi * var));
}

/// Sum of per-pixel log-likelihoods of a graylevel image set against the
/// expected noiseless radiance images (shared exposure scale from `observed`).
inline double imageset_log_likelihood(const ImageSet& observed, const ImageSet& expected_radiance,
                                      const SensorSpec& spec) {
  if (observed.units != ImageUnits::Graylevel)
    throw std::invalid_argument("imageset_log_likelihood: observation must be graylevel");
  if (observed.views.size() != expected_radiance.views.size())
    throw std::invalid_argument("imageset_log_likelihood: view count mismatch");
  double scale = observed.electrons_per_radiance;
  double ll = 0.0;
  for (std::size_t c = 0; c < observed.views.size(); ++c) {
    const auto& o = observed.views[c];
    const auto& e = expected_radiance.views[c];
    if (o.data.size() != e.data.size())
      throw std::invalid_argument("imageset_log_likelihood: image shape mismatch");
    for (std::size_t p = 0; p < o.data.size(); ++p)
      ll += pixel_log_likelihood(o.data[p], std::max(0.0, e.data[p] * scale), spec);
  }
  return ll;
}

}  // namespace cloudtomo
