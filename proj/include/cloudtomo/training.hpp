#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloudtomo/adjoint.hpp"
#include "cloudtomo/model.hpp"
#include "cloudtomo/posterior.hpp"
#include "cloudtomo/rng.hpp"
#include "cloudtomo/rt.hpp"
#include "cloudtomo/sensor.hpp"

namespace cloudtomo {

/// One labeled training example: the true field and its noisy images.
struct LabeledScene {
  ExtinctionField field;
  ImageSet images;
  CameraRig rig;
};

struct TrainConfig {
  int iterations = 5000;
  int voxels_per_iter = 1000;
  double lr_supervised = 5e-5;
  double lr_selfsup = 1e-5;
  double weight_decay = 1e-5;
  double w_cloud = 0.01;        // loss weight of empty voxels
  double cloud_fraction = 0.5;  // stratified share of cloud voxels per batch; < 0 samples uniformly
  double smoothmax_alpha = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 1 || voxels_per_iter < 1)
      throw std::invalid_argument("TrainConfig: counts must be positive");
    if (!(lr_supervised > 0) || !(lr_selfsup > 0) || !(weight_decay >= 0))
      throw std::invalid_argument("TrainConfig: rates must be positive");
    if (!(w_cloud > 0.0 && w_cloud <= 1.0))
      throw std::invalid_argument("TrainConfig: w_cloud must be in (0, 1]");
  }
};

/// Discretized ground-truth posterior: one-hot at floor(beta / dbeta).
inline std::vector<double> true_posterior_vector(double beta_true, const PosteriorSpec& spec) {
  std::vector<double> p(static_cast<std::size_t>(spec.Q), 0.0);
  p[static_cast<std::size_t>(spec.bin_of(beta_true))] = 1.0;
  return p;
}

/// Cross entropy of the one-hot truth at bin q against an inferred vector,
/// in nats.
inline double cross_entropy(std::span<const double> p_hat, int q_true) {
  if (q_true < 0 || static_cast<std::size_t>(q_true) >= p_hat.size())
    throw std::out_of_range("cross_entropy: bin out of range");
  return -std::log(p_hat[static_cast<std::size_t>(q_true)]);
}

/// Loss weight of a voxel: cloud voxels count fully, empty ones are damped.
inline double cloud_weight(double beta_true, const PosteriorSpec& spec, const TrainConfig& cfg) {
  return beta_true >= 0.5 * spec.dbeta ? 1.0 : cfg.w_cloud;
}

/// Multi-view space carving: a voxel is a cloud candidate when at least
/// `agreement` cameras that see its centre read above `threshold` at the
/// projected pixel (nearest pixel). agreement <= 0 means every camera.
inline std::vector<std::uint8_t> space_carve(const ImageSet& images, const CameraRig& rig,
                                             const VoxelGrid& grid, double threshold,
                                             int agreement = 0) {
  images.validate_against(rig);
  if (agreement <= 0) agreement = rig.n_cameras();
  std::vector<std::uint8_t> mask(grid.size(), 0);
  for (std::size_t v = 0; v < grid.size(); ++v) {
    Vec3 X = grid.index_to_world(grid.from_linear(v));
    int hits = 0;
    for (std::size_t c = 0; c < rig.cameras.size(); ++c) {
      const Camera& cam = rig.cameras[c];
      if (!cam.sees(X)) continue;
      auto [px, py] = cam.project(X);
      int xi = std::clamp(static_cast<int>(std::lround(px)), 0, cam.width - 1);
      int yi = std::clamp(static_cast<int>(std::lround(py)), 0, cam.height - 1);
      if (images.views[c].at(xi, yi) > threshold) ++hits;
    }
    mask[v] = hits >= agreement ? 1 : 0;
  }
  return mask;
}

namespace detail {

/// Fisher-Yates with the in-repo RNG (std::shuffle is not portable).
inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i) + 1))]);
  return idx;
}

struct VoxelSplit {
  std::vector<std::uint32_t> cloud, empty;
};

inline VoxelSplit split_voxels(const ExtinctionField& field, const PosteriorSpec& spec) {
  VoxelSplit s;
  for (std::size_t v = 0; v < field.beta.size(); ++v) {
    if (field.beta[v] >= 0.5 * spec.dbeta)
      s.cloud.push_back(static_cast<std::uint32_t>(v));
    else
      s.empty.push_back(static_cast<std::uint32_t>(v));
  }
  return s;
}

}  // namespace detail

struct TrainResult {
  ParamStore<float> params;
  std::vector<double> loss_history;  // weighted CE sum per iteration
};

/// Supervised training: per iteration one scene, a stratified batch of query
/// voxels, shuffled camera order, and one Adam step on the weighted
/// cross-entropy sum over the batch.
inline TrainResult train_supervised(const std::vector<LabeledScene>& dataset,
                                    const TrainConfig& cfg, const PosteriorSpec& spec,
                                    const ModelArch& arch) {
  cfg.validate();
  spec.validate();
  arch.validate();
  if (dataset.empty()) throw std::invalid_argument("train_supervised: empty dataset");
  if (spec.Q != arch.Q) throw std::invalid_argument("train_supervised: spec.Q != arch.Q");
  for (const auto& sc : dataset) {
    if (sc.rig.n_cameras() != arch.n_cam)
      throw std::invalid_argument("train_supervised: rig size does not match the model");
    if (sc.field.max_beta() > spec.max_beta())
      throw std::invalid_argument("train_supervised: posterior bins do not cover the data range");
  }

  std::vector<detail::VoxelSplit> splits;
  splits.reserve(dataset.size());
  for (const auto& sc : dataset) splits.push_back(detail::split_voxels(sc.field, spec));

  TrainResult res{init_model_params<float>(arch, derive_seed(cfg.seed, 0)), {}};
  Rng rng(derive_seed(cfg.seed, 1));
  AdamConfig adam;
  adam.lr = cfg.lr_supervised;
  adam.weight_decay = cfg.weight_decay;

  Tape<float> tape;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const std::size_t n = rng.below(dataset.size());
    const LabeledScene& scene = dataset[n];
    const detail::VoxelSplit& split = splits[n];

    std::vector<int> order = detail::shuffled_indices(arch.n_cam, rng);
    CameraRig rig = scene.rig.subset(order);
    ImageSet images = scene.images.subset(order);

    // batch of query voxels
    std::vector<std::uint32_t> batch;
    batch.reserve(static_cast<std::size_t>(cfg.voxels_per_iter));
    if (cfg.cloud_fraction < 0.0 || split.cloud.empty() || split.empty.empty()) {
      for (int i = 0; i < cfg.voxels_per_iter; ++i)
        batch.push_back(static_cast<std::uint32_t>(rng.below(scene.field.grid.size())));
    } else {
      int n_cloud = static_cast<int>(std::lround(cfg.voxels_per_iter * cfg.cloud_fraction));
      n_cloud = std::clamp(n_cloud, 0, cfg.voxels_per_iter);
      for (int i = 0; i < n_cloud; ++i)
        batch.push_back(split.cloud[rng.below(split.cloud.size())]);
      for (int i = n_cloud; i < cfg.voxels_per_iter; ++i)
        batch.push_back(split.empty[rng.below(split.empty.size())]);
    }

    tape.clear();
    ModelGraph<float> g(tape, res.params);
    std::vector<FeatureMapShape> maps;
    std::vector<int> cam_codes;
    for (int c = 0; c < arch.n_cam; ++c) {
      std::vector<float> img = normalize_image<float>(images, c);
      maps.push_back(extract_features_graph(g, arch, tape.leaf(std::span<const float>(img)),
                                            images.views[c].height, images.views[c].width));
      cam_codes.push_back(encode_coords_graph(
          g, arch, "cam", normalize_point(scene.field.grid, rig.cameras[c].center)));
    }

    std::vector<int> ce_nodes;
    std::vector<double> weights;
    for (std::uint32_t v : batch) {
      Vec3 X = scene.field.grid.index_to_world(scene.field.grid.from_linear(v));
      int dom = encode_coords_graph(g, arch, "dom", normalize_point(scene.field.grid, X));
      int logits = query_logits_graph(g, arch, maps, cam_codes, dom, rig, X);
      double beta_true = scene.field.beta[v];
      ce_nodes.push_back(tape.softmax_ce(logits, spec.bin_of(beta_true)));
      weights.push_back(cloud_weight(beta_true, spec, cfg));
    }
    int loss = tape.weighted_sum(ce_nodes, weights);
    double loss_val = static_cast<double>(tape.scalar(loss));
    if (!std::isfinite(loss_val))
      throw std::runtime_error("train_supervised: non-finite loss at iteration " +
                               std::to_string(it));
    res.loss_history.push_back(loss_val);

    tape.backward_scalar(loss);
    Gradients grads = g.collect_gradients();
    if (!grads.finite())
      throw std::runtime_error("train_supervised: non-finite gradient at iteration " +
                               std::to_string(it));
    adam_step(res.params, grads, adam);
  }
  return res;
}

/// One unlabeled refinement example: observed images, their rig, and the
/// voxels the model is queried at.
struct UnlabeledScene {
  ImageSet images;  // graylevel, with exposure metadata
  CameraRig rig;
  VoxelGrid grid;
  std::vector<std::uint8_t> mask;
};

/// Scene environment assumed during refinement rendering.
struct RenderEnv {
  MediumOptics optics;
  AirProfile air;
  RTConfig rt;
};

struct SelfTrainResult {
  ParamStore<float> params;
  std::vector<double> cost_history;  // rendering cost E per iteration
};

/// Rendering cost of the current decoder on one unlabeled scene, together
/// with everything needed to backpropagate it.
namespace detail {
struct DecoderBatch {
  std::vector<std::vector<float>> u;  // per masked voxel
  std::vector<std::uint32_t> voxels;
};

template <typename T>
DecoderBatch build_decoder_inputs(const UnlabeledScene& scene, const ParamStore<T>& params,
                                  const ModelArch& arch) {
  SceneEncoding<T> enc = SceneEncoding<T>::build(scene.images, scene.rig, scene.grid, params, arch);
  DecoderBatch batch;
  for (std::size_t v = 0; v < scene.mask.size(); ++v) {
    if (!scene.mask[v]) continue;
    batch.voxels.push_back(static_cast<std::uint32_t>(v));
    Vec3 X = scene.grid.index_to_world(scene.grid.from_linear(v));
    Tape<T> tape;
    ModelGraph<T> g(tape, params);
    std::vector<int> parts;
    for (int c = 0; c < arch.n_cam; ++c) {
      const Camera& cam = scene.rig.cameras[c];
      if (!cam.sees(X)) {
        parts.push_back(tape.leaf_zero(static_cast<std::size_t>(arch.fpn_c3)));
        continue;
      }
      auto [px, py] = cam.project(X);
      auto [fx, fy] = enc.shapes[c].to_map(px, py);
      std::vector<T> s = bilinear_sample_values<T>(
          std::span<const T>(enc.maps[c].data(), enc.maps[c].size()), enc.shapes[c].c,
          enc.shapes[c].h, enc.shapes[c].w, fx, fy);
      parts.push_back(tape.leaf(std::span<const T>(s)));
    }
    parts.push_back(encode_coords_graph(g, arch, "dom", normalize_point(scene.grid, X)));
    for (int c = 0; c < arch.n_cam; ++c)
      parts.push_back(
          tape.leaf(std::span<const T>(enc.cam_codes[c].data(), enc.cam_codes[c].size())));
    int u = tape.concat(parts);
    auto uv = tape.value(u);
    batch.u.emplace_back(uv.begin(), uv.end());
  }
  return batch;
}
}  // namespace detail

/// Self-supervised refinement: the encoder stays frozen at its supervised
/// state; only the decoder is updated, by rendering the smoothmax field and
/// backpropagating the image residual through the differentiable renderer.
inline SelfTrainResult train_selfsupervised(const std::vector<UnlabeledScene>& scenes,
                                            const RenderEnv& env, const ParamStore<float>& start,
                                            const TrainConfig& cfg, const PosteriorSpec& spec,
                                            const ModelArch& arch, const Exec& exec = Exec{}) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train_selfsupervised: no scenes");
  for (const auto& sc : scenes) {
    if (sc.rig.n_cameras() != arch.n_cam)
      throw std::invalid_argument("train_selfsupervised: rig size does not match the model");
    if (sc.images.units != ImageUnits::Graylevel)
      throw std::invalid_argument("train_selfsupervised: images must be graylevel observations");
    if (sc.mask.size() != sc.grid.size())
      throw std::invalid_argument("train_selfsupervised: mask size mismatch");
  }

  SelfTrainResult res{start, {}};
  AdamConfig adam;
  adam.lr = cfg.lr_selfsup;
  adam.weight_decay = cfg.weight_decay;

  // the encoder is frozen: inputs to the decoder can be cached per scene
  std::vector<detail::DecoderBatch> batches;
  std::vector<ImageSet> targets;
  for (const auto& sc : scenes) {
    batches.push_back(detail::build_decoder_inputs(sc, start, arch));
    targets.push_back(dequantize_to_radiance(sc.images));
  }

  Tape<float> tape;
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::size_t m = static_cast<std::size_t>((it - 1) % static_cast<int>(scenes.size()));
    const UnlabeledScene& scene = scenes[m];
    const detail::DecoderBatch& batch = batches[m];

    tape.clear();
    ModelGraph<float> g(tape, res.params);
    std::vector<int> sm_nodes;
    sm_nodes.reserve(batch.voxels.size());
    ExtinctionField beta_hat(scene.grid, 0.f);
    for (std::size_t i = 0; i < batch.voxels.size(); ++i) {
      int u = tape.leaf(std::span<const float>(batch.u[i].data(), batch.u[i].size()));
      int logits = decode_logits_graph(g, arch, u);
      int probs = tape.softmax(logits);
      int sm = tape.smoothmax(probs, cfg.smoothmax_alpha, spec.dbeta);
      sm_nodes.push_back(sm);
      beta_hat.beta[batch.voxels[i]] = static_cast<float>(tape.scalar(sm));
    }

    auto [cost, grad] = render_loss_grad(beta_hat, env.optics, env.air, scene.rig, env.rt,
                                         targets[m], exec);
    if (!std::isfinite(cost))
      throw std::runtime_error("train_selfsupervised: non-finite cost at iteration " +
                               std::to_string(it));
    res.cost_history.push_back(cost);

    std::vector<std::pair<int, std::vector<float>>> seeds;
    seeds.reserve(sm_nodes.size());
    for (std::size_t i = 0; i < sm_nodes.size(); ++i)
      seeds.push_back({sm_nodes[i], {static_cast<float>(grad.d_beta[batch.voxels[i]])}});
    tape.backward(seeds);

    Gradients grads = g.collect_gradients("dec.");
    if (!grads.finite())
      throw std::runtime_error("train_selfsupervised: non-finite gradient at iteration " +
                               std::to_string(it));
    adam_step(res.params, grads, adam);
  }
  return res;
}

}  // namespace cloudtomo
