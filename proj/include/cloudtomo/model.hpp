#pragma once
#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloudtomo/optim.hpp"
#include "cloudtomo/parallel.hpp"
#include "cloudtomo/posterior.hpp"
#include "cloudtomo/scene.hpp"
#include "cloudtomo/tape.hpp"

namespace cloudtomo {

/// Network shape. The coordinate encoders are fixed-depth ReLU stacks, the
/// image branch is a three-scale stride-2 pyramid with top-down merge, the
/// decoder is a deep ReLU stack ending in Q logits.
struct ModelArch {
  int n_cam = 10;
  int Q = 301;
  int enc_width = 64;
  int enc_layers = 4;
  int dec_width = 512;
  int dec_layers = 9;
  int fpn_c1 = 16, fpn_c2 = 32, fpn_c3 = 64;

  void validate() const {
    if (n_cam < 1 || Q < 2 || enc_width < 1 || enc_layers < 1 || dec_width < 1 ||
        dec_layers < 1 || fpn_c1 < 1 || fpn_c2 < 1 || fpn_c3 < 1)
      throw std::invalid_argument("ModelArch: all sizes must be positive");
  }

  /// Width of the decoder input u(X).
  int u_dim() const { return fpn_c3 * n_cam + enc_width + enc_width * n_cam; }

  json to_json() const {
    return {{"n_cam", n_cam},       {"Q", Q},
            {"enc_width", enc_width}, {"enc_layers", enc_layers},
            {"dec_width", dec_width}, {"dec_layers", dec_layers},
            {"fpn_c1", fpn_c1},       {"fpn_c2", fpn_c2},
            {"fpn_c3", fpn_c3}};
  }

  static ModelArch from_json(const json& j) {
    ModelArch a;
    a.n_cam = j.at("n_cam").get<int>();
    a.Q = j.at("Q").get<int>();
    a.enc_width = j.at("enc_width").get<int>();
    a.enc_layers = j.at("enc_layers").get<int>();
    a.dec_width = j.at("dec_width").get<int>();
    a.dec_layers = j.at("dec_layers").get<int>();
    a.fpn_c1 = j.at("fpn_c1").get<int>();
    a.fpn_c2 = j.at("fpn_c2").get<int>();
    a.fpn_c3 = j.at("fpn_c3").get<int>();
    a.validate();
    return a;
  }
};

namespace detail {
template <typename T>
void init_linear(ParamStore<T>& store, const std::string& prefix, int rows, int cols, Rng& rng,
                 double gain = 1.0) {
  init_uniform<T>(store.add(prefix + ".w", {rows, cols}), cols, rng, gain);
  store.add(prefix + ".b", {rows});
}
}  // namespace detail

/// Fresh parameters for the full model. The final logit layer starts small so
/// an untrained model outputs a near-uniform posterior.
template <typename T>
ParamStore<T> init_model_params(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  ParamStore<T> store;
  Rng rng(seed);
  auto mlp = [&](const std::string& name, int in_dim) {
    for (int l = 0; l < arch.enc_layers; ++l) {
      detail::init_linear(store, name + "." + std::to_string(l),
                          arch.enc_width, l == 0 ? in_dim : arch.enc_width, rng);
    }
  };
  mlp("cam", 3);
  mlp("dom", 3);
  init_uniform<T>(store.add("img.c1.w", {arch.fpn_c1, 1, 3, 3}), 9, rng);
  store.add("img.c1.b", {arch.fpn_c1});
  init_uniform<T>(store.add("img.c2.w", {arch.fpn_c2, arch.fpn_c1, 3, 3}), 9 * arch.fpn_c1, rng);
  store.add("img.c2.b", {arch.fpn_c2});
  init_uniform<T>(store.add("img.c3.w", {arch.fpn_c3, arch.fpn_c2, 3, 3}), 9 * arch.fpn_c2, rng);
  store.add("img.c3.b", {arch.fpn_c3});
  init_uniform<T>(store.add("img.l1.w", {arch.fpn_c3, arch.fpn_c1}), arch.fpn_c1, rng);
  store.add("img.l1.b", {arch.fpn_c3});
  init_uniform<T>(store.add("img.l2.w", {arch.fpn_c3, arch.fpn_c2}), arch.fpn_c2, rng);
  store.add("img.l2.b", {arch.fpn_c3});
  for (int l = 0; l < arch.dec_layers; ++l)
    detail::init_linear(store, "dec." + std::to_string(l), arch.dec_width,
                        l == 0 ? arch.u_dim() : arch.dec_width, rng);
  detail::init_linear(store, "dec.out", arch.Q, arch.dec_width, rng, 0.01);
  return store;
}

/// Binds parameter blocks onto a tape lazily and collects their gradients
/// after a backward pass.
template <typename T>
struct ModelGraph {
  Tape<T>& tape;
  const ParamStore<T>& params;
  std::map<std::string, int> bound;

  ModelGraph(Tape<T>& t, const ParamStore<T>& p) : tape(t), params(p) {}

  int p(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    const auto& blk = params.at(name);
    int id = tape.leaf(std::span<const T>(blk.data.data(), blk.data.size()));
    bound[name] = id;
    return id;
  }

  Gradients collect_gradients() const {
    Gradients g;
    for (const auto& [name, id] : bound) g.accumulate(name, tape.grad(id));
    return g;
  }

  /// Gradients restricted to blocks whose name starts with `prefix`.
  Gradients collect_gradients(const std::string& prefix) const {
    Gradients g;
    for (const auto& [name, id] : bound)
      if (name.rfind(prefix, 0) == 0) g.accumulate(name, tape.grad(id));
    return g;
  }
};

/// Maps a world point into [-1, 1]^3 relative to the grid bounds.
inline Vec3 normalize_point(const VoxelGrid& g, const Vec3& X) {
  Vec3 lo = g.min_corner(), hi = g.max_corner();
  return {2.0 * (X.x - lo.x) / (hi.x - lo.x) - 1.0, 2.0 * (X.y - lo.y) / (hi.y - lo.y) - 1.0,
          2.0 * (X.z - lo.z) / (hi.z - lo.z) - 1.0};
}

/// Coordinate encoder: enc_layers fully-connected ReLU layers.
template <typename T>
int encode_coords_graph(ModelGraph<T>& g, const ModelArch& arch, const std::string& name,
                        int input) {
  int h = input;
  for (int l = 0; l < arch.enc_layers; ++l) {
    std::string pre = name + "." + std::to_string(l);
    int in_dim = l == 0 ? 3 : arch.enc_width;
    h = g.tape.relu(g.tape.linear(h, g.p(pre + ".w"), g.p(pre + ".b"), arch.enc_width, in_dim));
  }
  return h;
}

template <typename T>
int encode_coords_graph(ModelGraph<T>& g, const ModelArch& arch, const std::string& name,
                        const Vec3& normalized) {
  std::vector<T> in = {static_cast<T>(normalized.x), static_cast<T>(normalized.y),
                       static_cast<T>(normalized.z)};
  return encode_coords_graph(g, arch, name, g.tape.leaf(std::span<const T>(in)));
}

struct FeatureMapShape {
  int node = -1;
  int c = 0, h = 0, w = 0;
  int img_h = 0, img_w = 0;

  /// Image pixel coordinate -> feature map coordinate (centres aligned).
  std::pair<double, double> to_map(double px, double py) const {
    double sx = static_cast<double>(w) / img_w;
    double sy = static_cast<double>(h) / img_h;
    return {(px + 0.5) * sx - 0.5, (py + 0.5) * sy - 0.5};
  }
};

/// Stride-2 pyramid with lateral 1x1 merges; returns the finest-scale map
/// (fpn_c3 channels at half the image resolution).
template <typename T>
FeatureMapShape extract_features_graph(ModelGraph<T>& g, const ModelArch& arch, int image,
                                       int img_h, int img_w) {
  Tape<T>& t = g.tape;
  int h1 = (img_h + 1) / 2, w1 = (img_w + 1) / 2;
  int h2 = (h1 + 1) / 2, w2 = (w1 + 1) / 2;
  int h3 = (h2 + 1) / 2, w3 = (w2 + 1) / 2;
  int c1 = t.relu(t.conv3x3s2(image, g.p("img.c1.w"), g.p("img.c1.b"), 1, img_h, img_w, arch.fpn_c1));
  int c2 = t.relu(t.conv3x3s2(c1, g.p("img.c2.w"), g.p("img.c2.b"), arch.fpn_c1, h1, w1, arch.fpn_c2));
  int c3 = t.relu(t.conv3x3s2(c2, g.p("img.c3.w"), g.p("img.c3.b"), arch.fpn_c2, h2, w2, arch.fpn_c3));
  int l2 = t.conv1x1(c2, g.p("img.l2.w"), g.p("img.l2.b"), arch.fpn_c2, h2, w2, arch.fpn_c3);
  int m2 = t.add(l2, t.upsample2(c3, arch.fpn_c3, h3, w3, h2, w2));
  int l1 = t.conv1x1(c1, g.p("img.l1.w"), g.p("img.l1.b"), arch.fpn_c1, h1, w1, arch.fpn_c3);
  int m1 = t.add(l1, t.upsample2(m2, arch.fpn_c3, h2, w2, h1, w1));
  return {m1, arch.fpn_c3, h1, w1, img_h, img_w};
}

/// Image pixels scaled to [0, 1] for the feature extractor.
template <typename T>
std::vector<T> normalize_image(const ImageSet& images, std::size_t cam) {
  const auto& v = images.views[cam];
  double denom = 1.0;
  if (images.units == ImageUnits::Graylevel && images.bits > 0)
    denom = static_cast<double>((1u << images.bits) - 1u);
  else {
    denom = images.max_pixel();
    if (denom <= 0.0) denom = 1.0;
  }
  std::vector<T> out(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i)
    out[i] = static_cast<T>(v.data[i] / denom);
  return out;
}

/// Decoder head: dec_layers ReLU layers then the Q-logit output layer.
template <typename T>
int decode_logits_graph(ModelGraph<T>& g, const ModelArch& arch, int u) {
  int h = u;
  for (int l = 0; l < arch.dec_layers; ++l) {
    std::string pre = "dec." + std::to_string(l);
    int in_dim = l == 0 ? arch.u_dim() : arch.dec_width;
    h = g.tape.relu(g.tape.linear(h, g.p(pre + ".w"), g.p(pre + ".b"), arch.dec_width, in_dim));
  }
  return g.tape.linear(h, g.p("dec.out.w"), g.p("dec.out.b"), arch.Q, arch.dec_width);
}

/// Feature vector v(X): bilinear samples of every camera's feature map at the
/// projection of X, concatenated in camera order. Cameras that do not see X
/// contribute a zero block.
template <typename T>
int sample_features_graph(ModelGraph<T>& g, const std::vector<FeatureMapShape>& maps,
                          const CameraRig& rig, const Vec3& X) {
  std::vector<int> parts;
  for (std::size_t c = 0; c < rig.cameras.size(); ++c) {
    const Camera& cam = rig.cameras[c];
    if (!cam.sees(X)) {
      parts.push_back(g.tape.leaf_zero(static_cast<std::size_t>(maps[c].c)));
      continue;
    }
    auto [px, py] = cam.project(X);
    auto [fx, fy] = maps[c].to_map(px, py);
    parts.push_back(g.tape.bilinear(maps[c].node, maps[c].c, maps[c].h, maps[c].w, fx, fy));
  }
  return g.tape.concat(parts);
}

/// Full query graph for one location: u = [v(X), g_dom(X), g_cam(X_1..N)]
/// decoded to Q logits.
template <typename T>
int query_logits_graph(ModelGraph<T>& g, const ModelArch& arch,
                       const std::vector<FeatureMapShape>& maps,
                       const std::vector<int>& cam_codes, int dom_code, const CameraRig& rig,
                       const Vec3& X) {
  int v = sample_features_graph(g, maps, rig, X);
  std::vector<int> parts = {v, dom_code};
  parts.insert(parts.end(), cam_codes.begin(), cam_codes.end());
  int u = g.tape.concat(parts);
  return decode_logits_graph(g, arch, u);
}

// ---- value-level inference ------------------------------------------------

/// Bilinear sample of a plain [c][h][w] buffer (same rule as the tape op).
template <typename T>
std::vector<T> bilinear_sample_values(std::span<const T> map, int c, int h, int w, double px,
                                      double py) {
  px = std::clamp(px, 0.0, static_cast<double>(w - 1));
  py = std::clamp(py, 0.0, static_cast<double>(h - 1));
  int x0 = std::min(static_cast<int>(std::floor(px)), w - 1);
  int y0 = std::min(static_cast<int>(std::floor(py)), h - 1);
  int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  double fx = px - x0, fy = py - y0;
  std::vector<T> out(static_cast<std::size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const T* m = map.data() + static_cast<std::size_t>(ci) * h * w;
    double v00 = m[static_cast<std::size_t>(y0) * w + x0];
    double v10 = m[static_cast<std::size_t>(y0) * w + x1];
    double v01 = m[static_cast<std::size_t>(y1) * w + x0];
    double v11 = m[static_cast<std::size_t>(y1) * w + x1];
    out[ci] = static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                             fy * ((1 - fx) * v01 + fx * v11));
  }
  return out;
}

/// Precomputed per-scene state for repeated queries: feature map values and
/// camera-centre codes, with the heavy graphs evaluated once.
template <typename T>
struct SceneEncoding {
  ModelArch arch;
  std::vector<std::vector<T>> maps;  // per camera, c*h*w
  std::vector<FeatureMapShape> shapes;
  std::vector<std::vector<T>> cam_codes;

  static SceneEncoding build(const ImageSet& images, const CameraRig& rig, const VoxelGrid& grid,
                             const ParamStore<T>& params, const ModelArch& arch) {
    if (static_cast<int>(images.views.size()) != arch.n_cam ||
        rig.n_cameras() != arch.n_cam)
      throw std::invalid_argument("SceneEncoding: camera count does not match the model");
    SceneEncoding enc;
    enc.arch = arch;
    Tape<T> tape;
    ModelGraph<T> g(tape, params);
    for (int c = 0; c < arch.n_cam; ++c) {
      std::vector<T> img = normalize_image<T>(images, c);
      int leaf = tape.leaf(std::span<const T>(img));
      FeatureMapShape shape = extract_features_graph(g, arch, leaf, images.views[c].height,
                                                     images.views[c].width);
      auto vals = tape.value(shape.node);
      enc.maps.emplace_back(vals.begin(), vals.end());
      shape.node = -1;
      enc.shapes.push_back(shape);
      int code = encode_coords_graph(g, arch, "cam", normalize_point(grid, rig.cameras[c].center));
      auto cvals = tape.value(code);
      enc.cam_codes.emplace_back(cvals.begin(), cvals.end());
    }
    return enc;
  }
};

/// Posterior vector for one location, using a cached scene encoding.
template <typename T>
std::vector<double> query_posterior(const SceneEncoding<T>& enc, const ParamStore<T>& params,
                                    const CameraRig& rig, const VoxelGrid& grid, const Vec3& X) {
  Tape<T> tape;
  ModelGraph<T> g(tape, params);
  const ModelArch& arch = enc.arch;
  std::vector<int> parts;
  for (int c = 0; c < arch.n_cam; ++c) {
    const Camera& cam = rig.cameras[c];
    if (!cam.sees(X)) {
      parts.push_back(tape.leaf_zero(static_cast<std::size_t>(arch.fpn_c3)));
      continue;
    }
    auto [px, py] = cam.project(X);
    auto [fx, fy] = enc.shapes[c].to_map(px, py);
    std::vector<T> v = bilinear_sample_values<T>(
        std::span<const T>(enc.maps[c].data(), enc.maps[c].size()), enc.shapes[c].c,
        enc.shapes[c].h, enc.shapes[c].w, fx, fy);
    parts.push_back(tape.leaf(std::span<const T>(v)));
  }
  // order: v blocks, then the domain code, then camera codes
  parts.push_back(encode_coords_graph(g, arch, "dom", normalize_point(grid, X)));
  for (int c = 0; c < arch.n_cam; ++c)
    parts.push_back(tape.leaf(std::span<const T>(enc.cam_codes[c].data(), enc.cam_codes[c].size())));
  int u = tape.concat(parts);
  int logits = decode_logits_graph(g, arch, u);
  int probs = tape.softmax(logits);
  auto pv = tape.value(probs);
  return std::vector<double>(pv.begin(), pv.end());
}

/// Runs the model at every masked voxel. Unmasked voxels are omitted from the
/// grid (they read as a delta at bin 0).
template <typename T>
PosteriorGrid infer_scene(const ImageSet& images, const CameraRig& rig, const VoxelGrid& grid,
                          const std::vector<std::uint8_t>& mask, const ParamStore<T>& params,
                          const ModelArch& arch, const PosteriorSpec& spec,
                          const Exec& exec = Exec{}) {
  spec.validate();
  if (spec.Q != arch.Q) throw std::invalid_argument("infer_scene: spec.Q != arch.Q");
  if (mask.size() != grid.size()) throw std::invalid_argument("infer_scene: mask size mismatch");
  SceneEncoding<T> enc = SceneEncoding<T>::build(images, rig, grid, params, arch);

  PosteriorGrid pg;
  pg.spec = spec;
  pg.grid = grid;
  for (std::size_t v = 0; v < mask.size(); ++v)
    if (mask[v]) pg.voxels.push_back(static_cast<std::uint32_t>(v));
  pg.probs.assign(pg.voxels.size() * static_cast<std::size_t>(spec.Q), 0.f);

  int n = static_cast<int>(pg.voxels.size());
  parallel_blocks(n, exec, [&](int i) {
    Vec3 X = grid.index_to_world(grid.from_linear(pg.voxels[static_cast<std::size_t>(i)]));
    std::vector<double> p = query_posterior(enc, params, rig, grid, X);
    for (int q = 0; q < spec.Q; ++q)
      pg.probs[static_cast<std::size_t>(i) * spec.Q + q] = static_cast<float>(p[q]);
  });
  return pg;
}

}  // namespace cloudtomo
