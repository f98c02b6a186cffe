#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cloudtomo/oracle.hpp"
#include "cloudtomo/training.hpp"

using namespace cloudtomo;

namespace {

ModelArch tiny_arch(int n_cam, int Q = 21) {
  ModelArch a;
  a.n_cam = n_cam;
  a.Q = Q;
  a.enc_width = 16;
  a.dec_width = 48;
  a.dec_layers = 3;
  a.fpn_c1 = 4;
  a.fpn_c2 = 8;
  a.fpn_c3 = 12;
  return a;
}

/// Small labeled dataset around a 5^3 grid with a 2-voxel cloud.
std::vector<LabeledScene> tiny_dataset(int n_scenes, int n_cam = 3, std::uint64_t seed = 9) {
  VoxelGrid grid(5, 5, 5, 30, 30, 30);
  Vec3 center = (grid.min_corner() + grid.max_corner()) * 0.5;
  CameraRig rig;
  for (int c = 0; c < n_cam; ++c) {
    double ang = -0.7 + 1.4 * c / std::max(1, n_cam - 1);
    rig.cameras.push_back(
        Camera::look_at(center + Vec3{std::sin(ang) * 600, 40, std::cos(ang) * 600}, center,
                        120.0, 14, 14));
  }
  double sz = 25.0 * kPi / 180.0;
  rig.sun_dir = Vec3{-std::sin(sz), 0, -std::cos(sz)};

  DataGenEnv env;
  env.rt.max_order = 2;
  env.rt.n_mu = 2;
  env.rt.n_phi = 4;
  env.air = AirProfile::vacuum();

  std::vector<LabeledScene> out;
  for (int i = 0; i < n_scenes; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    ExtinctionField f(grid, 0.f);
    f.at(2, 2, 2) = static_cast<float>(rng.uniform(5.0, 18.0));
    f.at(2, 2, 3) = static_cast<float>(rng.uniform(5.0, 18.0));
    ImageSet clean = render(f, env.optics, env.air, rig, env.rt);
    ImageSet noisy = apply_noise(clean, env.sensor, derive_seed(seed, 1000 + i));
    out.push_back({std::move(f), std::move(noisy), rig});
  }
  return out;
}

}  // namespace

TEST_CASE("true posterior is one-hot at the floor bin") {
  PosteriorSpec spec{301, 1.0};
  auto p0 = true_posterior_vector(0.0, spec);
  CHECK(p0[0] == 1.0);
  auto p1 = true_posterior_vector(1.7, spec);
  CHECK(p1[1] == 1.0);
  CHECK(p1[0] == 0.0);
  auto pe = true_posterior_vector(300.9, spec);
  CHECK(pe[300] == 1.0);
  double s = 0;
  for (double x : pe) s += x;
  CHECK(s == 1.0);
}

TEST_CASE("cross entropy examples") {
  std::vector<double> exact = {0, 0, 1.0, 0};
  CHECK(cross_entropy(exact, 2) == 0.0);
  std::vector<double> uniform4(4, 0.25);
  CHECK_THAT(cross_entropy(uniform4, 1), Catch::Matchers::WithinAbs(1.3862943611198906, 1e-14));
  std::vector<double> half = {0.5, 0.25, 0.25};
  CHECK_THAT(cross_entropy(half, 0), Catch::Matchers::WithinAbs(0.6931471805599453, 1e-14));
  CHECK(cross_entropy(uniform4, 3) >= 0.0);
}

TEST_CASE("cloud weight") {
  PosteriorSpec spec{301, 1.0};
  TrainConfig cfg;
  cfg.w_cloud = 0.01;
  CHECK(cloud_weight(0.0, spec, cfg) == 0.01);
  CHECK(cloud_weight(0.5, spec, cfg) == 1.0);  // boundary is inclusive
  CHECK(cloud_weight(10.0, spec, cfg) == 1.0);
}

TEST_CASE("logit gradient of the weighted CE is softmax minus onehot times weight") {
  Tape<double> t;
  std::vector<double> logits = {0.2, -0.7, 1.1, 0.4};
  int li = t.leaf(logits);
  int ce = t.softmax_ce(li, 2);
  double w = 0.01;
  int loss = t.weighted_sum(std::array<int, 1>{ce}, std::array<double, 1>{w});
  t.backward_scalar(loss);

  int sm = t.softmax(t.leaf(logits));
  for (int i = 0; i < 4; ++i) {
    double expect = w * (t.value(sm)[i] - (i == 2 ? 1.0 : 0.0));
    CHECK_THAT(t.grad(li)[i], Catch::Matchers::WithinAbs(expect, 1e-12));
  }
}

TEST_CASE("space carving") {
  VoxelGrid grid(4, 4, 4, 25, 25, 25);
  Vec3 center = (grid.min_corner() + grid.max_corner()) * 0.5;
  CameraRig rig;
  for (double ang : {-0.4, 0.0, 0.4})
    rig.cameras.push_back(
        Camera::look_at(center + Vec3{std::sin(ang) * 500, 0, std::cos(ang) * 500}, center, 120.0,
                        16, 16));
  rig.sun_dir = Vec3{0, 0, -1};

  SECTION("all-dark images carve everything away") {
    ImageSet dark = ImageSet::like(rig);
    auto mask = space_carve(dark, rig, grid, 0.5);
    for (auto m : mask) CHECK(m == 0);
  }
  SECTION("bright images keep every voxel the cameras see") {
    ImageSet bright = ImageSet::like(rig);
    for (auto& v : bright.views)
      for (auto& x : v.data) x = 10.0;
    auto mask = space_carve(bright, rig, grid, 0.5);
    std::size_t kept = 0;
    for (auto m : mask) kept += m;
    CHECK(kept == grid.size());
  }
  SECTION("a single bright voxel carves to a small superset") {
    ExtinctionField f(grid, 0.f);
    f.at(2, 1, 2) = 80.f;
    MediumOptics opt;
    RTConfig cfg;
    cfg.max_order = 1;
    cfg.n_mu = 2;
    cfg.n_phi = 4;
    ImageSet img = render(f, opt, AirProfile::vacuum(), rig, cfg);
    double peak = img.max_pixel();
    REQUIRE(peak > 0.0);
    auto mask = space_carve(img, rig, grid, 0.2 * peak);
    CHECK(mask[grid.linear(2, 1, 2)] == 1);
    std::size_t kept = 0;
    for (auto m : mask) kept += m;
    CHECK(kept <= 27);
  }
}

TEST_CASE("supervised training is deterministic per seed") {
  auto data = tiny_dataset(2);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 12;
  cfg.voxels_per_iter = 32;
  cfg.seed = 5;

  TrainResult a = train_supervised(data, cfg, spec, arch);
  TrainResult b = train_supervised(data, cfg, spec, arch);
  REQUIRE(a.loss_history == b.loss_history);
  for (std::size_t blk = 0; blk < a.params.blocks.size(); ++blk)
    for (std::size_t i = 0; i < a.params.blocks[blk].data.size(); ++i)
      REQUIRE(a.params.blocks[blk].data[i] == b.params.blocks[blk].data[i]);

  TrainConfig cfg2 = cfg;
  cfg2.seed = 6;
  TrainResult c = train_supervised(data, cfg2, spec, arch);
  CHECK(c.loss_history != a.loss_history);
}

TEST_CASE("initial loss of a fresh model is near lnQ times the weighted count") {
  auto data = tiny_dataset(1);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 1;
  cfg.voxels_per_iter = 64;
  cfg.w_cloud = 0.01;
  cfg.cloud_fraction = 0.5;
  cfg.seed = 11;

  TrainResult r = train_supervised(data, cfg, spec, arch);
  int n_cloud = 32;
  double weighted_count = n_cloud * 1.0 + (64 - n_cloud) * 0.01;
  double expected = weighted_count * std::log(21.0);
  CHECK_THAT(r.loss_history[0], Catch::Matchers::WithinRel(expected, 0.05));
}

TEST_CASE("unit cloud weight reduces to the unweighted loss") {
  auto data = tiny_dataset(1);
  // a fully cloudy scene: both weight settings then weigh every voxel by 1
  for (auto& b : data[0].field.beta) b = std::max(b, 2.0f);
  data[0].images = apply_noise(
      render(data[0].field, MediumOptics{}, AirProfile::vacuum(), data[0].rig, RTConfig{2, 2, 4}),
      SensorSpec{}, 77);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 3;
  cfg.voxels_per_iter = 16;
  cfg.seed = 3;
  TrainConfig cfg_w = cfg;
  cfg_w.w_cloud = 1.0;
  TrainConfig cfg_d = cfg;
  cfg_d.w_cloud = 0.01;
  TrainResult a = train_supervised(data, cfg_w, spec, arch);
  TrainResult b = train_supervised(data, cfg_d, spec, arch);
  REQUIRE(a.loss_history == b.loss_history);
}

TEST_CASE("a tiny scene can be overfit") {
  auto data = tiny_dataset(1);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 2000;
  cfg.voxels_per_iter = 48;
  cfg.lr_supervised = 3e-4;
  cfg.seed = 21;

  TrainResult r = train_supervised(data, cfg, spec, arch);
  CHECK(r.loss_history.back() < r.loss_history.front());

  // per-voxel CE on the training scene
  std::vector<std::uint8_t> all(data[0].field.grid.size(), 1);
  PosteriorGrid pg = infer_scene(data[0].images, data[0].rig, data[0].field.grid, all, r.params,
                                 arch, spec);
  double ce_sum = 0.0;
  for (std::size_t i = 0; i < pg.count(); ++i) {
    auto p = pg.row_dense(i);
    ce_sum += cross_entropy(p, spec.bin_of(data[0].field.beta[pg.voxels[i]]));
  }
  CHECK(ce_sum / static_cast<double>(pg.count()) < 0.1);
}

TEST_CASE("training rejects a dataset outside the posterior range") {
  auto data = tiny_dataset(1);
  data[0].field.beta[7] = 50.f;  // above Q * dbeta = 21
  PosteriorSpec spec{21, 1.0};
  TrainConfig cfg;
  CHECK_THROWS_AS(train_supervised(data, cfg, spec, tiny_arch(3, 21)), std::invalid_argument);
}

TEST_CASE("self-supervised refinement keeps the encoder frozen and logs the cost") {
  auto data = tiny_dataset(2);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 150;
  cfg.voxels_per_iter = 48;
  cfg.lr_supervised = 3e-4;
  cfg.seed = 31;
  TrainResult sup = train_supervised(data, cfg, spec, arch);

  RenderEnv env;
  env.air = AirProfile::vacuum();
  env.rt = RTConfig{2, 2, 4};
  std::vector<UnlabeledScene> scenes;
  for (const auto& sc : data) {
    UnlabeledScene u;
    u.images = sc.images;
    u.rig = sc.rig;
    u.grid = sc.field.grid;
    u.mask.assign(sc.field.grid.size(), 0);
    u.mask[sc.field.grid.linear(2, 2, 2)] = 1;
    u.mask[sc.field.grid.linear(2, 2, 3)] = 1;
    scenes.push_back(std::move(u));
  }
  TrainConfig scfg = cfg;
  scfg.iterations = 20;
  SelfTrainResult refined = train_selfsupervised(scenes, env, sup.params, scfg, spec, arch);

  REQUIRE(refined.cost_history.size() == 20);
  double best = *std::min_element(refined.cost_history.begin(), refined.cost_history.end());
  CHECK(best <= refined.cost_history.front());

  // encoder blocks are bit-identical; at least one decoder block moved
  bool dec_moved = false;
  for (std::size_t blk = 0; blk < sup.params.blocks.size(); ++blk) {
    const auto& name = sup.params.blocks[blk].name;
    const auto& before = sup.params.blocks[blk].data;
    const auto& after = refined.params.blocks[blk].data;
    if (name.rfind("dec.", 0) == 0) {
      for (std::size_t i = 0; i < before.size(); ++i)
        if (before[i] != after[i]) dec_moved = true;
    } else {
      for (std::size_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);
    }
  }
  CHECK(dec_moved);
}

TEST_CASE("a well-fit scene barely moves the decoder") {
  auto data = tiny_dataset(1);
  PosteriorSpec spec{21, 1.0};
  ModelArch arch = tiny_arch(3, 21);
  TrainConfig cfg;
  cfg.iterations = 1200;
  cfg.voxels_per_iter = 48;
  cfg.lr_supervised = 3e-4;
  cfg.seed = 41;
  TrainResult sup = train_supervised(data, cfg, spec, arch);

  RenderEnv env;
  env.air = AirProfile::vacuum();
  env.rt = RTConfig{2, 2, 4};
  UnlabeledScene u;
  u.images = data[0].images;
  u.rig = data[0].rig;
  u.grid = data[0].field.grid;
  u.mask.assign(data[0].field.grid.size(), 0);
  u.mask[data[0].field.grid.linear(2, 2, 2)] = 1;
  u.mask[data[0].field.grid.linear(2, 2, 3)] = 1;

  TrainConfig scfg = cfg;
  scfg.iterations = 5;
  SelfTrainResult refined = train_selfsupervised({u}, env, sup.params, scfg, spec, arch);

  double num = 0.0, den = 0.0;
  for (std::size_t blk = 0; blk < sup.params.blocks.size(); ++blk) {
    if (sup.params.blocks[blk].name.rfind("dec.", 0) != 0) continue;
    for (std::size_t i = 0; i < sup.params.blocks[blk].data.size(); ++i) {
      double d = static_cast<double>(refined.params.blocks[blk].data[i]) -
                 sup.params.blocks[blk].data[i];
      num += d * d;
      den += static_cast<double>(sup.params.blocks[blk].data[i]) * sup.params.blocks[blk].data[i];
    }
  }
  CHECK(std::sqrt(num) < 0.01 * std::sqrt(den));
}
