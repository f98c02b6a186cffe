#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cloudtomo/posterior.hpp"
#include "cloudtomo/rng.hpp"

using namespace cloudtomo;

namespace {
std::vector<double> delta(int Q, int q) {
  std::vector<double> p(Q, 0.0);
  p[q] = 1.0;
  return p;
}
std::vector<double> uniform(int Q) { return std::vector<double>(Q, 1.0 / Q); }
}  // namespace

TEST_CASE("map estimate picks the argmax bin") {
  PosteriorSpec s{10, 1.0};
  CHECK(map_estimate(delta(10, 5), s) == 5.0);
  CHECK(map_estimate(std::vector<double>{0.1, 0.3, 0.6, 0, 0, 0, 0, 0, 0, 0}, s) == 2.0);
  PosteriorSpec s2{2, 1.0};
  CHECK(map_estimate(std::vector<double>{0.5, 0.5}, s2) == 0.0);  // tie goes low
}

TEST_CASE("map estimate ignores monotone rescaling") {
  PosteriorSpec s{12, 0.5};
  Rng rng(3);
  for (int n = 0; n < 50; ++n) {
    std::vector<double> p(12);
    double sum = 0;
    for (auto& x : p) sum += (x = rng.uniform(0.01, 1.0));
    for (auto& x : p) x /= sum;
    double before = map_estimate(p, s);
    std::vector<double> q(12);
    double qs = 0;
    for (int i = 0; i < 12; ++i) qs += (q[i] = std::pow(p[i], 1.7));  // strictly monotone
    for (auto& x : q) x /= qs;
    CHECK(map_estimate(q, s) == before);
  }
}

TEST_CASE("mean estimate") {
  PosteriorSpec s{6, 1.0};
  CHECK(mean_estimate(delta(6, 5), s) == 5.0);
  PosteriorSpec s2{2, 1.0};
  CHECK(mean_estimate(std::vector<double>{0.5, 0.5}, s2) == 0.5);
  PosteriorSpec s3{2, 2.0};
  CHECK_THAT(mean_estimate(std::vector<double>{0.25, 0.75}, s3),
             Catch::Matchers::WithinAbs(1.5, 1e-14));
}

TEST_CASE("normalized entropy hits its bounds exactly") {
  PosteriorSpec s{301, 1.0};
  CHECK(normalized_entropy(delta(301, 77), s) == 0.0);
  CHECK_THAT(normalized_entropy(uniform(301), s), Catch::Matchers::WithinAbs(1.0, 1e-12));
  std::vector<double> two(301, 0.0);
  two[3] = 0.5;
  two[200] = 0.5;
  CHECK_THAT(normalized_entropy(two, s),
             Catch::Matchers::WithinAbs(0.12145326590959868, 1e-12));
}

TEST_CASE("entropy stays within [0,1] for random vectors") {
  PosteriorSpec s{64, 1.0};
  Rng rng(17);
  for (int n = 0; n < 200; ++n) {
    std::vector<double> p(64);
    double sum = 0;
    for (auto& x : p) sum += (x = rng.uniform(0.0, 1.0));
    for (auto& x : p) x /= sum;
    double h = normalized_entropy(p, s);
    CHECK(h >= 0.0);
    CHECK(h <= 1.0);
  }
}

TEST_CASE("posterior std") {
  PosteriorSpec s{3, 1.0};
  CHECK(posterior_std(delta(3, 1), s) == 0.0);
  std::vector<double> two = {0.5, 0.0, 0.5};  // values 0 and 2
  CHECK_THAT(posterior_std(two, s), Catch::Matchers::WithinAbs(1.0, 1e-14));
  std::vector<double> triple = {0.25, 0.5, 0.25};
  CHECK_THAT(posterior_std(triple, s), Catch::Matchers::WithinAbs(std::sqrt(0.5), 1e-14));
}

TEST_CASE("smoothmax matches the frozen hand example") {
  PosteriorSpec s{3, 1.0};
  std::vector<double> p = {0.1, 0.3, 0.6};
  CHECK_THAT(smoothmax_estimate(p, s, 10.0),
             Catch::Matchers::WithinAbs(1.9990243572159483, 1e-10));
}

TEST_CASE("smoothmax is exact on deltas and approaches the MAP") {
  PosteriorSpec s{40, 0.5};
  CHECK(smoothmax_estimate(delta(40, 23), s, 10.0) == 23 * 0.5);

  Rng rng(5);
  int used = 0;
  while (used < 200) {
    std::vector<double> p(40);
    double sum = 0;
    for (auto& x : p) sum += (x = rng.uniform(0.001, 1.0));
    for (auto& x : p) x /= sum;
    // a clear unique maximum; near-ties converge only at larger alpha
    std::vector<double> sorted(p.begin(), p.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted[39] * 0.85 < sorted[38]) continue;
    ++used;
    double m = map_estimate(p, s);
    double sm = smoothmax_estimate(p, s, 100.0);
    CHECK(std::abs(sm - m) < 1e-3);
  }
}

TEST_CASE("kl of identical distributions is zero") {
  std::vector<double> p = {0.2, 0.3, 0.5};
  CHECK_THAT(kl_nats(p, p), Catch::Matchers::WithinAbs(0.0, 1e-15));
  std::vector<double> q = {0.5, 0.3, 0.2};
  CHECK(kl_nats(p, q) > 0.0);
}

TEST_CASE("posterior grid round trips and defaults to a delta") {
  PosteriorGrid pg;
  pg.spec = {5, 2.0};
  pg.grid = VoxelGrid(2, 2, 2, 10, 10, 10);
  pg.voxels = {1, 6};
  pg.probs = {0.1f, 0.2f, 0.3f, 0.2f, 0.2f, 0.f, 0.f, 1.f, 0.f, 0.f};

  std::string path = (std::filesystem::temp_directory_path() / "test.pgrid").string();
  save_pgrid(path, pg);
  PosteriorGrid back = load_pgrid(path);
  CHECK(back.spec.Q == 5);
  CHECK(back.spec.dbeta == 2.0);
  REQUIRE(back.voxels == pg.voxels);
  for (std::size_t i = 0; i < pg.probs.size(); ++i) REQUIRE(back.probs[i] == pg.probs[i]);

  auto d = back.at_voxel(3);  // not queried
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 0.0);
  std::remove(path.c_str());
}
