#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cloudtomo/optim.hpp"
#include "cloudtomo/tape.hpp"

using namespace cloudtomo;

namespace {

// central finite differences through an arbitrary scalar-valued graph
template <typename F>
std::vector<double> fd_gradient(std::vector<double> x, F graph, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (graph(xp) - graph(xm)) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("linear layer basics") {
  Tape<double> t;
  SECTION("identity weights pass the input through") {
    std::vector<double> x = {1.5, -2.0, 3.25};
    std::vector<double> W = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::vector<double> b = {0, 0, 0};
    int y = t.linear(t.leaf(x), t.leaf(W), t.leaf(b), 3, 3);
    for (int i = 0; i < 3; ++i) CHECK(t.value(y)[i] == x[i]);
  }
  SECTION("zero weights give the bias") {
    std::vector<double> x = {4.0, 5.0};
    std::vector<double> W = {0, 0, 0, 0};
    std::vector<double> b = {7.0, -3.0};
    int y = t.linear(t.leaf(x), t.leaf(W), t.leaf(b), 2, 2);
    CHECK(t.value(y)[0] == 7.0);
    CHECK(t.value(y)[1] == -3.0);
  }
  SECTION("3x3 case against the frozen hand product") {
    std::vector<double> x = {1, -1, 2};
    std::vector<double> W = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<double> b = {0.5, -0.5, 1};
    int y = t.linear(t.leaf(x), t.leaf(W), t.leaf(b), 3, 3);
    CHECK_THAT(t.value(y)[0], Catch::Matchers::WithinAbs(5.5, 1e-14));
    CHECK_THAT(t.value(y)[1], Catch::Matchers::WithinAbs(10.5, 1e-14));
    CHECK_THAT(t.value(y)[2], Catch::Matchers::WithinAbs(18.0, 1e-14));
  }
}

TEST_CASE("relu values and gradient") {
  Tape<double> t;
  std::vector<double> x = {-1.0, 2.0, 0.5, -3.0};
  int xi = t.leaf(x);
  int y = t.relu(xi);
  CHECK(t.value(y)[0] == 0.0);
  CHECK(t.value(y)[1] == 2.0);

  int s = t.sum(y);
  t.backward_scalar(s);
  CHECK(t.grad(xi)[0] == 0.0);  // indicator away from 0
  CHECK(t.grad(xi)[1] == 1.0);

  auto graph = [](const std::vector<double>& v) {
    Tape<double> tt;
    return tt.scalar(tt.sum(tt.relu(tt.leaf(v))));
  };
  auto fd = fd_gradient({-1.0, 2.0, 0.5, -3.0}, graph);
  for (int i = 0; i < 4; ++i) CHECK_THAT(t.grad(xi)[i], Catch::Matchers::WithinAbs(fd[i], 1e-8));
}

TEST_CASE("softmax properties") {
  Tape<double> t;
  SECTION("two equal logits split evenly") {
    int y = t.softmax(t.leaf(std::vector<double>{0.0, 0.0}));
    CHECK_THAT(t.value(y)[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
    CHECK_THAT(t.value(y)[1], Catch::Matchers::WithinAbs(0.5, 1e-15));
  }
  SECTION("shift invariance") {
    int a = t.softmax(t.leaf(std::vector<double>{0.3, -1.2, 2.0}));
    int b = t.softmax(t.leaf(std::vector<double>{0.3 + 5.5, -1.2 + 5.5, 2.0 + 5.5}));
    for (int i = 0; i < 3; ++i)
      CHECK_THAT(t.value(a)[i], Catch::Matchers::WithinAbs(t.value(b)[i], 1e-14));
  }
  SECTION("[0, ln 3] maps to [1/4, 3/4]") {
    int y = t.softmax(t.leaf(std::vector<double>{0.0, std::log(3.0)}));
    CHECK_THAT(t.value(y)[0], Catch::Matchers::WithinAbs(0.25, 1e-14));
    CHECK_THAT(t.value(y)[1], Catch::Matchers::WithinAbs(0.75, 1e-14));
  }
  SECTION("positive and normalized for spread logits") {
    int y = t.softmax(t.leaf(std::vector<double>{-40.0, 3.0, 11.0, -7.0}));
    double s = 0;
    for (double v : t.value(y)) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("backward on simple graphs") {
  SECTION("d(x^2)/dx at 3 is 6") {
    Tape<double> t;
    int x = t.leaf(std::vector<double>{3.0});
    int y = t.mul(x, x);
    t.backward_scalar(t.sum(y));
    CHECK_THAT(t.grad(x)[0], Catch::Matchers::WithinAbs(6.0, 1e-14));
  }
  SECTION("gradient of a constant path is zero") {
    Tape<double> t;
    int x = t.leaf(std::vector<double>{2.0});
    int c = t.leaf(std::vector<double>{10.0});
    t.backward_scalar(t.sum(c));
    CHECK(t.grad(x)[0] == 0.0);
  }
}

TEST_CASE("chain of linear+relu+softmax+CE matches finite differences") {
  // gradient w.r.t. every parameter of a small 2-layer net
  std::vector<double> W1 = {0.3, -0.2, 0.5, 0.1, 0.4, -0.6, -0.1, 0.25, 0.15,
                            0.05, -0.3, 0.2};                       // 4x3
  std::vector<double> b1 = {0.01, -0.02, 0.03, 0.0};
  std::vector<double> W2 = {0.2, -0.4, 0.1, 0.3, -0.2, 0.5, 0.15, -0.05};  // 2x4
  std::vector<double> b2 = {0.0, 0.1};
  std::vector<double> x = {0.7, -0.3, 0.9};

  struct Built {
    Tape<double> t;
    int logits, w1, b1, w2, b2;
  };
  auto run = [&](const std::vector<double>& w1, const std::vector<double>& bb1,
                 const std::vector<double>& w2, const std::vector<double>& bb2) {
    Built r;
    int xi = r.t.leaf(x);
    r.w1 = r.t.leaf(w1);
    r.b1 = r.t.leaf(bb1);
    r.w2 = r.t.leaf(w2);
    r.b2 = r.t.leaf(bb2);
    int h = r.t.relu(r.t.linear(xi, r.w1, r.b1, 4, 3));
    r.logits = r.t.linear(h, r.w2, r.b2, 2, 4);
    return r;
  };

  Built built = run(W1, b1, W2, b2);
  int loss = built.t.softmax_ce(built.logits, 1);
  built.t.backward_scalar(loss);

  auto loss_of = [&]() {
    Built r = run(W1, b1, W2, b2);
    return r.t.scalar(r.t.softmax_ce(r.logits, 1));
  };

  const double h = 1e-6;
  auto check_block = [&](std::vector<double>& ref, std::span<const double> analytic) {
    for (std::size_t i = 0; i < ref.size(); ++i) {
      double keep = ref[i];
      ref[i] = keep + h;
      double fp = loss_of();
      ref[i] = keep - h;
      double fm = loss_of();
      ref[i] = keep;
      double fd = (fp - fm) / (2 * h);
      if (std::abs(analytic[i]) > 1e-10)
        CHECK_THAT(fd, Catch::Matchers::WithinRel(analytic[i], 1e-4));
      else
        CHECK_THAT(fd, Catch::Matchers::WithinAbs(analytic[i], 1e-8));
    }
  };
  check_block(W1, built.t.grad(built.w1));
  check_block(b1, built.t.grad(built.b1));
  check_block(W2, built.t.grad(built.w2));
  check_block(b2, built.t.grad(built.b2));
}

TEST_CASE("full toy-model gradient check with conv, sampling and smoothmax") {
  // exercise every op kind in one double-precision graph vs FD
  std::vector<double> img(36);
  for (int i = 0; i < 36; ++i) img[i] = 0.1 * ((i * 7) % 11) - 0.3;
  std::vector<double> convw(1 * 1 * 9);
  for (int i = 0; i < 9; ++i) convw[i] = 0.2 - 0.05 * i;
  std::vector<double> convb = {0.05};
  std::vector<double> W = {0.4, -0.3, 0.6, 0.2, -0.1, 0.5};  // 3x2 over sampled features
  std::vector<double> b = {0.0, 0.1, -0.1};

  struct Built2 {
    Tape<double> t;
    int total = -1, cw = -1, cb = -1, w = -1, b = -1;
  };
  auto value = [&]() {
    Built2 r;
    Tape<double>& t = r.t;
    int x = t.leaf(img);
    r.cw = t.leaf(convw);
    r.cb = t.leaf(convb);
    r.w = t.leaf(W);
    r.b = t.leaf(b);
    int c1 = t.relu(t.conv3x3s2(x, r.cw, r.cb, 1, 6, 6, 1));  // 1x3x3
    int up = t.upsample2(c1, 1, 3, 3, 6, 6);
    int m = t.add(x, up);
    int s1 = t.bilinear(m, 1, 6, 6, 2.3, 1.7);
    int s2 = t.bilinear(m, 1, 6, 6, 4.6, 3.2);
    int feat = t.concat(std::array<int, 2>{s1, s2});
    int logits = t.linear(feat, r.w, r.b, 3, 2);
    int probs = t.softmax(logits);
    int sm = t.smoothmax(probs, 4.0, 1.0);
    int ce = t.ce_pick(probs, 2);
    r.total = t.weighted_sum(std::array<int, 2>{sm, ce}, std::array<double, 2>{1.0, 0.5});
    return r;
  };

  Built2 built = value();
  built.t.backward_scalar(built.total);

  auto loss_of = [&]() {
    Built2 r = value();
    return r.t.scalar(r.total);
  };
  auto check_block = [&](std::vector<double>& ref, std::span<const double> analytic) {
    const double h = 1e-6;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      double keep = ref[i];
      ref[i] = keep + h;
      double fp = loss_of();
      ref[i] = keep - h;
      double fm = loss_of();
      ref[i] = keep;
      double fd = (fp - fm) / (2 * h);
      if (std::abs(analytic[i]) > 1e-10)
        CHECK_THAT(fd, Catch::Matchers::WithinRel(analytic[i], 1e-4));
      else
        CHECK_THAT(fd, Catch::Matchers::WithinAbs(analytic[i], 1e-7));
    }
  };
  check_block(convw, built.t.grad(built.cw));
  check_block(convb, built.t.grad(built.cb));
  check_block(W, built.t.grad(built.w));
  check_block(b, built.t.grad(built.b));
}

TEST_CASE("conv output shapes follow ceil(n/2)") {
  Tape<float> t;
  for (int n : {5, 6, 7, 8, 116}) {
    std::vector<float> img(static_cast<std::size_t>(n) * n, 0.5f);
    std::vector<float> w(9, 0.1f), b(1, 0.f);
    int y = t.conv3x3s2(t.leaf(img), t.leaf(w), t.leaf(b), 1, n, n, 1);
    CHECK(t.size_of(y) == static_cast<std::size_t>((n + 1) / 2) * ((n + 1) / 2));
  }
}

TEST_CASE("bilinear sampling interpolates exactly") {
  Tape<double> t;
  std::vector<double> m = {1, 2, 3, 4, 5, 6, 7, 8, 9};  // 3x3
  int mi = t.leaf(m);
  SECTION("integer position returns the grid value") {
    int s = t.bilinear(mi, 1, 3, 3, 2.0, 1.0);
    CHECK(t.value(s)[0] == 6.0);
  }
  SECTION("cell midpoint is the mean of four neighbours") {
    int s = t.bilinear(mi, 1, 3, 3, 0.5, 0.5);
    CHECK_THAT(t.value(s)[0], Catch::Matchers::WithinAbs((1 + 2 + 4 + 5) / 4.0, 1e-14));
  }
}

TEST_CASE("adam first step has magnitude lr") {
  ParamStore<double> store;
  auto& blk = store.add("w", {1});
  blk.data[0] = 0.0;
  Gradients g;
  g.g["w"] = {1.0};
  AdamConfig cfg;
  cfg.lr = 1e-3;
  adam_step(store, g, cfg);
  CHECK_THAT(store.at("w").data[0], Catch::Matchers::WithinAbs(-0.0009999999900000003, 1e-15));
}

TEST_CASE("adam two steps match the frozen hand computation") {
  ParamStore<double> store;
  store.add("w", {1});
  AdamConfig cfg;
  cfg.lr = 1e-3;
  Gradients g1, g2;
  g1.g["w"] = {1.0};
  g2.g["w"] = {0.5};
  adam_step(store, g1, cfg);
  adam_step(store, g2, cfg);
  CHECK_THAT(store.at("w").data[0], Catch::Matchers::WithinAbs(-0.0019321796170183893, 1e-12));
}

TEST_CASE("zero gradient and zero decay leave parameters unchanged") {
  ParamStore<double> store;
  auto& blk = store.add("w", {3});
  blk.data = {1.0, -2.0, 3.0};
  Gradients g;
  g.g["w"] = {0.0, 0.0, 0.0};
  adam_step(store, g, AdamConfig{});
  CHECK(store.at("w").data[0] == 1.0);
  CHECK(store.at("w").data[1] == -2.0);
  CHECK(store.at("w").data[2] == 3.0);
}

TEST_CASE("decoupled weight decay shrinks parameters without gradients") {
  ParamStore<double> store;
  auto& blk = store.add("w", {1});
  blk.data = {2.0};
  Gradients g;
  g.g["w"] = {0.0};
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  adam_step(store, g, cfg);
  CHECK_THAT(store.at("w").data[0], Catch::Matchers::WithinAbs(2.0 - 0.1 * 0.5 * 2.0, 1e-15));
}

TEST_CASE("training steps are bit-deterministic") {
  auto run = [] {
    ParamStore<float> store;
    Rng rng(99);
    auto& blk = store.add("w", {8});
    init_uniform<float>(blk, 8, rng);
    for (int it = 0; it < 100; ++it) {
      Gradients g;
      std::vector<double>& gb = g.g["w"];
      gb.resize(8);
      for (int i = 0; i < 8; ++i)
        gb[i] = std::sin(0.1 * it + i) * static_cast<double>(blk.data[i]);
      AdamConfig cfg;
      cfg.lr = 1e-2;
      cfg.weight_decay = 1e-4;
      adam_step(store, g, cfg);
    }
    return store.blocks[0].data;
  };
  auto a = run();
  auto b = run();
  for (int i = 0; i < 8; ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("checkpoints round-trip parameters and metadata") {
  ParamStore<float> store;
  Rng rng(4);
  init_uniform<float>(store.add("enc.w", {4, 3}), 3, rng);
  init_uniform<float>(store.add("dec.w", {2, 4}), 4, rng);
  store.step = 123;
  json meta;
  meta["arch"] = {{"width", 64}};

  std::string path = (std::filesystem::temp_directory_path() / "test.ckpt").string();
  save_checkpoint(path, store, meta);
  auto [back, meta2] = load_checkpoint<float>(path);

  CHECK(back.step == 123);
  CHECK(meta2["arch"]["width"] == 64);
  REQUIRE(back.blocks.size() == 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < store.blocks[b].data.size(); ++i)
      REQUIRE(back.blocks[b].data[i] == store.blocks[b].data[i]);
  std::remove(path.c_str());
}
