#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "cloudtomo/io.hpp"
#include "cloudtomo/rng.hpp"

using namespace cloudtomo;

namespace {
std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("vxg round trip is bit exact") {
  VoxelGrid g(5, 4, 3, 12.5, 7.0, 40.0, Vec3{-3.25, 18.0, 650.0});
  ExtinctionField f(g);
  Rng rng(123);
  for (auto& b : f.beta) b = static_cast<float>(rng.uniform(0.0, 90.0));

  std::string path = tmp_path("roundtrip.vxg");
  save_vxg(path, f);
  ExtinctionField back = load_vxg(path);

  REQUIRE(back.grid.same_layout(g));
  REQUIRE(back.beta.size() == f.beta.size());
  for (std::size_t i = 0; i < f.beta.size(); ++i) REQUIRE(back.beta[i] == f.beta[i]);
  std::remove(path.c_str());
}

TEST_CASE("vxg writes the documented header line") {
  VoxelGrid g(2, 1, 1, 1, 1, 1);
  ExtinctionField f(g, 2.0f);
  std::string path = tmp_path("header.vxg");
  save_vxg(path, f);
  std::string text = read_text_file(path);
  auto nl = text.find('\n');
  REQUIRE(nl != std::string::npos);
  json h = json::parse(text.substr(0, nl));
  CHECK(h["magic"] == "VXG1");
  CHECK(h["dtype"] == "f32le");
  CHECK(h["nx"] == 2);
  CHECK(text.size() == nl + 1 + 2 * sizeof(float));
  std::remove(path.c_str());
}

TEST_CASE("rig round trip") {
  FanRigSpec spec;
  spec.n_cam = 3;
  spec.width = 17;
  spec.height = 9;
  CameraRig rig = make_fan_rig(Vec3{10, 20, 30}, spec);
  std::string path = tmp_path("roundtrip.rig");
  save_rig(path, rig);
  CameraRig back = load_rig(path);
  REQUIRE(back.n_cameras() == 3);
  CHECK(back.solar_irradiance == rig.solar_irradiance);
  for (int c = 0; c < 3; ++c) {
    CHECK(back.cameras[c].center.x == rig.cameras[c].center.x);
    CHECK(back.cameras[c].focal == rig.cameras[c].focal);
    CHECK(back.cameras[c].width == rig.cameras[c].width);
  }
  std::remove(path.c_str());
}

TEST_CASE("imset round trip keeps units and exposure metadata") {
  ImageSet s;
  ImageSet::View v;
  v.width = 3;
  v.height = 2;
  v.data = {0.f, 1.f, 2.f, 3.f, 4.f, 1023.f};
  s.views = {v, v};
  s.units = ImageUnits::Graylevel;
  s.electrons_per_radiance = 1234.5;
  s.gain = 13.0;
  s.bits = 10;

  std::string path = tmp_path("roundtrip.imset");
  save_imset(path, s);
  ImageSet back = load_imset(path);
  REQUIRE(back.views.size() == 2);
  CHECK(back.units == ImageUnits::Graylevel);
  CHECK(back.electrons_per_radiance == s.electrons_per_radiance);
  CHECK(back.gain == 13.0);
  CHECK(back.bits == 10);
  for (std::size_t i = 0; i < v.data.size(); ++i) REQUIRE(back.views[1].data[i] == v.data[i]);
  std::remove(path.c_str());
}

TEST_CASE("corrupt files are rejected") {
  std::string path = tmp_path("bad.vxg");
  {
    std::ofstream f(path, std::ios::binary);
    f << "{\"magic\":\"NOPE\"}\n";
  }
  CHECK_THROWS(load_vxg(path));
  CHECK_THROWS(load_vxg(tmp_path("does_not_exist.vxg")));
  std::remove(path.c_str());
}
