#pragma once
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudtomo/scene.hpp"

namespace cloudtomo {

using json = nlohmann::json;

// All binary containers share one layout: a single-line JSON header,
// a newline, then a raw little-endian float32 payload.

inline void write_header_payload(const std::string& path, const json& header,
                                 const std::vector<float>& payload) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << header.dump() << "\n";
  if (!payload.empty())
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline json read_header_payload(const std::string& path, std::vector<float>& payload) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("missing header line: " + path);
  json header = json::parse(line);
  std::vector<char> rest((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(float) != 0)
    throw std::runtime_error("payload size is not a multiple of 4 bytes: " + path);
  payload.resize(rest.size() / sizeof(float));
  if (!rest.empty()) std::memcpy(payload.data(), rest.data(), rest.size());
  return header;
}

inline void expect_magic(const json& h, const std::string& magic, const std::string& path) {
  if (!h.contains("magic") || h["magic"] != magic)
    throw std::runtime_error("bad magic in " + path + " (expected " + magic + ")");
}

// ---- .vxg : extinction (or any scalar) field --------------------------------

inline void save_vxg(const std::string& path, const ExtinctionField& field) {
  json h;
  h["magic"] = "VXG1";
  h["nx"] = field.grid.nx;
  h["ny"] = field.grid.ny;
  h["nz"] = field.grid.nz;
  h["dx"] = field.grid.dx;
  h["dy"] = field.grid.dy;
  h["dz"] = field.grid.dz;
  h["origin"] = {field.grid.origin.x, field.grid.origin.y, field.grid.origin.z};
  h["dtype"] = "f32le";
  write_header_payload(path, h, field.beta);
}

inline ExtinctionField load_vxg(const std::string& path) {
  std::vector<float> payload;
  json h = read_header_payload(path, payload);
  expect_magic(h, "VXG1", path);
  if (h.value("dtype", "") != std::string("f32le"))
    throw std::runtime_error("unsupported dtype in " + path);
  VoxelGrid g(h.at("nx").get<int>(), h.at("ny").get<int>(), h.at("nz").get<int>(),
              h.at("dx").get<double>(), h.at("dy").get<double>(), h.at("dz").get<double>(),
              Vec3{h.at("origin")[0].get<double>(), h.at("origin")[1].get<double>(),
                   h.at("origin")[2].get<double>()});
  ExtinctionField f(g);
  if (payload.size() != g.size()) throw std::runtime_error("payload size mismatch in " + path);
  f.beta = std::move(payload);
  return f;
}

// ---- .rig : camera formation (pure JSON) ------------------------------------

inline json camera_to_json(const Camera& c) {
  json j;
  j["center"] = {c.center.x, c.center.y, c.center.z};
  j["right"] = {c.right.x, c.right.y, c.right.z};
  j["up"] = {c.up.x, c.up.y, c.up.z};
  j["forward"] = {c.forward.x, c.forward.y, c.forward.z};
  j["focal"] = c.focal;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["width"] = c.width;
  j["height"] = c.height;
  return j;
}

inline Camera camera_from_json(const json& j) {
  auto v3 = [](const json& a) { return Vec3{a[0].get<double>(), a[1].get<double>(), a[2].get<double>()}; };
  Camera c;
  c.center = v3(j.at("center"));
  c.right = v3(j.at("right"));
  c.up = v3(j.at("up"));
  c.forward = v3(j.at("forward"));
  c.focal = j.at("focal").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

inline void save_rig(const std::string& path, const CameraRig& rig) {
  json h;
  h["magic"] = "RIG1";
  h["sun_dir"] = {rig.sun_dir.x, rig.sun_dir.y, rig.sun_dir.z};
  h["solar_irradiance"] = rig.solar_irradiance;
  h["cameras"] = json::array();
  for (const auto& c : rig.cameras) h["cameras"].push_back(camera_to_json(c));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << h.dump() << "\n";
}

inline CameraRig load_rig(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("missing header line: " + path);
  json h = json::parse(line);
  expect_magic(h, "RIG1", path);
  CameraRig rig;
  rig.sun_dir = {h.at("sun_dir")[0].get<double>(), h.at("sun_dir")[1].get<double>(),
                 h.at("sun_dir")[2].get<double>()};
  rig.solar_irradiance = h.at("solar_irradiance").get<double>();
  for (const auto& cj : h.at("cameras")) rig.cameras.push_back(camera_from_json(cj));
  rig.validate();
  return rig;
}

// ---- .imset : multi-view image stack ----------------------------------------

inline void save_imset(const std::string& path, const ImageSet& s) {
  json h;
  h["magic"] = "IMS1";
  h["units"] = s.units == ImageUnits::Radiance ? "radiance" : "graylevel";
  h["scale"] = s.electrons_per_radiance;
  h["gain"] = s.gain;
  h["bits"] = s.bits;
  h["dtype"] = "f32le";
  h["views"] = json::array();
  std::vector<float> payload;
  for (const auto& v : s.views) {
    h["views"].push_back({{"width", v.width}, {"height", v.height}});
    for (double x : v.data) payload.push_back(static_cast<float>(x));
  }
  write_header_payload(path, h, payload);
}

inline ImageSet load_imset(const std::string& path) {
  std::vector<float> payload;
  json h = read_header_payload(path, payload);
  expect_magic(h, "IMS1", path);
  ImageSet s;
  s.units = h.at("units") == "radiance" ? ImageUnits::Radiance : ImageUnits::Graylevel;
  s.electrons_per_radiance = h.at("scale").get<double>();
  s.gain = h.at("gain").get<double>();
  s.bits = h.at("bits").get<int>();
  std::size_t off = 0;
  for (const auto& vj : h.at("views")) {
    ImageSet::View v;
    v.width = vj.at("width").get<int>();
    v.height = vj.at("height").get<int>();
    std::size_t n = static_cast<std::size_t>(v.width) * v.height;
    if (off + n > payload.size()) throw std::runtime_error("payload truncated in " + path);
    v.data.assign(payload.begin() + off, payload.begin() + off + n);
    off += n;
    s.views.push_back(std::move(v));
  }
  if (off != payload.size()) throw std::runtime_error("payload size mismatch in " + path);
  return s;
}

// ---- CSV --------------------------------------------------------------------

inline void save_csv(const std::string& path, const std::string& header_line,
                     const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << header_line << "\n";
  f.precision(17);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << r[i];
    f << "\n";
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace cloudtomo
