#pragma once
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloudtomo/io.hpp"
#include "cloudtomo/rng.hpp"

namespace cloudtomo {

/// Named flat parameter blocks with their Adam moments.
template <typename T>
struct ParamStore {
  struct Block {
    std::string name;
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> m, v;  // Adam first/second moments
  };

  std::vector<Block> blocks;
  std::map<std::string, int> index;
  long step = 0;

  Block& add(const std::string& name, std::vector<int> shape) {
    if (index.count(name)) throw std::invalid_argument("ParamStore: duplicate block " + name);
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    Block b;
    b.name = name;
    b.shape = std::move(shape);
    b.data.assign(n, T(0));
    b.m.assign(n, T(0));
    b.v.assign(n, T(0));
    index[name] = static_cast<int>(blocks.size());
    blocks.push_back(std::move(b));
    return blocks.back();
  }

  Block& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("ParamStore: no block " + name);
    return blocks[static_cast<std::size_t>(it->second)];
  }
  const Block& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("ParamStore: no block " + name);
    return blocks[static_cast<std::size_t>(it->second)];
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.data.size();
    return n;
  }
};

/// Per-block gradient buffers, accumulated in double.
struct Gradients {
  std::map<std::string, std::vector<double>> g;

  template <typename T>
  void accumulate(const std::string& name, std::span<const T> grad) {
    auto& buf = g[name];
    if (buf.empty()) buf.assign(grad.size(), 0.0);
    if (buf.size() != grad.size()) throw std::invalid_argument("Gradients: size mismatch " + name);
    for (std::size_t i = 0; i < grad.size(); ++i) buf[i] += static_cast<double>(grad[i]);
  }

  bool finite() const {
    for (const auto& [k, buf] : g)
      for (double x : buf)
        if (!std::isfinite(x)) return false;
    return true;
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied directly to the parameters
};

/// One bias-corrected Adam step over every block present in `grads`.
/// Blocks without gradients are left untouched (including their moments).
template <typename T>
void adam_step(ParamStore<T>& store, const Gradients& grads, const AdamConfig& cfg) {
  store.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(store.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(store.step));
  for (const auto& [name, gbuf] : grads.g) {
    auto& blk = store.at(name);
    if (gbuf.size() != blk.data.size())
      throw std::invalid_argument("adam_step: gradient size mismatch for " + name);
    for (std::size_t i = 0; i < gbuf.size(); ++i) {
      double gi = gbuf[i];
      double m = cfg.beta1 * static_cast<double>(blk.m[i]) + (1.0 - cfg.beta1) * gi;
      double v = cfg.beta2 * static_cast<double>(blk.v[i]) + (1.0 - cfg.beta2) * gi * gi;
      blk.m[i] = static_cast<T>(m);
      blk.v[i] = static_cast<T>(v);
      double upd = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      double theta = static_cast<double>(blk.data[i]);
      theta -= upd + cfg.lr * cfg.weight_decay * theta;
      blk.data[i] = static_cast<T>(theta);
    }
  }
}

/// Fills a block with uniform values of He-style magnitude for its fan-in.
template <typename T>
void init_uniform(typename ParamStore<T>::Block& blk, int fan_in, Rng& rng, double gain = 1.0) {
  double bound = gain * std::sqrt(6.0 / std::max(1, fan_in));
  for (auto& x : blk.data) x = static_cast<T>(rng.uniform(-bound, bound));
}

// ---- checkpoints -------------------------------------------------------
// Single file: JSON manifest line (block names, shapes, step, free-form
// metadata) + concatenated little-endian f32 payload in manifest order.

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, const json& meta) {
  json h;
  h["magic"] = "CKPT1";
  h["step"] = store.step;
  h["meta"] = meta;
  h["blocks"] = json::array();
  std::vector<float> payload;
  for (const auto& b : store.blocks) {
    h["blocks"].push_back({{"name", b.name}, {"shape", b.shape}});
    for (T x : b.data) payload.push_back(static_cast<float>(x));
  }
  write_header_payload(path, h, payload);
}

template <typename T>
std::pair<ParamStore<T>, json> load_checkpoint(const std::string& path) {
  std::vector<float> payload;
  json h = read_header_payload(path, payload);
  expect_magic(h, "CKPT1", path);
  ParamStore<T> store;
  store.step = h.at("step").get<long>();
  std::size_t off = 0;
  for (const auto& bj : h.at("blocks")) {
    auto& blk = store.add(bj.at("name").get<std::string>(), bj.at("shape").get<std::vector<int>>());
    if (off + blk.data.size() > payload.size())
      throw std::runtime_error("checkpoint payload truncated: " + path);
    for (std::size_t i = 0; i < blk.data.size(); ++i)
      blk.data[i] = static_cast<T>(payload[off + i]);
    off += blk.data.size();
  }
  if (off != payload.size()) throw std::runtime_error("checkpoint payload size mismatch: " + path);
  return {std::move(store), h.value("meta", json::object())};
}

}  // namespace cloudtomo
