#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace cloudtomo {

/// Operation kinds recorded on the tape.
enum class Op {
  Leaf,       // constant or parameter input
  Linear,     // W x + b
  Relu,
  Softmax,
  SoftmaxCE,  // -log softmax(logits)[q], fused for stability
  CePick,     // -log p[q]
  Concat,
  Add,        // elementwise
  Sub,        // elementwise
  Mul,        // elementwise
  Scale,      // constant * x
  Sum,        // reduce to scalar
  Conv3x3s2,  // stride-2, pad-1 convolution
  Conv1x1,
  Upsample2,  // nearest-neighbour x2, cropped to a target shape
  Bilinear,   // sample a CxHxW map at one continuous position
  Smoothmax,  // power-amplified expectation of bin values
  WeightedSum // scalar = sum_i w_i * scalar_i
};

/// Reverse-mode autodiff tape over dense buffers. Nodes are appended during
/// the forward pass and replayed backwards; reductions accumulate in double
/// regardless of the value type T.
template <typename T>
class Tape {
 public:
  struct Node {
    Op op;
    std::array<int, 3> in{-1, -1, -1};
    std::size_t off = 0, n = 0;          // output slice in the value arena
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0, i4 = 0, i5 = 0;  // shape metadata
    double x0 = 0.0, x1 = 0.0;           // op scalars
    std::size_t aux_off = 0, aux_n = 0;  // slice in aux_ (extra input ids)
  };

  void clear() {
    nodes_.clear();
    vals_.clear();
    grads_.clear();
    aux_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

  std::span<const T> value(int id) const {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    return {vals_.data() + nd.off, nd.n};
  }
  std::span<const T> grad(int id) const {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    return {grads_.data() + nd.off, nd.n};
  }
  T scalar(int id) const { return value(id)[0]; }
  std::size_t size_of(int id) const { return nodes_[static_cast<std::size_t>(id)].n; }

  // ---- graph construction ----------------------------------------------

  int leaf(std::span<const T> data) {
    int id = alloc(Op::Leaf, data.size());
    T* out = out_ptr(id);
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = data[i];
    return id;
  }

  int leaf_zero(std::size_t n) {
    int id = alloc(Op::Leaf, n);
    T* out = out_ptr(id);
    for (std::size_t i = 0; i < n; ++i) out[i] = T(0);
    return id;
  }

  /// y = W x + b with W row-major (rows x cols).
  int linear(int x, int W, int b, int rows, int cols) {
    check_size(x, cols, "linear input");
    check_size(W, static_cast<std::size_t>(rows) * cols, "linear weight");
    check_size(b, rows, "linear bias");
    int id = alloc(Op::Linear, rows, {x, W, b});
    node(id).i0 = rows;
    node(id).i1 = cols;
    const T* xv = ptr(x);
    const T* wv = ptr(W);
    const T* bv = ptr(b);
    T* out = out_ptr(id);
    for (int r = 0; r < rows; ++r) {
      double acc = static_cast<double>(bv[r]);
      const T* wr = wv + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += static_cast<double>(wr[c]) * xv[c];
      out[r] = static_cast<T>(acc);
    }
    return id;
  }

  int relu(int x) {
    int id = alloc(Op::Relu, size_of(x), {x});
    const T* xv = ptr(x);
    T* out = out_ptr(id);
    for (std::size_t i = 0; i < size_of(x); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return id;
  }

  int softmax(int x) {
    int id = alloc(Op::Softmax, size_of(x), {x});
    const T* xv = ptr(x);
    T* out = out_ptr(id);
    std::size_t n = size_of(x);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(xv[i]));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(xv[i]) - mx);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = static_cast<T>(std::exp(static_cast<double>(xv[i]) - mx) / s);
    return id;
  }

  /// Cross entropy of a one-hot target at bin q against softmax(logits).
  int softmax_ce(int logits, int q) {
    int id = alloc(Op::SoftmaxCE, 1, {logits});
    node(id).i0 = q;
    const T* xv = ptr(logits);
    std::size_t n = size_of(logits);
    if (q < 0 || static_cast<std::size_t>(q) >= n)
      throw std::out_of_range("softmax_ce: bin out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(xv[i]));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(xv[i]) - mx);
    out_ptr(id)[0] = static_cast<T>(mx + std::log(s) - static_cast<double>(xv[q]));
    return id;
  }

  /// -log p[q] on an explicit probability vector.
  int ce_pick(int probs, int q) {
    int id = alloc(Op::CePick, 1, {probs});
    node(id).i0 = q;
    const T* pv = ptr(probs);
    if (q < 0 || static_cast<std::size_t>(q) >= size_of(probs))
      throw std::out_of_range("ce_pick: bin out of range");
    out_ptr(id)[0] = static_cast<T>(-std::log(static_cast<double>(pv[q])));
    return id;
  }

  int concat(std::span<const int> parts) {
    std::size_t n = 0;
    for (int p : parts) n += size_of(p);
    int id = alloc(Op::Concat, n);
    Node& nd = node(id);
    nd.aux_off = aux_.size();
    nd.aux_n = parts.size();
    for (int p : parts) aux_.push_back(p);
    T* out = out_ptr(id);
    std::size_t off = 0;
    for (int p : parts) {
      const T* pv = ptr(p);
      for (std::size_t i = 0; i < size_of(p); ++i) out[off + i] = pv[i];
      off += size_of(p);
    }
    return id;
  }

  int add(int a, int b) { return binary(Op::Add, a, b); }
  int sub(int a, int b) { return binary(Op::Sub, a, b); }
  int mul(int a, int b) { return binary(Op::Mul, a, b); }

  int scale(int x, double c) {
    int id = alloc(Op::Scale, size_of(x), {x});
    node(id).x0 = c;
    const T* xv = ptr(x);
    T* out = out_ptr(id);
    for (std::size_t i = 0; i < size_of(x); ++i) out[i] = static_cast<T>(c * xv[i]);
    return id;
  }

  int sum(int x) {
    int id = alloc(Op::Sum, 1, {x});
    const T* xv = ptr(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < size_of(x); ++i) acc += static_cast<double>(xv[i]);
    out_ptr(id)[0] = static_cast<T>(acc);
    return id;
  }

  /// 3x3 stride-2 pad-1 convolution of a [cin][h][w] map.
  int conv3x3s2(int x, int W, int b, int cin, int h, int w, int cout) {
    check_size(x, static_cast<std::size_t>(cin) * h * w, "conv input");
    check_size(W, static_cast<std::size_t>(cout) * cin * 9, "conv weight");
    check_size(b, cout, "conv bias");
    int oh = (h + 1) / 2, ow = (w + 1) / 2;
    int id = alloc(Op::Conv3x3s2, static_cast<std::size_t>(cout) * oh * ow, {x, W, b});
    Node& nd = node(id);
    nd.i0 = cin;
    nd.i1 = h;
    nd.i2 = w;
    nd.i3 = cout;
    nd.i4 = oh;
    nd.i5 = ow;
    const T* xv = ptr(x);
    const T* wv = ptr(W);
    const T* bv = ptr(b);
    T* out = out_ptr(id);
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = static_cast<double>(bv[co]);
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < 3; ++ky) {
              int iy = 2 * oy + ky - 1;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < 3; ++kx) {
                int ix = 2 * ox + kx - 1;
                if (ix < 0 || ix >= w) continue;
                acc += static_cast<double>(wv[((static_cast<std::size_t>(co) * cin + ci) * 3 + ky) * 3 + kx]) *
                       xv[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
              }
            }
          out[(static_cast<std::size_t>(co) * oh + oy) * ow + ox] = static_cast<T>(acc);
        }
    return id;
  }

  int conv1x1(int x, int W, int b, int cin, int h, int w, int cout) {
    check_size(x, static_cast<std::size_t>(cin) * h * w, "conv1x1 input");
    check_size(W, static_cast<std::size_t>(cout) * cin, "conv1x1 weight");
    check_size(b, cout, "conv1x1 bias");
    int id = alloc(Op::Conv1x1, static_cast<std::size_t>(cout) * h * w, {x, W, b});
    Node& nd = node(id);
    nd.i0 = cin;
    nd.i1 = h;
    nd.i2 = w;
    nd.i3 = cout;
    const T* xv = ptr(x);
    const T* wv = ptr(W);
    const T* bv = ptr(b);
    T* out = out_ptr(id);
    std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int co = 0; co < cout; ++co)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = static_cast<double>(bv[co]);
        for (int ci = 0; ci < cin; ++ci)
          acc += static_cast<double>(wv[static_cast<std::size_t>(co) * cin + ci]) * xv[ci * hw + p];
        out[co * hw + p] = static_cast<T>(acc);
      }
    return id;
  }

  /// Nearest-neighbour x2 upsampling of a [c][h][w] map, cropped to oh x ow.
  int upsample2(int x, int c, int h, int w, int oh, int ow) {
    check_size(x, static_cast<std::size_t>(c) * h * w, "upsample input");
    if (oh > 2 * h || ow > 2 * w) throw std::invalid_argument("upsample2: target too large");
    int id = alloc(Op::Upsample2, static_cast<std::size_t>(c) * oh * ow, {x});
    Node& nd = node(id);
    nd.i0 = c;
    nd.i1 = h;
    nd.i2 = w;
    nd.i3 = oh;
    nd.i4 = ow;
    const T* xv = ptr(x);
    T* out = out_ptr(id);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out[(static_cast<std::size_t>(ci) * oh + y) * ow + xx] =
              xv[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
    return id;
  }

  /// Bilinear sample of a [c][h][w] map at continuous (px, py) in map pixel
  /// coordinates; positions are clamped to the border.
  int bilinear(int map, int c, int h, int w, double px, double py) {
    check_size(map, static_cast<std::size_t>(c) * h * w, "bilinear input");
    int id = alloc(Op::Bilinear, static_cast<std::size_t>(c), {map});
    Node& nd = node(id);
    nd.i0 = c;
    nd.i1 = h;
    nd.i2 = w;
    nd.x0 = px;
    nd.x1 = py;
    const T* xv = ptr(map);
    T* out = out_ptr(id);
    auto [x0, y0, fx, fy] = bilinear_setup(px, py, w, h);
    int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    for (int ci = 0; ci < c; ++ci) {
      const T* m = xv + static_cast<std::size_t>(ci) * h * w;
      double v00 = m[static_cast<std::size_t>(y0) * w + x0];
      double v10 = m[static_cast<std::size_t>(y0) * w + x1];
      double v01 = m[static_cast<std::size_t>(y1) * w + x0];
      double v11 = m[static_cast<std::size_t>(y1) * w + x1];
      out[ci] = static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                               fy * ((1 - fx) * v01 + fx * v11));
    }
    return id;
  }

  /// Differentiable argmax surrogate: amplify probabilities to the power
  /// alpha, renormalize, and take the expectation of bin values q * dbeta.
  int smoothmax(int probs, double alpha, double dbeta) {
    int id = alloc(Op::Smoothmax, 1, {probs});
    Node& nd = node(id);
    nd.x0 = alpha;
    nd.x1 = dbeta;
    const T* pv = ptr(probs);
    std::size_t n = size_of(probs);
    double s = 0.0, num = 0.0;
    for (std::size_t q = 0; q < n; ++q) {
      double t = std::pow(std::max(0.0, static_cast<double>(pv[q])), alpha);
      s += t;
      num += t * (static_cast<double>(q) * dbeta);
    }
    if (s <= 0.0) throw std::runtime_error("smoothmax: vanishing amplified mass");
    out_ptr(id)[0] = static_cast<T>(num / s);
    return id;
  }

  /// scalar = sum_i weights[i] * scalars[i]
  int weighted_sum(std::span<const int> scalars, std::span<const double> weights) {
    if (scalars.size() != weights.size())
      throw std::invalid_argument("weighted_sum: length mismatch");
    int id = alloc(Op::WeightedSum, 1);
    Node& nd = node(id);
    nd.aux_off = aux_.size();
    nd.aux_n = scalars.size();
    for (int p : scalars) aux_.push_back(p);
    nd.x0 = 0;  // weights stored in daux_
    nd.i0 = static_cast<int>(daux_.size());
    for (double wgt : weights) daux_.push_back(wgt);
    double acc = 0.0;
    for (std::size_t i = 0; i < scalars.size(); ++i)
      acc += weights[i] * static_cast<double>(ptr(scalars[i])[0]);
    out_ptr(id)[0] = static_cast<T>(acc);
    return id;
  }

  // ---- backward ----------------------------------------------------------

  /// Zeroes all adjoints, then seeds d(output)/d(node) pairs and runs the
  /// reverse sweep. For a scalar loss pass {{loss_id, {1}}}.
  void backward(std::span<const std::pair<int, std::vector<T>>> seeds) {
    grads_.assign(vals_.size(), T(0));
    for (const auto& [id, adj] : seeds) {
      const Node& nd = nodes_[static_cast<std::size_t>(id)];
      if (adj.size() != nd.n) throw std::invalid_argument("backward: seed size mismatch");
      for (std::size_t i = 0; i < nd.n; ++i) grads_[nd.off + i] += adj[i];
    }
    for (std::size_t ni = nodes_.size(); ni-- > 0;) backward_node(static_cast<int>(ni));
  }

  void backward_scalar(int loss_id) {
    std::vector<std::pair<int, std::vector<T>>> seeds;
    seeds.push_back({loss_id, {T(1)}});
    backward(seeds);
  }

 private:
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const T* ptr(int id) const { return vals_.data() + nodes_[static_cast<std::size_t>(id)].off; }
  T* out_ptr(int id) { return vals_.data() + nodes_[static_cast<std::size_t>(id)].off; }
  T* grad_ptr(int id) { return grads_.data() + nodes_[static_cast<std::size_t>(id)].off; }

  void check_size(int id, std::size_t n, const char* what) const {
    if (nodes_[static_cast<std::size_t>(id)].n != n)
      throw std::invalid_argument(std::string(what) + ": size mismatch");
  }

  int alloc(Op op, std::size_t n, std::initializer_list<int> in = {}) {
    Node nd;
    nd.op = op;
    nd.off = vals_.size();
    nd.n = n;
    int k = 0;
    for (int i : in) nd.in[k++] = i;
    vals_.resize(vals_.size() + n);
    nodes_.push_back(nd);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int binary(Op op, int a, int b) {
    check_size(b, size_of(a), "elementwise");
    int id = alloc(op, size_of(a), {a, b});
    const T* av = ptr(a);
    const T* bv = ptr(b);
    T* out = out_ptr(id);
    for (std::size_t i = 0; i < size_of(a); ++i)
      out[i] = op == Op::Add ? av[i] + bv[i] : (op == Op::Sub ? av[i] - bv[i] : av[i] * bv[i]);
    return id;
  }

  static std::tuple<int, int, double, double> bilinear_setup(double px, double py, int w, int h) {
    px = std::clamp(px, 0.0, static_cast<double>(w - 1));
    py = std::clamp(py, 0.0, static_cast<double>(h - 1));
    int x0 = std::min(static_cast<int>(std::floor(px)), w - 1);
    int y0 = std::min(static_cast<int>(std::floor(py)), h - 1);
    return {x0, y0, px - x0, py - y0};
  }

  void backward_node(int id) {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    const T* g = grads_.data() + nd.off;
    bool any = false;
    for (std::size_t i = 0; i < nd.n; ++i)
      if (g[i] != T(0)) {
        any = true;
        break;
      }
    if (!any) return;

    switch (nd.op) {
      case Op::Leaf:
        break;
      case Op::Linear: {
        int rows = nd.i0, cols = nd.i1;
        const T* xv = ptr(nd.in[0]);
        const T* wv = ptr(nd.in[1]);
        T* gx = grad_ptr(nd.in[0]);
        T* gw = grad_ptr(nd.in[1]);
        T* gb = grad_ptr(nd.in[2]);
        for (int r = 0; r < rows; ++r) {
          T gr = g[r];
          if (gr == T(0)) continue;
          gb[r] += gr;
          const T* wr = wv + static_cast<std::size_t>(r) * cols;
          T* gwr = gw + static_cast<std::size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) {
            gwr[c] += gr * xv[c];
            gx[c] += gr * wr[c];
          }
        }
        break;
      }
      case Op::Relu: {
        const T* xv = ptr(nd.in[0]);
        T* gx = grad_ptr(nd.in[0]);
        for (std::size_t i = 0; i < nd.n; ++i)
          if (xv[i] > T(0)) gx[i] += g[i];
        break;
      }
      case Op::Softmax: {
        const T* yv = ptr(id);
        T* gx = grad_ptr(nd.in[0]);
        double dotp = 0.0;
        for (std::size_t i = 0; i < nd.n; ++i)
          dotp += static_cast<double>(g[i]) * static_cast<double>(yv[i]);
        for (std::size_t i = 0; i < nd.n; ++i)
          gx[i] += static_cast<T>(static_cast<double>(yv[i]) *
                                  (static_cast<double>(g[i]) - dotp));
        break;
      }
      case Op::SoftmaxCE: {
        // d/dlogits = softmax(logits) - onehot(q)
        const T* xv = ptr(nd.in[0]);
        T* gx = grad_ptr(nd.in[0]);
        std::size_t n = nodes_[static_cast<std::size_t>(nd.in[0])].n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(xv[i]));
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(xv[i]) - mx);
        double seed = static_cast<double>(g[0]);
        for (std::size_t i = 0; i < n; ++i) {
          double soft = std::exp(static_cast<double>(xv[i]) - mx) / s;
          double delta = (static_cast<int>(i) == nd.i0) ? 1.0 : 0.0;
          gx[i] += static_cast<T>(seed * (soft - delta));
        }
        break;
      }
      case Op::CePick: {
        const T* pv = ptr(nd.in[0]);
        T* gp = grad_ptr(nd.in[0]);
        gp[nd.i0] += static_cast<T>(-static_cast<double>(g[0]) /
                                    static_cast<double>(pv[nd.i0]));
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nd.aux_n; ++k) {
          int p = aux_[nd.aux_off + k];
          T* gp = grad_ptr(p);
          std::size_t sz = size_of(p);
          for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
          off += sz;
        }
        break;
      }
      case Op::Add: {
        T* ga = grad_ptr(nd.in[0]);
        T* gb = grad_ptr(nd.in[1]);
        for (std::size_t i = 0; i < nd.n; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::Sub: {
        T* ga = grad_ptr(nd.in[0]);
        T* gb = grad_ptr(nd.in[1]);
        for (std::size_t i = 0; i < nd.n; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        const T* av = ptr(nd.in[0]);
        const T* bv = ptr(nd.in[1]);
        T* ga = grad_ptr(nd.in[0]);
        T* gb = grad_ptr(nd.in[1]);
        for (std::size_t i = 0; i < nd.n; ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::Scale: {
        T* gx = grad_ptr(nd.in[0]);
        for (std::size_t i = 0; i < nd.n; ++i) gx[i] += static_cast<T>(nd.x0 * g[i]);
        break;
      }
      case Op::Sum: {
        T* gx = grad_ptr(nd.in[0]);
        std::size_t n = size_of(nd.in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
        break;
      }
      case Op::Conv3x3s2: {
        int cin = nd.i0, h = nd.i1, w = nd.i2, cout = nd.i3, oh = nd.i4, ow = nd.i5;
        const T* xv = ptr(nd.in[0]);
        const T* wv = ptr(nd.in[1]);
        T* gx = grad_ptr(nd.in[0]);
        T* gw = grad_ptr(nd.in[1]);
        T* gb = grad_ptr(nd.in[2]);
        for (int co = 0; co < cout; ++co)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              T go = g[(static_cast<std::size_t>(co) * oh + oy) * ow + ox];
              if (go == T(0)) continue;
              gb[co] += go;
              for (int ci = 0; ci < cin; ++ci)
                for (int ky = 0; ky < 3; ++ky) {
                  int iy = 2 * oy + ky - 1;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < 3; ++kx) {
                    int ix = 2 * ox + kx - 1;
                    if (ix < 0 || ix >= w) continue;
                    std::size_t widx = ((static_cast<std::size_t>(co) * cin + ci) * 3 + ky) * 3 + kx;
                    std::size_t xidx = (static_cast<std::size_t>(ci) * h + iy) * w + ix;
                    gw[widx] += go * xv[xidx];
                    gx[xidx] += go * wv[widx];
                  }
                }
            }
        break;
      }
      case Op::Conv1x1: {
        int cin = nd.i0, h = nd.i1, w = nd.i2, cout = nd.i3;
        std::size_t hw = static_cast<std::size_t>(h) * w;
        const T* xv = ptr(nd.in[0]);
        const T* wv = ptr(nd.in[1]);
        T* gx = grad_ptr(nd.in[0]);
        T* gw = grad_ptr(nd.in[1]);
        T* gb = grad_ptr(nd.in[2]);
        for (int co = 0; co < cout; ++co)
          for (std::size_t p = 0; p < hw; ++p) {
            T go = g[co * hw + p];
            if (go == T(0)) continue;
            gb[co] += go;
            for (int ci = 0; ci < cin; ++ci) {
              gw[static_cast<std::size_t>(co) * cin + ci] += go * xv[ci * hw + p];
              gx[ci * hw + p] += go * wv[static_cast<std::size_t>(co) * cin + ci];
            }
          }
        break;
      }
      case Op::Upsample2: {
        int c = nd.i0, h = nd.i1, w = nd.i2, oh = nd.i3, ow = nd.i4;
        T* gx = grad_ptr(nd.in[0]);
        for (int ci = 0; ci < c; ++ci)
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
              gx[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
                  g[(static_cast<std::size_t>(ci) * oh + y) * ow + xx];
        break;
      }
      case Op::Bilinear: {
        int c = nd.i0, h = nd.i1, w = nd.i2;
        T* gx = grad_ptr(nd.in[0]);
        auto [x0, y0, fx, fy] = bilinear_setup(nd.x0, nd.x1, w, h);
        int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        for (int ci = 0; ci < c; ++ci) {
          double go = g[ci];
          if (go == 0.0) continue;
          T* m = gx + static_cast<std::size_t>(ci) * h * w;
          m[static_cast<std::size_t>(y0) * w + x0] += static_cast<T>(go * (1 - fy) * (1 - fx));
          m[static_cast<std::size_t>(y0) * w + x1] += static_cast<T>(go * (1 - fy) * fx);
          m[static_cast<std::size_t>(y1) * w + x0] += static_cast<T>(go * fy * (1 - fx));
          m[static_cast<std::size_t>(y1) * w + x1] += static_cast<T>(go * fy * fx);
        }
        break;
      }
      case Op::Smoothmax: {
        const T* pv = ptr(nd.in[0]);
        T* gp = grad_ptr(nd.in[0]);
        std::size_t n = size_of(nd.in[0]);
        double alpha = nd.x0, dbeta = nd.x1;
        double s = 0.0, num = 0.0;
        for (std::size_t q = 0; q < n; ++q) {
          double t = std::pow(std::max(0.0, static_cast<double>(pv[q])), alpha);
          s += t;
          num += t * (static_cast<double>(q) * dbeta);
        }
        double outv = num / s;
        double seed = static_cast<double>(g[0]);
        for (std::size_t q = 0; q < n; ++q) {
          double p = static_cast<double>(pv[q]);
          if (p <= 0.0) continue;
          double t = std::pow(p, alpha);
          gp[q] += static_cast<T>(seed * alpha * (t / p) *
                                  ((static_cast<double>(q) * dbeta) - outv) / s);
        }
        break;
      }
      case Op::WeightedSum: {
        for (std::size_t k = 0; k < nd.aux_n; ++k) {
          int p = aux_[nd.aux_off + k];
          grad_ptr(p)[0] += static_cast<T>(daux_[nd.i0 + k] * static_cast<double>(g[0]));
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<T> vals_, grads_;
  std::vector<int> aux_;
  std::vector<double> daux_;
};

}  // namespace cloudtomo
