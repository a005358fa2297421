// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with reverse-mode differentiation on an explicit tape.
// The op set is exactly what a small pre-LN ViT needs; accumulation order is
// fixed everywhere so repeated runs are bit-identical.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "vtsk/common.hpp"

namespace vtsk {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> s, std::vector<double> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    for (auto d_ : shape)
      if (d_ < 1) throw ShapeError("tensor dimensions must be >= 1, got " + shape_str(shape));
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
  }

  static Tensor zeros(std::vector<std::int64_t> s) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }

  static Tensor full(std::vector<std::int64_t> s, double v) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor& set_requires_grad(bool rg) {
    requires_grad = rg;
    return *this;
  }
};

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Gradients keyed by tape node id, produced by Tape::backward.
class Gradients {
 public:
  explicit Gradients(std::size_t n) : grads_(n), present_(n, false) {}

  bool has(Var v) const { return v.id >= 0 && v.id < static_cast<int>(grads_.size()) && present_[v.id]; }

  const Tensor& at(Var v) const {
    if (!has(v)) throw ValueError("no gradient recorded for node " + std::to_string(v.id));
    return grads_[v.id];
  }

  Tensor& slot(int id, const std::vector<std::int64_t>& shape) {
    if (!present_[id]) {
      grads_[id] = Tensor::zeros(shape);
      present_[id] = true;
    }
    return grads_[id];
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; (i,k,j) loop order, k ascending per output cell.
inline void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + l * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_nt_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void mm_tn_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
  for (std::int64_t l = 0; l < k; ++l) {
    const double* arow = a + l * m;
    const double* brow = b + l * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape() = default;
  explicit Tape(std::size_t reserve_nodes) { nodes_.reserve(reserve_nodes); }

  Var leaf(Tensor t) {
    const bool rg = t.requires_grad;
    return push(std::move(t), rg, {}, nullptr);
  }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false, {}, nullptr);
  }

  const Tensor& value(Var v) const { return node(v).value; }

  std::size_t size() const { return nodes_.size(); }

  // -- ops -------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() < 2 || B.rank() < 2)
      throw ShapeError("matmul needs rank >= 2 operands, got " + Tensor::shape_str(A.shape) +
                       " and " + Tensor::shape_str(B.shape));
    const bool shared_rhs = B.rank() == 2 && A.rank() >= 2;
    if (!shared_rhs) {
      // identical leading dims required
      if (A.rank() != B.rank() ||
          !std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin()))
        throw ShapeError("matmul batch dims disagree: " + Tensor::shape_str(A.shape) + " vs " +
                         Tensor::shape_str(B.shape));
    }
    const std::int64_t m = A.shape[A.rank() - 2];
    const std::int64_t k = A.shape[A.rank() - 1];
    const std::int64_t kb = B.shape[B.rank() - 2];
    const std::int64_t n = B.shape[B.rank() - 1];
    if (k != kb)
      throw ShapeError("matmul inner dims disagree: " + Tensor::shape_str(A.shape) + " x " +
                       Tensor::shape_str(B.shape));
    std::vector<std::int64_t> out_shape(A.shape.begin(), A.shape.end() - 1);
    out_shape.push_back(n);
    Tensor C = Tensor::zeros(out_shape);
    const std::int64_t batch = A.numel() / (m * k);
    for (std::int64_t s = 0; s < batch; ++s) {
      const double* ap = A.data.data() + s * m * k;
      const double* bp = shared_rhs ? B.data.data() : B.data.data() + s * k * n;
      detail::mm_acc(ap, bp, C.data.data() + s * m * n, m, k, n);
    }
    return push(std::move(C), needs_grad({a, b}), {a.id, b.id},
                [m, k, n, batch, shared_rhs](const Tape& t, const Node& nd, const Tensor& g,
                                             Gradients& gr) {
                  const Tensor& A = t.nodes_[nd.inputs[0]].value;
                  const Tensor& B = t.nodes_[nd.inputs[1]].value;
                  if (t.nodes_[nd.inputs[0]].requires_grad) {
                    Tensor& ga = gr.slot(nd.inputs[0], A.shape);
                    for (std::int64_t s = 0; s < batch; ++s) {
                      const double* bp = shared_rhs ? B.data.data() : B.data.data() + s * k * n;
                      detail::mm_nt_acc(g.data.data() + s * m * n, bp,
                                        ga.data.data() + s * m * k, m, n, k);
                    }
                  }
                  if (t.nodes_[nd.inputs[1]].requires_grad) {
                    Tensor& gb = gr.slot(nd.inputs[1], B.shape);
                    for (std::int64_t s = 0; s < batch; ++s) {
                      double* gbp = shared_rhs ? gb.data.data() : gb.data.data() + s * k * n;
                      detail::mm_tn_acc(A.data.data() + s * m * k, g.data.data() + s * m * n, gbp,
                                        k, m, n);
                    }
                  }
                });
  }

  /// Swap the last two axes.
  Var transpose(Var x) {
    const int r = value(x).rank();
    if (r < 2) throw ShapeError("transpose needs rank >= 2, got " + Tensor::shape_str(value(x).shape));
    std::vector<int> perm(r);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[r - 2], perm[r - 1]);
    return permute(x, perm);
  }

  Var permute(Var x, const std::vector<int>& perm) {
    const Tensor& X = value(x);
    if (static_cast<int>(perm.size()) != X.rank())
      throw ShapeError("permute axes rank mismatch for " + Tensor::shape_str(X.shape));
    Tensor out = permute_data(X, perm);
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return push(std::move(out), needs_grad({x}), {x.id},
                [inv](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  Tensor back = permute_data(g, inv);
                  t.accumulate(gr, nd.inputs[0], back);
                });
  }

  Var reshape(Var x, std::vector<std::int64_t> shape) {
    const Tensor& X = value(x);
    if (Tensor::numel_of(shape) != X.numel())
      throw ShapeError("reshape from " + Tensor::shape_str(X.shape) + " to " +
                       Tensor::shape_str(shape) + " changes element count");
    Tensor out(shape, X.data);
    auto old_shape = X.shape;
    return push(std::move(out), needs_grad({x}), {x.id},
                [old_shape](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  Tensor back(old_shape, g.data);
                  t.accumulate(gr, nd.inputs[0], back);
                });
  }

  Var slice(Var x, int axis, std::int64_t start, std::int64_t len) {
    const Tensor& X = value(x);
    check_axis(X, axis);
    if (start < 0 || len < 1 || start + len > X.shape[axis])
      throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                       ") out of range for axis " + std::to_string(axis) + " of " +
                       Tensor::shape_str(X.shape));
    auto out_shape = X.shape;
    out_shape[axis] = len;
    Tensor out = Tensor::zeros(out_shape);
    take_block(X, out, axis, start);
    return push(std::move(out), needs_grad({x}), {x.id},
                [axis, start](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  Tensor& gx = gr.slot(nd.inputs[0], X.shape);
                  accumulate_block(gx, g, axis, start);
                });
  }

  Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of zero tensors");
    const Tensor& first = value(xs[0]);
    check_axis(first, axis);
    auto out_shape = first.shape;
    std::int64_t total = 0;
    for (Var v : xs) {
      const Tensor& X = value(v);
      if (X.rank() != first.rank())
        throw ShapeError("concat rank mismatch: " + Tensor::shape_str(X.shape) + " vs " +
                         Tensor::shape_str(first.shape));
      for (int d = 0; d < X.rank(); ++d)
        if (d != axis && X.shape[d] != first.shape[d])
          throw ShapeError("concat off-axis dims disagree: " + Tensor::shape_str(X.shape) +
                           " vs " + Tensor::shape_str(first.shape));
      total += X.shape[axis];
    }
    out_shape[axis] = total;
    Tensor out = Tensor::zeros(out_shape);
    std::int64_t offset = 0;
    std::vector<int> ids;
    std::vector<std::int64_t> offsets;
    bool rg = false;
    for (Var v : xs) {
      const Tensor& X = value(v);
      place_block(out, X, axis, offset);
      ids.push_back(v.id);
      offsets.push_back(offset);
      offset += X.shape[axis];
      rg = rg || node(v).requires_grad;
    }
    return push(std::move(out), rg, ids,
                [axis, offsets](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
                    const int in = nd.inputs[i];
                    if (!t.nodes_[in].requires_grad) continue;
                    const Tensor& X = t.nodes_[in].value;
                    Tensor piece = Tensor::zeros(X.shape);
                    take_block(g, piece, axis, offsets[i]);
                    t.accumulate(gr, in, piece);
                  }
                });
  }

  /// Prepend a batch axis of size n by repetition: [dims...] -> [n, dims...].
  Var tile_batch(Var x, std::int64_t n) {
    const Tensor& X = value(x);
    if (n < 1) throw ShapeError("tile_batch count must be >= 1");
    std::vector<std::int64_t> out_shape;
    out_shape.push_back(n);
    out_shape.insert(out_shape.end(), X.shape.begin(), X.shape.end());
    Tensor out = Tensor::zeros(out_shape);
    const std::size_t block = X.data.size();
    for (std::int64_t i = 0; i < n; ++i)
      std::copy(X.data.begin(), X.data.end(), out.data.begin() + i * block);
    return push(std::move(out), needs_grad({x}), {x.id},
                [n, block](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  Tensor& gx = gr.slot(nd.inputs[0], X.shape);
                  for (std::int64_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < block; ++j) gx.data[j] += g.data[i * block + j];
                });
  }

  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw ShapeError("add shape mismatch: " + Tensor::shape_str(A.shape) + " vs " +
                       Tensor::shape_str(B.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
    return push(std::move(out), needs_grad({a, b}), {a.id, b.id},
                [](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  t.accumulate(gr, nd.inputs[0], g);
                  t.accumulate(gr, nd.inputs[1], g);
                });
  }

  /// x[..., j] + b[j]; the broadcast needed for bias terms.
  Var add_bias(Var x, Var b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    if (B.rank() != 1 || B.shape[0] != X.shape[X.rank() - 1])
      throw ShapeError("add_bias wants bias " + Tensor::shape_str({X.shape[X.rank() - 1]}) +
                       ", got " + Tensor::shape_str(B.shape));
    Tensor out = X;
    const std::int64_t w = B.shape[0];
    const std::int64_t rows = X.numel() / w;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < w; ++j) out.data[r * w + j] += B.data[j];
    return push(std::move(out), needs_grad({x, b}), {x.id, b.id},
                [w, rows](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  t.accumulate(gr, nd.inputs[0], g);
                  if (t.nodes_[nd.inputs[1]].requires_grad) {
                    Tensor& gb = gr.slot(nd.inputs[1], {w});
                    for (std::int64_t r = 0; r < rows; ++r)
                      for (std::int64_t j = 0; j < w; ++j) gb.data[j] += g.data[r * w + j];
                  }
                });
  }

  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw ShapeError("mul shape mismatch: " + Tensor::shape_str(A.shape) + " vs " +
                       Tensor::shape_str(B.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
    return push(std::move(out), needs_grad({a, b}), {a.id, b.id},
                [](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& A = t.nodes_[nd.inputs[0]].value;
                  const Tensor& B = t.nodes_[nd.inputs[1]].value;
                  if (t.nodes_[nd.inputs[0]].requires_grad) {
                    Tensor& ga = gr.slot(nd.inputs[0], A.shape);
                    for (std::size_t i = 0; i < ga.data.size(); ++i)
                      ga.data[i] += g.data[i] * B.data[i];
                  }
                  if (t.nodes_[nd.inputs[1]].requires_grad) {
                    Tensor& gb = gr.slot(nd.inputs[1], B.shape);
                    for (std::size_t i = 0; i < gb.data.size(); ++i)
                      gb.data[i] += g.data[i] * A.data[i];
                  }
                });
  }

  Var scale(Var x, double c) {
    Tensor out = value(x);
    for (auto& v : out.data) v *= c;
    return push(std::move(out), needs_grad({x}), {x.id},
                [c](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  if (!t.nodes_[nd.inputs[0]].requires_grad) return;
                  Tensor& gx = gr.slot(nd.inputs[0], t.nodes_[nd.inputs[0]].value.shape);
                  for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += c * g.data[i];
                });
  }

  Var sum_axis(Var x, int axis) { return reduce_axis(x, axis, /*mean=*/false); }
  Var mean_axis(Var x, int axis) { return reduce_axis(x, axis, /*mean=*/true); }

  Var sum_all(Var x) {
    const Tensor& X = value(x);
    double acc = 0.0;
    for (double v : X.data) acc += v;
    return push(Tensor::scalar(acc), needs_grad({x}), {x.id},
                [](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  Tensor& gx = gr.slot(nd.inputs[0], X.shape);
                  for (auto& v : gx.data) v += g.data[0];
                });
  }

  Var mean_all(Var x) {
    const double n = static_cast<double>(value(x).numel());
    return scale(sum_all(x), 1.0 / n);
  }

  /// Numerically stable softmax along `axis` (max subtraction).
  Var softmax(Var x, int axis) {
    const Tensor& X = value(x);
    check_axis(X, axis);
    Tensor out = X;
    const auto [outer, n, inner] = axis_split(X.shape, axis);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * n * inner + i;
        double mx = -HUGE_VAL;
        for (std::int64_t a = 0; a < n; ++a) mx = std::max(mx, X.data[base + a * inner]);
        double z = 0.0;
        for (std::int64_t a = 0; a < n; ++a) {
          const double e = std::exp(X.data[base + a * inner] - mx);
          out.data[base + a * inner] = e;
          z += e;
        }
        for (std::int64_t a = 0; a < n; ++a) out.data[base + a * inner] /= z;
      }
    }
    return push(std::move(out), needs_grad({x}), {x.id},
                [axis](const Tape&, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& Y = nd.value;
                  Tensor& gx = gr.slot(nd.inputs[0], Y.shape);
                  const auto [outer, n, inner] = axis_split(Y.shape, axis);
                  for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t i = 0; i < inner; ++i) {
                      const std::int64_t base = o * n * inner + i;
                      double dot = 0.0;
                      for (std::int64_t a = 0; a < n; ++a)
                        dot += g.data[base + a * inner] * Y.data[base + a * inner];
                      for (std::int64_t a = 0; a < n; ++a)
                        gx.data[base + a * inner] +=
                            Y.data[base + a * inner] * (g.data[base + a * inner] - dot);
                    }
                  }
                });
  }

  /// Layer norm over the last axis; gain/bias are 1-D of that width.
  Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gain);
    const Tensor& B = value(bias);
    const std::int64_t w = X.shape[X.rank() - 1];
    if (G.rank() != 1 || G.shape[0] != w || B.rank() != 1 || B.shape[0] != w)
      throw ShapeError("layer_norm gain/bias must be " + Tensor::shape_str({w}) + ", got " +
                       Tensor::shape_str(G.shape) + " and " + Tensor::shape_str(B.shape));
    const std::int64_t rows = X.numel() / w;
    Tensor out = X;
    std::vector<double> inv_std(rows), mean(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = X.data.data() + r * w;
      double mu = 0.0;
      for (std::int64_t j = 0; j < w; ++j) mu += xr[j];
      mu /= static_cast<double>(w);
      double var = 0.0;
      for (std::int64_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<double>(w);
      const double is = 1.0 / std::sqrt(var + eps);
      mean[r] = mu;
      inv_std[r] = is;
      double* yr = out.data.data() + r * w;
      for (std::int64_t j = 0; j < w; ++j) yr[j] = (xr[j] - mu) * is * G.data[j] + B.data[j];
    }
    return push(std::move(out), needs_grad({x, gain, bias}), {x.id, gain.id, bias.id},
                [w, rows, mean, inv_std](const Tape& t, const Node& nd, const Tensor& g,
                                         Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  const Tensor& G = t.nodes_[nd.inputs[1]].value;
                  const bool need_x = t.nodes_[nd.inputs[0]].requires_grad;
                  const bool need_g = t.nodes_[nd.inputs[1]].requires_grad;
                  const bool need_b = t.nodes_[nd.inputs[2]].requires_grad;
                  Tensor* gx = need_x ? &gr.slot(nd.inputs[0], X.shape) : nullptr;
                  Tensor* gg = need_g ? &gr.slot(nd.inputs[1], G.shape) : nullptr;
                  Tensor* gb = need_b ? &gr.slot(nd.inputs[2], G.shape) : nullptr;
                  const double n = static_cast<double>(w);
                  for (std::int64_t r = 0; r < rows; ++r) {
                    const double* xr = X.data.data() + r * w;
                    const double* go = g.data.data() + r * w;
                    const double mu = mean[r], is = inv_std[r];
                    if (need_g || need_b) {
                      for (std::int64_t j = 0; j < w; ++j) {
                        const double xhat = (xr[j] - mu) * is;
                        if (gg) gg->data[j] += go[j] * xhat;
                        if (gb) gb->data[j] += go[j];
                      }
                    }
                    if (need_x) {
                      double s1 = 0.0, s2 = 0.0;  // mean(dyhat), mean(dyhat*xhat)
                      for (std::int64_t j = 0; j < w; ++j) {
                        const double dyhat = go[j] * G.data[j];
                        const double xhat = (xr[j] - mu) * is;
                        s1 += dyhat;
                        s2 += dyhat * xhat;
                      }
                      s1 /= n;
                      s2 /= n;
                      for (std::int64_t j = 0; j < w; ++j) {
                        const double dyhat = go[j] * G.data[j];
                        const double xhat = (xr[j] - mu) * is;
                        gx->data[r * w + j] += is * (dyhat - s1 - xhat * s2);
                      }
                    }
                  }
                });
  }

  /// Exact Gaussian-CDF GELU: x * Phi(x).
  Var gelu(Var x) {
    const Tensor& X = value(x);
    Tensor out = X;
    for (auto& v : out.data) v = v * norm_cdf(v);
    return push(std::move(out), needs_grad({x}), {x.id},
                [](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  Tensor& gx = gr.slot(nd.inputs[0], X.shape);
                  for (std::size_t i = 0; i < gx.data.size(); ++i) {
                    const double v = X.data[i];
                    gx.data[i] += g.data[i] * (norm_cdf(v) + v * norm_pdf(v));
                  }
                });
  }

  /// Mean softmax cross-entropy over the batch; labels are class indices.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor& Z = value(logits);
    if (Z.rank() != 2)
      throw ShapeError("softmax_cross_entropy wants [batch x classes] logits, got " +
                       Tensor::shape_str(Z.shape));
    const std::int64_t b = Z.shape[0], c = Z.shape[1];
    if (static_cast<std::int64_t>(labels.size()) != b)
      throw ShapeError("label count " + std::to_string(labels.size()) + " != batch " +
                       std::to_string(b));
    for (int y : labels)
      if (y < 0 || y >= c) throw ValueError("label out of range: " + std::to_string(y));
    double loss = 0.0;
    Tensor probs = Z;
    for (std::int64_t i = 0; i < b; ++i) {
      const double* zr = Z.data.data() + i * c;
      double mx = -HUGE_VAL;
      for (std::int64_t j = 0; j < c; ++j) mx = std::max(mx, zr[j]);
      double z = 0.0;
      for (std::int64_t j = 0; j < c; ++j) z += std::exp(zr[j] - mx);
      const double lse = mx + std::log(z);
      loss += lse - zr[labels[i]];
      for (std::int64_t j = 0; j < c; ++j) probs.data[i * c + j] = std::exp(zr[j] - lse);
    }
    loss /= static_cast<double>(b);
    auto labels_copy = labels;
    return push(Tensor::scalar(loss), needs_grad({logits}), {logits.id},
                [probs, labels_copy, b, c](const Tape&, const Node& nd, const Tensor& g,
                                           Gradients& gr) {
                  Tensor& gz = gr.slot(nd.inputs[0], {b, c});
                  const double go = g.data[0] / static_cast<double>(b);
                  for (std::int64_t i = 0; i < b; ++i)
                    for (std::int64_t j = 0; j < c; ++j)
                      gz.data[i * c + j] +=
                          go * (probs.data[i * c + j] - (labels_copy[i] == j ? 1.0 : 0.0));
                });
  }

  /// Mean elementwise sigmoid cross-entropy against {0,1} targets.
  Var sigmoid_cross_entropy(Var logits, const Tensor& targets) {
    const Tensor& Z = value(logits);
    if (!Z.same_shape(targets))
      throw ShapeError("sigmoid_cross_entropy shape mismatch: " + Tensor::shape_str(Z.shape) +
                       " vs " + Tensor::shape_str(targets.shape));
    const double n = static_cast<double>(Z.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < Z.data.size(); ++i) {
      const double z = Z.data[i], t = targets.data[i];
      // max(z,0) - z*t + log(1 + exp(-|z|))
      loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= n;
    Tensor tcopy = targets;
    return push(Tensor::scalar(loss), needs_grad({logits}), {logits.id},
                [tcopy, n](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& Z = t.nodes_[nd.inputs[0]].value;
                  Tensor& gz = gr.slot(nd.inputs[0], Z.shape);
                  const double go = g.data[0] / n;
                  for (std::size_t i = 0; i < gz.data.size(); ++i) {
                    const double sig = 1.0 / (1.0 + std::exp(-Z.data[i]));
                    gz.data[i] += go * (sig - tcopy.data[i]);
                  }
                });
  }

  // -- reverse pass ------------------------------------------------------

  /// Gradient of a scalar loss w.r.t. every requires-grad node, walking the
  /// tape once in reverse. Accumulation order is fixed by construction.
  Gradients backward(Var loss) const {
    if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
      throw ValueError("loss is not on this tape");
    const Tensor& L = value(loss);
    if (L.numel() != 1)
      throw ValueError("backward needs a scalar loss, got " + Tensor::shape_str(L.shape));
    Gradients grads(nodes_.size());
    grads.slot(loss.id, L.shape).data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      const Node& nd = nodes_[i];
      if (!nd.requires_grad || !nd.backward || !grads.has(Var{i})) continue;
      nd.backward(*this, nd, grads.at(Var{i}), grads);
    }
    return grads;
  }

 private:
  struct Node;
  using BackwardFn = std::function<void(const Tape&, const Node&, const Tensor&, Gradients&)>;

  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw ValueError("invalid tape handle");
    return nodes_[v.id];
  }

  bool needs_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (node(v).requires_grad) return true;
    return false;
  }

  Var push(Tensor value, bool requires_grad, std::vector<int> inputs, BackwardFn fn) {
    Node nd;
    nd.value = std::move(value);
    nd.requires_grad = requires_grad;
    nd.inputs = std::move(inputs);
    if (requires_grad) nd.backward = std::move(fn);
    nodes_.push_back(std::move(nd));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  void accumulate(Gradients& gr, int id, const Tensor& g) const {
    if (!nodes_[id].requires_grad) return;
    Tensor& dst = gr.slot(id, nodes_[id].value.shape);
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
  }

  static void check_axis(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.rank())
      throw ShapeError("axis " + std::to_string(axis) + " invalid for " +
                       Tensor::shape_str(t.shape));
  }

  static std::tuple<std::int64_t, std::int64_t, std::int64_t> axis_split(
      const std::vector<std::int64_t>& shape, int axis) {
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
  }

  static Tensor permute_data(const Tensor& X, const std::vector<int>& perm) {
    std::vector<std::int64_t> out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = X.shape[perm[i]];
    Tensor out = Tensor::zeros(out_shape);
    const auto in_strides = detail::strides_of(X.shape);
    const auto out_strides = detail::strides_of(out_shape);
    const int r = X.rank();
    std::vector<std::int64_t> idx(r, 0);
    for (std::int64_t flat = 0; flat < X.numel(); ++flat) {
      std::int64_t dst = 0;
      for (int d = 0; d < r; ++d) dst += idx[perm[d]] * out_strides[d];
      out.data[dst] = X.data[flat];
      for (int d = r - 1; d >= 0; --d) {
        if (++idx[d] < X.shape[d]) break;
        idx[d] = 0;
      }
    }
    return out;
  }

  // big[..., offset : offset + piece.shape[axis], ...] += piece
  static void accumulate_block(Tensor& big, const Tensor& piece, int axis, std::int64_t offset) {
    const auto [outer, n_piece, inner] = axis_split(piece.shape, axis);
    const std::int64_t n_big = big.shape[axis];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t a = 0; a < n_piece; ++a) {
        const std::int64_t dst = (o * n_big + offset + a) * inner;
        const std::int64_t src = (o * n_piece + a) * inner;
        for (std::int64_t i = 0; i < inner; ++i) big.data[dst + i] += piece.data[src + i];
      }
  }

  static void place_block(Tensor& out, const Tensor& piece, int axis, std::int64_t offset) {
    const auto [outer, n_piece, inner] = axis_split(piece.shape, axis);
    const std::int64_t n_out = out.shape[axis];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t a = 0; a < n_piece; ++a)
        std::copy(piece.data.begin() + (o * n_piece + a) * inner,
                  piece.data.begin() + (o * n_piece + a + 1) * inner,
                  out.data.begin() + (o * n_out + offset + a) * inner);
  }

  static void take_block(const Tensor& big, Tensor& piece, int axis, std::int64_t offset) {
    const auto [outer, n_piece, inner] = axis_split(piece.shape, axis);
    const std::int64_t n_big = big.shape[axis];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t a = 0; a < n_piece; ++a)
        std::copy(big.data.begin() + (o * n_big + offset + a) * inner,
                  big.data.begin() + (o * n_big + offset + a + 1) * inner,
                  piece.data.begin() + (o * n_piece + a) * inner);
  }

  Var reduce_axis(Var x, int axis, bool mean) {
    const Tensor& X = value(x);
    check_axis(X, axis);
    const auto [outer, n, inner] = axis_split(X.shape, axis);
    std::vector<std::int64_t> out_shape;
    for (int d = 0; d < X.rank(); ++d)
      if (d != axis) out_shape.push_back(X.shape[d]);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = Tensor::zeros(out_shape);
    const double denom = mean ? static_cast<double>(n) : 1.0;
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t a = 0; a < n; ++a)
        for (std::int64_t i = 0; i < inner; ++i)
          out.data[o * inner + i] += X.data[(o * n + a) * inner + i] / denom;
    return push(std::move(out), needs_grad({x}), {x.id},
                [axis, mean](const Tape& t, const Node& nd, const Tensor& g, Gradients& gr) {
                  const Tensor& X = t.nodes_[nd.inputs[0]].value;
                  Tensor& gx = gr.slot(nd.inputs[0], X.shape);
                  const auto [outer, n, inner] = axis_split(X.shape, axis);
                  const double denom = mean ? static_cast<double>(n) : 1.0;
                  for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t a = 0; a < n; ++a)
                      for (std::int64_t i = 0; i < inner; ++i)
                        gx.data[(o * n + a) * inner + i] += g.data[o * inner + i] / denom;
                });
  }

  static double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
  static double norm_pdf(double x) {
    return std::exp(-0.5 * x * x) * 0.3989422804014326779;
  }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h for
/// a scalar-valued f built from tape ops. Returns the worst relative error,
/// with a 1e-8 absolute floor in the denominator.
template <typename F>
double grad_check(F&& f, const Tensor& x, double h) {
  if (h <= 0.0) throw ValueError("grad_check step must be positive");
  Tensor x0 = x;
  x0.requires_grad = true;

  Tape tape;
  Var leaf = tape.leaf(x0);
  Var loss = f(tape, leaf);
  if (tape.value(loss).numel() != 1)
    throw ValueError("grad_check needs a scalar-valued function");
  Gradients grads = tape.backward(loss);
  const Tensor& analytic = grads.at(leaf);

  auto eval = [&](const Tensor& point) {
    Tape t;
    Tensor p = point;
    p.requires_grad = false;
    Var v = t.leaf(p);
    return t.value(f(t, v)).data[0];
  };

  double worst = 0.0;
  Tensor probe = x;
  probe.requires_grad = false;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval(probe);
    probe.data[i] = orig - h;
    const double fm = eval(probe);
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic.data[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic.data[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace vtsk
