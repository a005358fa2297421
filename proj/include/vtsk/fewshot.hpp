// SPDX-License-Identifier: Apache-2.0
//
// Closed-form L2-regularized linear probe on frozen features: k-shot
// sampling, the normal-equations ridge solve, and argmax evaluation.

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/tensor.hpp"

namespace vtsk {

struct FeatureSet {
  Tensor X;            // [n, dim]
  std::vector<int> y;  // n labels in [0, class_count)
  int class_count = 0;

  std::int64_t n() const { return X.rank() == 2 ? X.shape[0] : 0; }
  std::int64_t dim() const { return X.rank() == 2 ? X.shape[1] : 0; }

  void validate() const {
    if (X.rank() != 2 || X.shape[0] < 1)
      throw ShapeError("features must be [n x dim] with n >= 1, got " +
                       Tensor::shape_str(X.shape));
    if (static_cast<std::int64_t>(y.size()) != X.shape[0])
      throw ShapeError("label count does not match feature rows");
    if (class_count < 1) throw ValueError("class_count must be >= 1");
    for (int label : y)
      if (label < 0 || label >= class_count)
        throw ValueError("label " + std::to_string(label) + " outside [0, " +
                         std::to_string(class_count) + ")");
  }
};

/// Row indices of a k-per-class sample, drawn uniformly without replacement.
/// Deterministic per seed; indices within a class keep their original order.
inline std::vector<std::int64_t> kshot_indices(const FeatureSet& set, int k,
                                               std::uint64_t seed) {
  set.validate();
  if (k < 1) throw ValueError("k must be >= 1");
  std::vector<std::vector<std::int64_t>> by_class(set.class_count);
  for (std::int64_t i = 0; i < set.n(); ++i) by_class[set.y[i]].push_back(i);

  Rng rng(seed);
  std::vector<std::int64_t> chosen;
  for (int cls = 0; cls < set.class_count; ++cls) {
    auto& pool = by_class[cls];
    if (static_cast<int>(pool.size()) < k)
      throw DataError("class " + std::to_string(cls) + " has only " +
                      std::to_string(pool.size()) + " examples, need " + std::to_string(k));
    // partial Fisher-Yates: the first k entries become the sample
    for (int i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    std::sort(pool.begin(), pool.begin() + k);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + k);
  }
  return chosen;
}

inline FeatureSet select_rows(const FeatureSet& set, const std::vector<std::int64_t>& rows) {
  FeatureSet out;
  out.class_count = set.class_count;
  out.X = Tensor::zeros({std::max<std::int64_t>(1, static_cast<std::int64_t>(rows.size())),
                         set.dim()});
  if (rows.empty()) throw ValueError("select_rows needs at least one row");
  out.y.reserve(rows.size());
  const std::int64_t dim = set.dim();
  for (std::size_t row = 0; row < rows.size(); ++row) {
    std::copy(set.X.data.begin() + rows[row] * dim, set.X.data.begin() + (rows[row] + 1) * dim,
              out.X.data.begin() + static_cast<std::int64_t>(row) * dim);
    out.y.push_back(set.y[rows[row]]);
  }
  return out;
}

/// Exactly k examples per class as a new FeatureSet.
inline FeatureSet kshot_sample(const FeatureSet& set, int k, std::uint64_t seed) {
  return select_rows(set, kshot_indices(set, k, seed));
}

struct KShotSplit {
  FeatureSet train;
  FeatureSet rest;     // empty X when every row was sampled
  bool has_rest = false;
};

/// k-shot train rows plus the held-out remainder.
inline KShotSplit kshot_split(const FeatureSet& set, int k, std::uint64_t seed) {
  const auto chosen = kshot_indices(set, k, seed);
  std::vector<bool> taken(set.n(), false);
  for (auto i : chosen) taken[i] = true;
  std::vector<std::int64_t> rest;
  for (std::int64_t i = 0; i < set.n(); ++i)
    if (!taken[i]) rest.push_back(i);
  KShotSplit split;
  split.train = select_rows(set, chosen);
  split.has_rest = !rest.empty();
  if (split.has_rest) split.rest = select_rows(set, rest);
  return split;
}

inline Tensor one_hot(const std::vector<int>& labels, int classes) {
  Tensor t = Tensor::zeros({static_cast<std::int64_t>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw ValueError("label out of range: " + std::to_string(labels[i]));
    t.data[i * classes + labels[i]] = 1.0;
  }
  return t;
}

namespace detail {

// Cholesky solve of the SPD system A W = B, A [n x n], B [n x m]. A is
// consumed as the factor workspace.
inline Tensor cholesky_solve(Tensor A, Tensor B) {
  const std::int64_t n = A.shape[0], m = B.shape[1];
  double scale = 0.0;
  for (std::int64_t j = 0; j < n; ++j) scale = std::max(scale, std::abs(A.data[j * n + j]));
  const double pivot_floor = scale * 1e-13;
  for (std::int64_t j = 0; j < n; ++j) {
    double diag = A.data[j * n + j];
    for (std::int64_t k = 0; k < j; ++k) diag -= A.data[j * n + k] * A.data[j * n + k];
    if (!(diag > pivot_floor))
      throw ValueError("singular normal equations; use lambda > 0 to regularize");
    const double root = std::sqrt(diag);
    A.data[j * n + j] = root;
    for (std::int64_t i = j + 1; i < n; ++i) {
      double v = A.data[i * n + j];
      for (std::int64_t k = 0; k < j; ++k) v -= A.data[i * n + k] * A.data[j * n + k];
      A.data[i * n + j] = v / root;
    }
  }
  // forward then backward substitution, all right-hand sides at once
  Tensor W = B;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t col = 0; col < m; ++col) {
      double v = W.data[i * m + col];
      for (std::int64_t k = 0; k < i; ++k) v -= A.data[i * n + k] * W.data[k * m + col];
      W.data[i * m + col] = v / A.data[i * n + i];
    }
  for (std::int64_t i = n - 1; i >= 0; --i)
    for (std::int64_t col = 0; col < m; ++col) {
      double v = W.data[i * m + col];
      for (std::int64_t k = i + 1; k < n; ++k) v -= A.data[k * n + i] * W.data[k * m + col];
      W.data[i * m + col] = v / A.data[i * n + i];
    }
  return W;
}

}  // namespace detail

/// W = (X^T X + lambda I)^(-1) X^T Y via Cholesky on the normal equations.
inline Tensor solve_ridge(const Tensor& X, const Tensor& Y, double lambda) {
  if (X.rank() != 2 || Y.rank() != 2 || X.shape[0] != Y.shape[0])
    throw ShapeError("solve_ridge wants X [n x dim], Y [n x classes] with matching n, got " +
                     Tensor::shape_str(X.shape) + " and " + Tensor::shape_str(Y.shape));
  if (lambda < 0.0) throw ValueError("lambda must be >= 0");
  const std::int64_t n = X.shape[0], dim = X.shape[1], classes = Y.shape[1];
  Tensor gram = Tensor::zeros({dim, dim});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < dim; ++i) {
      const double xi = X.data[r * dim + i];
      if (xi == 0.0) continue;
      for (std::int64_t j = 0; j < dim; ++j)
        gram.data[i * dim + j] += xi * X.data[r * dim + j];
    }
  for (std::int64_t i = 0; i < dim; ++i) gram.data[i * dim + i] += lambda;
  Tensor xty = Tensor::zeros({dim, classes});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < dim; ++i) {
      const double xi = X.data[r * dim + i];
      if (xi == 0.0) continue;
      for (std::int64_t j = 0; j < classes; ++j)
        xty.data[i * classes + j] += xi * Y.data[r * classes + j];
    }
  return detail::cholesky_solve(std::move(gram), std::move(xty));
}

/// Adds a constant-one column, for the optional bias term.
inline Tensor augment_ones(const Tensor& X) {
  const std::int64_t n = X.shape[0], dim = X.shape[1];
  Tensor out = Tensor::zeros({n, dim + 1});
  for (std::int64_t r = 0; r < n; ++r) {
    std::copy(X.data.begin() + r * dim, X.data.begin() + (r + 1) * dim,
              out.data.begin() + r * (dim + 1));
    out.data[r * (dim + 1) + dim] = 1.0;
  }
  return out;
}

/// Mean argmax accuracy; ties resolve to the lowest class index. W may carry
/// one extra row for a bias term.
inline double evaluate_probe(const Tensor& W, const FeatureSet& test) {
  test.validate();
  const std::int64_t dim = test.dim(), classes = W.shape[1];
  const bool biased = W.shape[0] == dim + 1;
  if (!biased && W.shape[0] != dim)
    throw ShapeError("probe weights " + Tensor::shape_str(W.shape) +
                     " do not match features of dim " + std::to_string(dim));
  if (classes < test.class_count)
    throw ShapeError("probe has fewer columns than classes");
  std::int64_t correct = 0;
  for (std::int64_t r = 0; r < test.n(); ++r) {
    int best = 0;
    double best_score = -HUGE_VAL;
    for (std::int64_t j = 0; j < classes; ++j) {
      double s = biased ? W.data[dim * classes + j] : 0.0;
      for (std::int64_t i = 0; i < dim; ++i)
        s += test.X.data[r * dim + i] * W.data[i * classes + j];
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(j);
      }
    }
    if (best == test.y[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.n());
}

// ---------------------------------------------------------------------------
// Feature file: magic "VTSF1", u32 n, u32 dim, n*dim little-endian f32,
// then n u16 labels.
// ---------------------------------------------------------------------------

inline void save_features(const std::string& path, const FeatureSet& set) {
  set.validate();
  if (set.class_count > 65536) throw DataError("VTSF1 stores labels as u16");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write features: " + path);
  f.write("VTSF1", 5);
  const std::uint32_t n = static_cast<std::uint32_t>(set.n());
  const std::uint32_t dim = static_cast<std::uint32_t>(set.dim());
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(&dim), 4);
  for (double v : set.X.data) {
    const float x = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&x), 4);
  }
  for (int label : set.y) {
    const std::uint16_t v = static_cast<std::uint16_t>(label);
    f.write(reinterpret_cast<const char*>(&v), 2);
  }
  if (!f) throw DataError("short write on features: " + path);
}

inline FeatureSet load_features(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open features: " + path);
  char magic[5];
  f.read(magic, 5);
  if (!f || std::string(magic, 5) != "VTSF1") throw DataError("not a VTSF1 file: " + path);
  std::uint32_t n = 0, dim = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  f.read(reinterpret_cast<char*>(&dim), 4);
  if (!f || n == 0 || dim == 0) throw DataError("bad VTSF1 geometry in " + path);
  FeatureSet set;
  set.X = Tensor::zeros({n, dim});
  for (auto& v : set.X.data) {
    float x = 0.0f;
    f.read(reinterpret_cast<char*>(&x), 4);
    v = static_cast<double>(x);
  }
  set.y.resize(n);
  int max_label = 0;
  for (auto& label : set.y) {
    std::uint16_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 2);
    label = v;
    max_label = std::max(max_label, label);
  }
  if (!f) throw DataError("truncated VTSF1 file: " + path);
  set.class_count = max_label + 1;
  return set;
}

}  // namespace vtsk
