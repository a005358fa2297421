// SPDX-License-Identifier: Apache-2.0
//
// The double-saturating power law E = a*(C+d)^(-b) + c, fitted to
// (compute, error) observations by multi-start Nelder-Mead over an
// exponential reparameterization, plus Pareto-frontier extraction.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vtsk/common.hpp"

namespace vtsk {

struct RunRecord {
  std::string model_name;
  std::int64_t dataset_size = 0;  // images
  std::int64_t steps = 0;
  std::int64_t images_seen = 0;
  double compute = 0.0;  // exaFLOPs proxy, or user-supplied core-days
  std::string metric_name;
  double error_rate = 0.0;

  void validate() const {
    if (compute <= 0.0) throw ValueError("run compute must be positive");
    if (error_rate < 0.0 || error_rate > 1.0)
      throw ValueError("error rate must lie in [0, 1], got " + std::to_string(error_rate));
  }
};

struct LawParams {
  double a = 0.0;  // amplitude
  double b = 0.0;  // exponent
  double c = 0.0;  // irreducible error
  double d = 0.0;  // compute offset
};

/// E = a*(C+d)^(-b) + c. Monotone nonincreasing in C, with limit c.
inline double predict(const LawParams& law, double compute) {
  if (compute < 0.0) throw ValueError("compute must be >= 0");
  return law.a * std::pow(compute + law.d, -law.b) + law.c;
}

// ---------------------------------------------------------------------------
// Pareto frontier: drop every record that some other record beats or ties on
// both axes while beating it on at least one. Exact duplicates survive.
// ---------------------------------------------------------------------------

inline std::vector<RunRecord> pareto_frontier(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ValueError("pareto_frontier of an empty set");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (records[x].compute != records[y].compute) return records[x].compute < records[y].compute;
    if (records[x].error_rate != records[y].error_rate)
      return records[x].error_rate < records[y].error_rate;
    return x < y;
  });
  std::vector<RunRecord> out;
  double best_error = HUGE_VAL;
  double best_compute = HUGE_VAL;
  for (std::size_t idx : order) {
    const RunRecord& r = records[idx];
    if (r.error_rate < best_error) {
      best_error = r.error_rate;
      best_compute = r.compute;
      out.push_back(r);
    } else if (r.error_rate == best_error && r.compute == best_compute) {
      out.push_back(r);  // exact duplicate of the current keeper
    }
  }
  return out;
}

/// (compute, error) pairs for fitting. Exact duplicates (as left by
/// pareto_frontier) collapse to one point.
inline std::vector<std::pair<double, double>> to_fit_points(
    const std::vector<RunRecord>& records) {
  std::vector<std::pair<double, double>> pts;
  for (const RunRecord& r : records) pts.emplace_back(r.compute, r.error_rate);
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

// ---------------------------------------------------------------------------
// Nelder-Mead simplex descent (derivative-free, deterministic)
// ---------------------------------------------------------------------------

namespace detail {

struct SimplexResult {
  std::vector<double> x;
  double value = HUGE_VAL;
  bool converged = false;
};

inline SimplexResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> start, double step, int max_iter,
                                 double tol) {
  const std::size_t n = start.size();
  std::vector<std::vector<double>> xs(n + 1, start);
  std::vector<double> fs(n + 1);
  for (std::size_t i = 0; i < n; ++i) xs[i + 1][i] += step;
  for (std::size_t i = 0; i <= n; ++i) fs[i] = f(xs[i]);

  SimplexResult best;
  auto order = [&] {
    std::vector<std::size_t> idx(n + 1);
    for (std::size_t i = 0; i <= n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
    std::vector<std::vector<double>> xs2;
    std::vector<double> fs2;
    for (std::size_t i : idx) {
      xs2.push_back(xs[i]);
      fs2.push_back(fs[i]);
    }
    xs.swap(xs2);
    fs.swap(fs2);
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    order();
    if (std::abs(fs[n] - fs[0]) <= tol * (std::abs(fs[0]) + tol)) {
      best.converged = true;
      break;
    }
    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) centroid[j] += xs[i][j] / static_cast<double>(n);

    auto blend = [&](double coef) {
      std::vector<double> p(n);
      for (std::size_t j = 0; j < n; ++j) p[j] = centroid[j] + coef * (xs[n][j] - centroid[j]);
      return p;
    };

    const std::vector<double> reflected = blend(-1.0);
    const double fr = f(reflected);
    if (fr < fs[0]) {
      const std::vector<double> expanded = blend(-2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        xs[n] = expanded;
        fs[n] = fe;
      } else {
        xs[n] = reflected;
        fs[n] = fr;
      }
    } else if (fr < fs[n - 1]) {
      xs[n] = reflected;
      fs[n] = fr;
    } else {
      const std::vector<double> contracted = blend(fr < fs[n] ? -0.5 : 0.5);
      const double fc = f(contracted);
      if (fc < std::min(fr, fs[n])) {
        xs[n] = contracted;
        fs[n] = fc;
      } else {
        for (std::size_t i = 1; i <= n; ++i) {
          for (std::size_t j = 0; j < n; ++j) xs[i][j] = xs[0][j] + 0.5 * (xs[i][j] - xs[0][j]);
          fs[i] = f(xs[i]);
        }
      }
    }
  }
  order();
  best.x = xs[0];
  best.value = fs[0];
  return best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Law fitting
// ---------------------------------------------------------------------------

struct FitOptions {
  bool log_space = true;        // residuals in log-error space
  bool frontier_only = false;   // used by callers that pass full run sets
  std::uint64_t seed = 0;       // seeds the optional random restarts
  int extra_restarts = 0;
  int max_iterations = 5000;
  double tolerance = 1e-15;
};

struct FitReport {
  LawParams params;
  double rms_residual = HUGE_VAL;
  int n_points = 0;
  int restarts_used = 0;
  bool converged = false;
};

namespace detail {

constexpr double kLogZero = -34.0;  // exp(-34) ~ 1.7e-15: numerically "off"

inline double law_objective(const std::vector<std::pair<double, double>>& pts,
                            const std::vector<double>& theta, bool log_space) {
  LawParams law{std::exp(theta[0]), std::exp(theta[1]), std::exp(theta[2]), std::exp(theta[3])};
  double acc = 0.0;
  for (const auto& [compute, error] : pts) {
    const double pred = law.a * std::pow(compute + law.d, -law.b) + law.c;
    if (!std::isfinite(pred)) return HUGE_VAL;
    if (log_space) {
      const double r = std::log(std::max(error, 1e-12)) - std::log(std::max(pred, 1e-300));
      acc += r * r;
    } else {
      const double r = error - pred;
      acc += r * r;
    }
  }
  return acc / static_cast<double>(pts.size());
}

inline std::vector<double> clamp_theta(std::vector<double> theta) {
  for (auto& t : theta) t = std::clamp(t, kLogZero, 40.0);
  return theta;
}

// Closed-form log-log regression for E = a*C^(-b): optimal for the nested
// model under the log-space objective.
inline std::pair<double, double> loglog_regression(
    const std::vector<std::pair<double, double>>& pts) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(pts.size());
  for (const auto& [compute, error] : pts) {
    const double x = std::log(compute);
    const double y = std::log(std::max(error, 1e-12));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  const double slope = denom != 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
  const double intercept = (sy - slope * sx) / n;
  return {std::exp(intercept), -slope};  // (a, b)
}

}  // namespace detail

/// Nested pure power law (c = d = 0).
inline FitReport fit_nested_power_law(const std::vector<std::pair<double, double>>& points,
                                      const FitOptions& options = {}) {
  if (points.size() < 2) throw ValueError("nested fit needs at least 2 points");
  auto [a0, b0] = detail::loglog_regression(points);
  const double tiny = std::exp(detail::kLogZero);
  std::vector<double> theta = {std::log(std::max(a0, 1e-12)),
                               std::log(std::clamp(b0, 1e-9, 1e9)), detail::kLogZero,
                               detail::kLogZero};
  auto objective2 = [&](const std::vector<double>& t2) {
    return detail::law_objective(points, detail::clamp_theta({t2[0], t2[1], detail::kLogZero,
                                                              detail::kLogZero}),
                                 options.log_space);
  };
  auto r = detail::nelder_mead(objective2, {theta[0], theta[1]}, 0.25, options.max_iterations,
                               options.tolerance);
  FitReport report;
  report.params = {std::exp(r.x[0]), std::exp(r.x[1]), tiny, tiny};
  report.params.c = 0.0;
  report.params.d = 0.0;
  report.rms_residual =
      std::sqrt(detail::law_objective(points, {r.x[0], r.x[1], detail::kLogZero,
                                               detail::kLogZero},
                                      options.log_space));
  report.n_points = static_cast<int>(points.size());
  report.restarts_used = 1;
  report.converged = r.converged;
  return report;
}

/// Fits E = a*(C+d)^(-b) + c with positivity via exponential
/// reparameterization. Multi-start: a b/c/d grid plus the nested power-law
/// solution; deterministic given options.seed.
inline FitReport fit_law(const std::vector<std::pair<double, double>>& points,
                         const FitOptions& options = {}) {
  if (points.size() < 4)
    throw ValueError("fit_law needs at least 4 points, got " + std::to_string(points.size()));
  {
    std::vector<double> cs;
    for (const auto& [compute, error] : points) {
      if (compute <= 0.0) throw ValueError("fit_law compute values must be positive");
      if (error < 0.0) throw ValueError("fit_law error values must be nonnegative");
      cs.push_back(compute);
    }
    std::sort(cs.begin(), cs.end());
    if (std::adjacent_find(cs.begin(), cs.end()) != cs.end())
      throw ValueError("fit_law needs distinct compute values");
  }

  double min_error = HUGE_VAL, min_compute = HUGE_VAL;
  for (const auto& [compute, error] : points) {
    min_error = std::min(min_error, error);
    min_compute = std::min(min_compute, compute);
  }

  auto objective = [&](const std::vector<double>& theta) {
    return detail::law_objective(points, detail::clamp_theta(theta), options.log_space);
  };

  // Start list. The nested solution is always one of them, which guarantees
  // the full fit never ends worse than the nested fit.
  std::vector<std::vector<double>> starts;
  const FitReport nested = fit_nested_power_law(points, options);
  starts.push_back({std::log(std::max(nested.params.a, 1e-12)),
                    std::log(std::clamp(nested.params.b, 1e-9, 1e9)), detail::kLogZero,
                    detail::kLogZero});
  for (double b0 = 0.1; b0 <= 1.0 + 1e-12; b0 += 0.1) {
    for (double c0 : {0.0, min_error / 2.0}) {
      for (double d0 : {0.0, min_compute}) {
        // pick a to zero the mean log residual given (b0, c0, d0)
        double acc = 0.0;
        for (const auto& [compute, error] : points)
          acc += std::log(std::max(error - c0, 1e-12)) + b0 * std::log(compute + d0);
        const double a0 = std::exp(acc / static_cast<double>(points.size()));
        starts.push_back({std::log(std::max(a0, 1e-300)), std::log(b0),
                          c0 > 0.0 ? std::log(c0) : detail::kLogZero,
                          d0 > 0.0 ? std::log(d0) : detail::kLogZero});
      }
    }
  }
  Rng rng(options.seed);
  for (int i = 0; i < options.extra_restarts; ++i) {
    starts.push_back({std::log(std::max(min_error, 1e-6)) + rng.normal(),
                      std::log(0.5) + rng.normal(), detail::kLogZero + rng.uniform() * 30.0,
                      detail::kLogZero + rng.uniform() * 30.0});
  }

  // Starts refine independently (parallel-safe); the winner is picked by
  // value with index as the deterministic tie-break.
  std::vector<detail::SimplexResult> results(starts.size());
  parallel_for(starts.size(), [&](std::size_t i) {
    auto r = detail::nelder_mead(objective, starts[i], 0.25, options.max_iterations,
                                 options.tolerance);
    // polish: restart the simplex at the found point to escape collapse
    for (int polish = 0; polish < 2; ++polish) {
      auto r2 = detail::nelder_mead(objective, r.x, 0.02, options.max_iterations,
                                    options.tolerance);
      if (r2.value < r.value) r = r2;
    }
    results[i] = std::move(r);
  });
  detail::SimplexResult best = results[0];
  for (std::size_t i = 1; i < results.size(); ++i)
    if (results[i].value < best.value) best = results[i];

  const auto theta = detail::clamp_theta(best.x);
  FitReport report;
  report.params = {std::exp(theta[0]), std::exp(theta[1]), std::exp(theta[2]),
                   std::exp(theta[3])};
  if (theta[2] <= detail::kLogZero) report.params.c = 0.0;
  if (theta[3] <= detail::kLogZero) report.params.d = 0.0;
  report.rms_residual = std::sqrt(best.value);
  report.n_points = static_cast<int>(points.size());
  report.restarts_used = static_cast<int>(starts.size());
  // Degenerate (b -> 0 or a -> 0): the fitted curve has no compute dependence.
  double max_compute = 0.0;
  for (const auto& [compute, error] : points) max_compute = std::max(max_compute, compute);
  const double lo = predict(report.params, min_compute);
  const double hi = predict(report.params, max_compute);
  const bool degenerate = std::abs(lo - hi) <= 1e-9 * std::max(std::abs(lo), 1e-12);
  report.converged = best.converged && !degenerate;
  return report;
}

}  // namespace vtsk
