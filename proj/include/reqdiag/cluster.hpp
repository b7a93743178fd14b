#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "common.hpp"

namespace reqdiag {

// ----------------------------------------------------------------------------
// Standardization
// ----------------------------------------------------------------------------

struct Standardized {
  Matrix values;
  std::vector<double> mean;
  std::vector<double> stddev;  // population; 1 for zero-variance columns
};

// Per-column z-scores with population stddev. Constant columns become zeros.
inline Standardized standardize(const Matrix& m) {
  if (m.rows() < 2) throw InputError("standardize needs at least two rows");
  const std::size_t n = m.rows();
  Standardized s{Matrix(n, m.cols()), std::vector<double>(m.cols(), 0.0), std::vector<double>(m.cols(), 1.0)};
  for (std::size_t c = 0; c < m.cols(); ++c) {
    bool constant = true;
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      sum += m(r, c);
      constant = constant && m(r, c) == m(0, c);
    }
    const double mean = sum / static_cast<double>(n);
    s.mean[c] = constant ? m(0, c) : mean;
    if (constant) continue;  // values already zero
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (m(r, c) - mean) * (m(r, c) - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    s.stddev[c] = sd > 0.0 ? sd : 1.0;
    for (std::size_t r = 0; r < n; ++r) s.values(r, c) = (m(r, c) - mean) / s.stddev[c];
  }
  return s;
}

// ----------------------------------------------------------------------------
// k-means
// ----------------------------------------------------------------------------

struct KMeansParams {
  std::size_t k{3};
  std::size_t max_iterations{300};
  double tolerance{1e-6};
  std::size_t n_init{10};
  std::uint64_t seed{0};
};

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Matrix centroids;
  double inertia{0.0};
  std::vector<double> inertia_history;  // after every Lloyd iteration of the winning restart
  std::size_t iterations{0};
};

inline double inertia_of(const Matrix& points, const Matrix& centroids, std::span<const std::size_t> assign) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) total += squared_distance(points.row(i), centroids.row(assign[i]));
  return total;
}

namespace detail {

inline Matrix kmeanspp_seed(const Matrix& x, std::size_t k, KeyedRng& rng) {
  const std::size_t n = x.rows();
  Matrix c(k, x.cols());
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
  for (std::size_t j = 0; j < k; ++j) {
    chosen[pick] = true;
    std::copy_n(x.row(pick).begin(), x.cols(), c.row(j).begin());
    if (j + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.row(i), c.row(j)));
      total += d2[i];
    }
    if (total > 0.0) {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (r < d2[i]) {
          pick = i;
          break;
        }
        r -= d2[i];
      }
      // Rounding can land on an already-chosen point; take the farthest instead.
      if (d2[pick] == 0.0) pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    } else {
      // Every point coincides with a centroid: take the first unchosen one.
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      if (pick == n) pick = 0;
    }
  }
  return c;
}

inline std::size_t nearest(std::span<const double> p, const Matrix& c) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c.rows(); ++j) {
    const double d = squared_distance(p, c.row(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

// Nearest-centroid assignment; any empty cluster takes the point farthest
// from its own centroid (among clusters that can spare one).
inline void assign(const Matrix& x, Matrix& c, std::vector<std::size_t>& a) {
  const std::size_t k = c.rows();
  for (std::size_t i = 0; i < x.rows(); ++i) a[i] = nearest(x.row(i), c);
  std::vector<std::size_t> size(k, 0);
  for (auto j : a) ++size[j];
  for (std::size_t j = 0; j < k; ++j) {
    if (size[j] != 0) continue;
    std::size_t far = x.rows();
    double far_d = -1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (size[a[i]] < 2) continue;
      const double d = squared_distance(x.row(i), c.row(a[i]));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far == x.rows()) break;
    --size[a[far]];
    a[far] = j;
    size[j] = 1;
    std::copy_n(x.row(far).begin(), x.cols(), c.row(j).begin());
  }
}

inline Matrix means(const Matrix& x, std::span<const std::size_t> a, const Matrix& previous) {
  Matrix c(previous.rows(), x.cols());
  std::vector<std::size_t> size(previous.rows(), 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    ++size[a[i]];
    auto row = c.row(a[i]);
    const auto p = x.row(i);
    for (std::size_t d = 0; d < x.cols(); ++d) row[d] += p[d];
  }
  for (std::size_t j = 0; j < c.rows(); ++j) {
    if (size[j] == 0) {
      std::copy_n(previous.row(j).begin(), x.cols(), c.row(j).begin());
      continue;
    }
    for (auto& v : c.row(j)) v /= static_cast<double>(size[j]);
  }
  return c;
}

inline KMeansResult lloyd(const Matrix& x, Matrix c, const KMeansParams& params) {
  KMeansResult r;
  r.assignments.assign(x.rows(), 0);
  assign(x, c, r.assignments);
  double inertia = inertia_of(x, c, r.assignments);
  r.inertia_history.push_back(inertia);
  std::vector<std::size_t> next(x.rows(), 0);
  for (std::size_t it = 0; it < params.max_iterations; ++it) {
    Matrix nc = means(x, r.assignments, c);
    assign(x, nc, next);
    const double ni = inertia_of(x, nc, next);
    check_invariant(ni <= inertia + 1e-9 * std::max(1.0, std::abs(inertia)),
                    "k-means inertia increased between iterations");
    double shift = 0.0;
    for (std::size_t j = 0; j < c.rows(); ++j) shift = std::max(shift, std::sqrt(squared_distance(c.row(j), nc.row(j))));
    const bool changed = next != r.assignments;
    c = std::move(nc);
    std::swap(r.assignments, next);
    inertia = ni;
    r.inertia_history.push_back(inertia);
    r.iterations = it + 1;
    if (!changed && shift <= params.tolerance) break;
  }
  r.centroids = std::move(c);
  r.inertia = inertia;
  return r;
}

}  // namespace detail

// Lloyd iterations from k-means++ seeds; the best of n_init restarts by
// inertia wins (earliest on ties). Deterministic for a fixed seed.
inline KMeansResult kmeans(const Matrix& points, const KMeansParams& params) {
  if (params.k == 0) throw InputError("k must be positive");
  if (params.k > points.rows()) {
    throw InputError("k = " + std::to_string(params.k) + " exceeds the number of points (" +
                     std::to_string(points.rows()) + ")");
  }
  if (!all_finite(points)) throw InputError("k-means input contains non-finite values");
  std::optional<KMeansResult> best;
  for (std::size_t restart = 0; restart < std::max<std::size_t>(1, params.n_init); ++restart) {
    KeyedRng rng(params.seed, restart, 2);
    auto r = detail::lloyd(points, detail::kmeanspp_seed(points, params.k, rng), params);
    if (!best || r.inertia < best->inertia) best = std::move(r);
  }
  return std::move(*best);
}

struct ElbowResult {
  std::size_t chosen_k{1};
  std::vector<std::pair<std::size_t, double>> curve;  // (k, inertia)
  Diagnostics diagnostics;
};

// Picks the interior k maximizing I(k-1) - 2 I(k) + I(k+1); ties go to the
// smallest k. With fewer than three points on the curve the smallest k wins.
inline std::size_t choose_elbow(std::span<const std::pair<std::size_t, double>> curve, Diagnostics* diag = nullptr) {
  if (curve.empty()) throw InputError("empty inertia curve");
  if (curve.size() < 3) {
    if (diag) diag->warn("elbow: fewer than three k values, no interior point; smallest k chosen");
    return curve.front().first;
  }
  std::size_t best = curve[1].first;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < curve.size(); ++i) {
    const double score = curve[i - 1].second - 2.0 * curve[i].second + curve[i + 1].second;
    if (score > best_score) {
      best_score = score;
      best = curve[i].first;
    }
  }
  return best;
}

inline ElbowResult elbow_select(const Matrix& points, std::size_t k_min, std::size_t k_max, KMeansParams params) {
  if (k_min == 0 || k_min > k_max || k_max > points.rows()) {
    throw InputError("k range [" + std::to_string(k_min) + ", " + std::to_string(k_max) + "] not within [1, " +
                     std::to_string(points.rows()) + "]");
  }
  ElbowResult out;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    params.k = k;
    out.curve.emplace_back(k, kmeans(points, params).inertia);
  }
  for (std::size_t i = 1; i < out.curve.size(); ++i) {
    if (out.curve[i].second > out.curve[i - 1].second) {
      out.diagnostics.warn("elbow: inertia increased from k=" + std::to_string(out.curve[i - 1].first) +
                           " to k=" + std::to_string(out.curve[i].first) + "; consider more restarts");
    }
  }
  out.chosen_k = choose_elbow(out.curve, &out.diagnostics);
  return out;
}

struct OutlierClustering {
  std::size_t chosen_k{1};
  std::vector<std::size_t> assignments;
  std::vector<std::pair<std::size_t, double>> curve;
  std::optional<KMeansResult> kmeans;  // absent when clustering was skipped
  Diagnostics diagnostics;
};

// standardize -> elbow over k_range -> k-means at the chosen (or forced) k.
// Fewer than two points: a single group, no clustering.
inline OutlierClustering cluster_outliers(const Matrix& counts, std::size_t k_min, std::size_t k_max,
                                          const KMeansParams& params, std::optional<std::size_t> k_override = {}) {
  OutlierClustering out;
  const std::size_t n = counts.rows();
  if (n < 2) {
    out.assignments.assign(n, 0);
    out.diagnostics.warn("fewer than two outliers; clustering skipped");
    return out;
  }
  const Standardized z = standardize(counts);
  const std::size_t hi = std::min(k_max, n);
  const std::size_t lo = std::min(k_min, hi);
  if (hi != k_max) out.diagnostics.warn("k range capped at the number of outliers (" + std::to_string(n) + ")");
  auto elbow = elbow_select(z.values, lo, hi, params);
  out.diagnostics.append(elbow.diagnostics);
  out.curve = std::move(elbow.curve);
  out.chosen_k = elbow.chosen_k;
  if (k_override) {
    if (*k_override == 0 || *k_override > n) throw InputError("--k must be within [1, number of outliers]");
    out.chosen_k = *k_override;
  }
  KMeansParams p = params;
  p.k = out.chosen_k;
  out.kmeans = kmeans(z.values, p);
  out.assignments = out.kmeans->assignments;
  return out;
}

}  // namespace reqdiag
