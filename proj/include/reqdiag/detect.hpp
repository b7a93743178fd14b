#pragma once

#include <algorithm>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "cluster.hpp"
#include "features.hpp"

namespace reqdiag {

struct DbscanParams {
  double epsilon{50.0};
  std::size_t min_points{5};

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be a positive finite number");
    if (min_points < 1) throw ConfigError("min_points must be at least 1");
  }
};

inline constexpr int kOutlier = -1;

struct DetectionResult {
  std::vector<int> labels;  // kOutlier or a cluster id in [0, n_clusters)
  std::vector<bool> core;
  int n_clusters{0};

  std::size_t size() const noexcept { return labels.size(); }
  bool is_outlier(std::size_t i) const { return labels[i] == kOutlier; }
  std::size_t outlier_count() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kOutlier));
  }
  std::vector<std::size_t> outlier_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kOutlier) out.push_back(i);
    }
    return out;
  }
};

// The single neighbourhood predicate: inclusive boundary on squared distance.
inline bool within_epsilon(std::span<const double> a, std::span<const double> b, double eps2) {
  return squared_distance(a, b) <= eps2;
}

namespace detail {

// Exact k-d tree for fixed-radius queries. Each node tracks how many of its
// points are still unassigned so cluster expansion skips settled subtrees.
class KdTree {
 public:
  KdTree(const Matrix& pts, std::size_t leaf_size = 16) : pts_(pts), leaf_size_(leaf_size) {
    const std::size_t n = pts.rows();
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    leaf_of_.assign(n, 0);
    if (n > 0) build(0, n, kNone);
  }

  // Counts points within the radius, stopping once `cap` is reached.
  std::size_t count_within(std::span<const double> q, double eps2, std::size_t cap) const {
    std::size_t found = 0;
    count_rec(0, q, eps2, cap, found);
    return found;
  }

  // Appends every still-unassigned point within the radius.
  void unassigned_within(std::span<const double> q, double eps2, std::vector<std::size_t>& out) const {
    collect_rec(0, q, eps2, out);
  }

  void mark_assigned(std::size_t point) {
    for (std::size_t n = leaf_of_[point]; n != kNone; n = nodes_[n].parent) --nodes_[n].unassigned;
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    std::size_t begin, end;
    std::size_t left{kNone}, right{kNone}, parent{kNone};
    std::size_t unassigned;
    std::vector<double> lo, hi;
  };

  std::size_t build(std::size_t begin, std::size_t end, std::size_t parent) {
    const std::size_t id = nodes_.size();
    const std::size_t dims = pts_.cols();
    nodes_.push_back(Node{begin, end, kNone, kNone, parent, end - begin, std::vector<double>(dims),
                          std::vector<double>(dims)});
    {
      auto& nd = nodes_[id];
      for (std::size_t d = 0; d < dims; ++d) {
        nd.lo[d] = nd.hi[d] = pts_(order_[begin], d);
      }
      for (std::size_t i = begin + 1; i < end; ++i) {
        for (std::size_t d = 0; d < dims; ++d) {
          nd.lo[d] = std::min(nd.lo[d], pts_(order_[i], d));
          nd.hi[d] = std::max(nd.hi[d], pts_(order_[i], d));
        }
      }
    }
    std::size_t split = 0;
    double widest = 0.0;
    for (std::size_t d = 0; d < dims; ++d) {
      const double w = nodes_[id].hi[d] - nodes_[id].lo[d];
      if (w > widest) {
        widest = w;
        split = d;
      }
    }
    if (end - begin <= leaf_size_ || widest == 0.0) {
      for (std::size_t i = begin; i < end; ++i) leaf_of_[order_[i]] = id;
      return id;
    }
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return pts_(a, split) < pts_(b, split); });
    const std::size_t l = build(begin, mid, id);
    const std::size_t r = build(mid, end, id);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  // Lower bound on the squared distance from q to the node's box. Summed in
  // dimension order with per-axis gaps no larger than the true differences,
  // so it never exceeds squared_distance to any contained point.
  double box_bound(const Node& nd, std::span<const double> q) const {
    double s = 0.0;
    for (std::size_t d = 0; d < q.size(); ++d) {
      double g = 0.0;
      if (q[d] < nd.lo[d]) {
        g = nd.lo[d] - q[d];
      } else if (q[d] > nd.hi[d]) {
        g = q[d] - nd.hi[d];
      }
      s += g * g;
    }
    return s;
  }

  void count_rec(std::size_t id, std::span<const double> q, double eps2, std::size_t cap, std::size_t& found) const {
    const Node& nd = nodes_[id];
    if (found >= cap || box_bound(nd, q) > eps2) return;
    if (nd.left == kNone) {
      for (std::size_t i = nd.begin; i < nd.end && found < cap; ++i) {
        if (within_epsilon(q, pts_.row(order_[i]), eps2)) ++found;
      }
      return;
    }
    count_rec(nd.left, q, eps2, cap, found);
    count_rec(nd.right, q, eps2, cap, found);
  }

  void collect_rec(std::size_t id, std::span<const double> q, double eps2, std::vector<std::size_t>& out) const {
    const Node& nd = nodes_[id];
    if (nd.unassigned == 0 || box_bound(nd, q) > eps2) return;
    if (nd.left == kNone) {
      for (std::size_t i = nd.begin; i < nd.end; ++i) {
        if (within_epsilon(q, pts_.row(order_[i]), eps2)) out.push_back(order_[i]);
      }
      return;
    }
    collect_rec(nd.left, q, eps2, out);
    collect_rec(nd.right, q, eps2, out);
  }

  const Matrix& pts_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> leaf_of_;
  std::vector<Node> nodes_;
};

}  // namespace detail

// Clusters are numbered in the order their first core point appears when
// scanning rows ascending; a border point joins the first cluster that
// reaches it.
inline DetectionResult dbscan(const Matrix& points, const DbscanParams& params, std::size_t threads = 1) {
  params.validate();
  DetectionResult r;
  const std::size_t n = points.rows();
  if (n == 0) return r;
  if (!all_finite(points)) throw InputError("DBSCAN input contains non-finite values");
  const double eps2 = params.epsilon * params.epsilon;

  detail::KdTree tree(points);
  std::vector<char> core(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    core[i] = tree.count_within(points.row(i), eps2, params.min_points) >= params.min_points ? 1 : 0;
  });

  r.labels.assign(n, kOutlier);
  r.core.assign(core.begin(), core.end());
  std::vector<std::size_t> frontier, found;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || r.labels[i] != kOutlier) continue;
    const int label = r.n_clusters++;
    r.labels[i] = label;
    tree.mark_assigned(i);
    frontier.assign(1, i);
    while (!frontier.empty()) {
      const std::size_t p = frontier.back();
      frontier.pop_back();
      found.clear();
      tree.unassigned_within(points.row(p), eps2, found);
      for (std::size_t q : found) {
        if (r.labels[q] != kOutlier) continue;
        r.labels[q] = label;
        tree.mark_assigned(q);
        if (core[q]) frontier.push_back(q);
      }
    }
  }
  return r;
}

// ----------------------------------------------------------------------------
// Feature-set selection
// ----------------------------------------------------------------------------

enum class FeatureSet : std::uint8_t { syscall_bow, syscall_tfidf, state_counts_bow, state_counts_tfidf, state_durations };

inline constexpr std::array<std::string_view, 5> kFeatureSetNames{
    "syscall_bow", "syscall_tfidf", "state_counts_bow", "state_counts_tfidf", "state_durations",
};

inline std::string_view to_string(FeatureSet f) { return kFeatureSetNames[static_cast<std::size_t>(f)]; }

inline FeatureSet parse_feature_set(std::string_view s) {
  if (auto f = enum_from_string<FeatureSet>(kFeatureSetNames, s)) return *f;
  throw ConfigError("unknown feature set '" + std::string(s) +
                    "' (expected syscall_bow, syscall_tfidf, state_counts_bow, state_counts_tfidf or state_durations)");
}

// Radius defaults for the synthetic corpus. Durations are in ms; the others
// are in raw count or tf-idf units.
inline double default_epsilon(FeatureSet f) {
  switch (f) {
    case FeatureSet::state_durations:
      return 50.0;
    case FeatureSet::syscall_bow:
      return 3.0;
    case FeatureSet::syscall_tfidf:
      return 0.5;
    case FeatureSet::state_counts_bow:
      return 3.0;
    case FeatureSet::state_counts_tfidf:
      return 0.25;
  }
  return 50.0;
}

inline Matrix feature_matrix(const FeatureTable& table, FeatureSet f) {
  switch (f) {
    case FeatureSet::syscall_bow:
      return table.syscall_matrix().counts;
    case FeatureSet::syscall_tfidf:
      return tfidf(table.syscall_matrix().counts);
    case FeatureSet::state_counts_bow:
      return table.count_matrix();
    case FeatureSet::state_counts_tfidf:
      return tfidf(table.count_matrix());
    case FeatureSet::state_durations:
      return table.duration_matrix();
  }
  return {};
}

inline DetectionResult detect_outliers(const FeatureTable& table, FeatureSet f, const DbscanParams& params,
                                       bool standardize_features = false, std::size_t threads = 1) {
  Matrix m = feature_matrix(table, f);
  if (standardize_features && m.rows() >= 2) m = standardize(m).values;
  return dbscan(m, params, threads);
}

inline std::string label_name(int label) { return label == kOutlier ? "outlier" : "c" + std::to_string(label); }

inline int parse_label(std::string_view s) {
  if (s == "outlier") return kOutlier;
  if (s.size() >= 2 && s[0] == 'c') {
    int v = 0;
    if (parse_int(s.substr(1), v) && v >= 0) return v;
  }
  throw InputError("bad detection label '" + std::string(s) + "'");
}

inline void write_labels(std::ostream& out, std::span<const RequestId> ids, const DetectionResult& r) {
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << '\t' << label_name(r.labels[i]) << '\n';
}

}  // namespace reqdiag
