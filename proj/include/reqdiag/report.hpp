#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "cluster.hpp"
#include "detect.hpp"
#include "features.hpp"

namespace reqdiag {

// Lower median: element (n-1)/2 of the sorted values.
inline double lower_median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty set");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

// ----------------------------------------------------------------------------
// Outlier statistics
// ----------------------------------------------------------------------------

inline constexpr std::array<double, 3> kDurationThresholdsMs{200.0, 250.0, 300.0};

struct OutlierStats {
  std::size_t n_outliers{0};
  double median_duration_ms{0.0};
  std::array<double, 3> p_over{};  // P(d > T), T from kDurationThresholdsMs
};

// Fraction of values strictly above each threshold.
inline std::array<double, 3> exceedance(std::span<const double> values) {
  std::array<double, 3> p{};
  if (values.empty()) return p;
  for (std::size_t t = 0; t < p.size(); ++t) {
    const auto above = std::count_if(values.begin(), values.end(), [&](double d) { return d > kDurationThresholdsMs[t]; });
    p[t] = static_cast<double>(above) / static_cast<double>(values.size());
  }
  return p;
}

// Absent when nothing was flagged.
inline std::optional<OutlierStats> outlier_stats(std::span<const double> durations_ms, const DetectionResult& det) {
  if (durations_ms.size() != det.size()) throw InputError("durations and detection labels differ in length");
  std::vector<double> d;
  for (std::size_t i : det.outlier_indices()) d.push_back(durations_ms[i]);
  if (d.empty()) return std::nullopt;
  OutlierStats s;
  s.n_outliers = d.size();
  s.p_over = exceedance(d);
  s.median_duration_ms = lower_median(std::move(d));
  return s;
}

// ----------------------------------------------------------------------------
// Groups: normal requests plus one group per outlier cluster
// ----------------------------------------------------------------------------

struct Grouping {
  std::vector<std::size_t> group;  // per request: 0 = normal, j + 1 = cluster j
  std::vector<std::string> names;  // normal, cluster_0, ...

  std::size_t n_groups() const { return names.size(); }
  std::vector<std::size_t> members(std::size_t g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (group[i] == g) out.push_back(i);
    }
    return out;
  }
};

// `cluster_of_outlier[j]` is the cluster of the j-th outlier in row order.
inline Grouping make_grouping(const DetectionResult& det, std::span<const std::size_t> cluster_of_outlier,
                              std::size_t n_clusters) {
  const auto out_idx = det.outlier_indices();
  if (out_idx.size() != cluster_of_outlier.size()) throw InputError("cluster assignments do not match the outlier set");
  Grouping g;
  g.group.assign(det.size(), 0);
  g.names.emplace_back("normal");
  for (std::size_t j = 0; j < n_clusters; ++j) g.names.push_back("cluster_" + std::to_string(j));
  for (std::size_t j = 0; j < out_idx.size(); ++j) {
    if (cluster_of_outlier[j] >= n_clusters) throw InputError("cluster id out of range");
    g.group[out_idx[j]] = cluster_of_outlier[j] + 1;
  }
  return g;
}

struct GroupStats {
  std::string name;
  std::size_t size{0};
  double median_duration_ms{0.0};
  double mean_syscalls{0.0};
  double mean_distinct_syscalls{0.0};
  std::array<double, kNumStates> mean_counts{};
  std::array<double, kNumStates> std_counts{};  // population
};

inline std::vector<GroupStats> cluster_stats(const FeatureTable& table, const Grouping& g) {
  if (g.group.size() != table.size()) throw InputError("grouping does not cover the feature table");
  std::vector<GroupStats> out;
  for (std::size_t k = 0; k < g.n_groups(); ++k) {
    GroupStats s;
    s.name = g.names[k];
    const auto rows = g.members(k);
    s.size = rows.size();
    if (rows.empty()) {
      out.push_back(s);
      continue;
    }
    std::vector<double> dur;
    for (std::size_t i : rows) {
      const auto& r = table.requests[i];
      dur.push_back(r.durations[kTotalTimeIndex]);
      s.mean_syscalls += static_cast<double>(r.syscalls.size());
      s.mean_distinct_syscalls += static_cast<double>(std::set<std::string>(r.syscalls.begin(), r.syscalls.end()).size());
      for (std::size_t c = 0; c < kNumStates; ++c) s.mean_counts[c] += static_cast<double>(r.counts[c]);
    }
    const double n = static_cast<double>(rows.size());
    s.mean_syscalls /= n;
    s.mean_distinct_syscalls /= n;
    for (auto& m : s.mean_counts) m /= n;
    for (std::size_t i : rows) {
      for (std::size_t c = 0; c < kNumStates; ++c) {
        const double d = static_cast<double>(table.requests[i].counts[c]) - s.mean_counts[c];
        s.std_counts[c] += d * d;
      }
    }
    for (auto& v : s.std_counts) v = std::sqrt(v / n);
    s.median_duration_ms = lower_median(std::move(dur));
    out.push_back(s);
  }
  return out;
}

// ----------------------------------------------------------------------------
// Differential n-grams
// ----------------------------------------------------------------------------

struct DifferentialNGram {
  std::size_t group{0};  // index into Grouping::names, never 0
  std::size_t n{1};
  std::vector<std::string> gram;
  double mean_group{0.0};
  double mean_normal{0.0};
  double score{0.0};
};

inline double differential_score(double mean_cluster, double mean_normal) {
  return (mean_cluster - mean_normal) / (mean_normal + 1.0);
}

// For each outlier group and each n in `orders`, the top_k n-grams by
// differential score against the normal group. Only positive scores are
// ranked; ties go to the lexicographically smaller n-gram.
inline std::vector<DifferentialNGram> differential_ngrams(std::span<const SyscallSequence> sequences, const Grouping& g,
                                                          std::span<const std::size_t> orders, std::size_t top_k) {
  if (sequences.size() != g.group.size()) throw InputError("grouping does not cover the sequences");
  // Sorted vocabulary: id order is lexicographic order, so packed keys of
  // equal length compare like the token tuples they encode.
  std::set<std::string_view> vocab_set;
  for (const auto& s : sequences) vocab_set.insert(s.begin(), s.end());
  const std::vector<std::string_view> vocab(vocab_set.begin(), vocab_set.end());
  constexpr unsigned kBits = 21;
  if (vocab.size() >= (1u << kBits)) throw InputError("syscall vocabulary too large for n-gram packing");
  std::unordered_map<std::string_view, std::uint64_t> id;
  for (std::size_t i = 0; i < vocab.size(); ++i) id.emplace(vocab[i], i);

  std::vector<double> group_size(g.n_groups(), 0.0);
  for (auto k : g.group) ++group_size[k];

  std::vector<DifferentialNGram> out;
  std::vector<std::uint64_t> ids;
  for (std::size_t n : orders) {
    if (n < 1 || n > 3) throw InputError("n-gram order must be 1, 2 or 3");
    std::vector<std::unordered_map<std::uint64_t, std::uint64_t>> counts(g.n_groups());
    for (std::size_t r = 0; r < sequences.size(); ++r) {
      ids.clear();
      for (const auto& t : sequences[r]) ids.push_back(id.at(t));
      auto& c = counts[g.group[r]];
      for (std::size_t i = 0; i + n <= ids.size(); ++i) {
        std::uint64_t key = 0;
        for (std::size_t j = 0; j < n; ++j) key = (key << kBits) | ids[i + j];
        ++c[key];
      }
    }
    const auto mean_in = [&](std::size_t grp, std::uint64_t key) {
      const auto it = counts[grp].find(key);
      if (it == counts[grp].end() || group_size[grp] == 0.0) return 0.0;
      return static_cast<double>(it->second) / group_size[grp];
    };
    for (std::size_t grp = 1; grp < g.n_groups(); ++grp) {
      std::vector<std::pair<double, std::uint64_t>> ranked;
      for (const auto& [key, cnt] : counts[grp]) {
        const double s = differential_score(mean_in(grp, key), mean_in(0, key));
        if (s > 0.0) ranked.emplace_back(s, key);
      }
      const std::size_t keep = std::min(top_k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                        [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
      for (std::size_t i = 0; i < keep; ++i) {
        DifferentialNGram d;
        d.group = grp;
        d.n = n;
        const std::uint64_t key = ranked[i].second;
        for (std::size_t j = 0; j < n; ++j) {
          const auto shift = kBits * static_cast<unsigned>(n - 1 - j);
          d.gram.emplace_back(vocab[(key >> shift) & ((1u << kBits) - 1)]);
        }
        d.mean_group = mean_in(grp, key);
        d.mean_normal = mean_in(0, key);
        d.score = ranked[i].first;
        out.push_back(std::move(d));
      }
    }
  }
  return out;
}

inline std::string join_gram(const std::vector<std::string>& gram) {
  std::string s;
  for (const auto& t : gram) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

// ----------------------------------------------------------------------------
// Isomap
// ----------------------------------------------------------------------------

struct Projection2D {
  std::vector<std::size_t> included;  // input rows, ascending
  Matrix coords;                      // included.size() x 2
  std::vector<std::size_t> excluded;  // rows off the largest component
  std::array<double, 2> eigenvalues{};
  Diagnostics diagnostics;
};

// Symmetric kNN graph as sorted adjacency lists of (neighbor, distance).
inline std::vector<std::vector<std::pair<std::size_t, double>>> knn_graph(const Matrix& x, std::size_t k,
                                                                          std::size_t threads = 1) {
  const std::size_t n = x.rows();
  std::vector<std::vector<std::size_t>> nearest(n);
  parallel_for(n, threads, [&](std::size_t i) {
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.emplace_back(squared_distance(x.row(i), x.row(j)), j);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t t = 0; t < k; ++t) nearest[i].push_back(d[t].second);
  });
  std::vector<std::vector<std::pair<std::size_t, double>>> adj(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : nearest[i]) {
      const double w = std::sqrt(squared_distance(x.row(i), x.row(j)));
      adj[i].emplace_back(j, w);
      adj[j].emplace_back(i, w);
    }
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

inline Projection2D project_isomap(const Matrix& x, std::size_t n_neighbors = 10, std::size_t threads = 1) {
  const std::size_t n = x.rows();
  if (n_neighbors < 1) throw ConfigError("n_neighbors must be at least 1");
  if (n < n_neighbors + 1) {
    throw ConfigError("Isomap needs at least n_neighbors + 1 = " + std::to_string(n_neighbors + 1) + " points, got " +
                      std::to_string(n));
  }
  if (!all_finite(x)) throw InputError("Isomap input contains non-finite values");
  const auto adj = knn_graph(x, n_neighbors, threads);

  // Largest connected component; the earliest-found one wins ties.
  std::vector<int> comp(n, -1);
  std::vector<std::size_t> best;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] != -1) continue;
    std::vector<std::size_t> members{s};
    comp[s] = static_cast<int>(s);
    for (std::size_t h = 0; h < members.size(); ++h) {
      for (const auto& [v, w] : adj[members[h]]) {
        if (comp[v] == -1) {
          comp[v] = static_cast<int>(s);
          members.push_back(v);
        }
      }
    }
    if (members.size() > best.size()) best = std::move(members);
  }
  std::sort(best.begin(), best.end());
  Projection2D p;
  p.included = best;
  std::vector<std::size_t> local(n, n);
  for (std::size_t i = 0; i < best.size(); ++i) local[best[i]] = i;
  for (std::size_t i = 0; i < n; ++i) {
    if (local[i] == n) p.excluded.push_back(i);
  }
  if (!p.excluded.empty()) {
    p.diagnostics.warn(std::to_string(p.excluded.size()) + " points lie off the largest neighborhood component");
  }

  // Geodesic distances, squared, by Dijkstra from every node.
  const std::size_t m = best.size();
  Eigen::MatrixXd d2(m, m);
  parallel_for(m, threads, [&](std::size_t src) {
    std::vector<double> dist(m, std::numeric_limits<double>::infinity());
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[src] = 0.0;
    pq.emplace(0.0, src);
    while (!pq.empty()) {
      const auto [du, u] = pq.top();
      pq.pop();
      if (du > dist[u]) continue;
      for (const auto& [v, w] : adj[best[u]]) {
        const std::size_t lv = local[v];
        if (du + w < dist[lv]) {
          dist[lv] = du + w;
          pq.emplace(dist[lv], lv);
        }
      }
    }
    for (std::size_t j = 0; j < m; ++j) d2(static_cast<Eigen::Index>(src), static_cast<Eigen::Index>(j)) = dist[j] * dist[j];
  });

  // B = -1/2 J D^2 J, applied as row/column/grand mean removal.
  const Eigen::VectorXd row_mean = d2.rowwise().mean();
  const Eigen::RowVectorXd col_mean = d2.colwise().mean();
  const double grand = d2.mean();
  Eigen::MatrixXd b = d2;
  b.colwise() -= row_mean;
  b.rowwise() -= col_mean;
  b.array() += grand;
  b *= -0.5;
  b = 0.5 * (b + b.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(b);
  if (eig.info() != Eigen::Success) throw InvariantError("eigendecomposition failed");
  p.coords = Matrix(m, 2);
  // Rounding leaves flat directions with tiny nonzero eigenvalues.
  const double floor = 1e-10 * std::abs(eig.eigenvalues()(static_cast<Eigen::Index>(m) - 1));
  for (std::size_t axis = 0; axis < 2; ++axis) {
    if (m < axis + 1) break;
    const Eigen::Index col = static_cast<Eigen::Index>(m) - 1 - static_cast<Eigen::Index>(axis);
    const double lambda = eig.eigenvalues()(col);
    p.eigenvalues[axis] = lambda;
    if (!(lambda > floor)) {
      p.diagnostics.warn("Isomap component " + std::to_string(axis + 1) + " has non-positive eigenvalue; dropped");
      continue;
    }
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index at = 0;
    v.cwiseAbs().maxCoeff(&at);
    if (v(at) < 0) v = -v;  // sign convention: largest-magnitude entry positive
    const double scale = std::sqrt(lambda);
    for (std::size_t i = 0; i < m; ++i) p.coords(i, axis) = v(static_cast<Eigen::Index>(i)) * scale;
  }
  return p;
}

// Rows to project when the corpus is too large for dense MDS: every outlier
// plus evenly strided normal rows, capped near `cap` rows in total.
inline std::vector<std::size_t> projection_sample(const DetectionResult& det, std::size_t cap) {
  const std::size_t n = det.size();
  if (n <= cap) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  const std::size_t n_out = det.outlier_count();
  const std::size_t n_norm = n - n_out;
  const std::size_t room = cap > n_out ? cap - n_out : 0;
  const std::size_t stride = room == 0 ? n_norm + 1 : (n_norm + room - 1) / room;
  std::vector<std::size_t> out;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (det.is_outlier(i)) {
      out.push_back(i);
    } else if (seen++ % stride == 0) {
      out.push_back(i);
    }
  }
  return out;
}

// ----------------------------------------------------------------------------
// Report bundle
// ----------------------------------------------------------------------------

struct RepresentationRow {
  FeatureSet feature_set{FeatureSet::state_durations};
  DbscanParams params{};
  std::optional<OutlierStats> stats;
};

struct Evaluation {
  std::size_t anomalies{0};
  std::size_t true_positives{0};
  double recall{0.0};
  double precision{0.0};
  std::optional<double> purity;
};

struct ReportInputs {
  const FeatureTable* table{nullptr};
  FeatureSet feature_set{FeatureSet::state_durations};
  DbscanParams params{};
  bool standardized{false};
  DetectionResult detection;
  std::vector<std::size_t> clusters;  // per outlier, row order
  std::size_t n_clusters{0};
  std::vector<std::pair<std::size_t, double>> inertia_curve;
  std::vector<RepresentationRow> representations;
  std::optional<Evaluation> evaluation;
  std::size_t n_neighbors{10};
  std::size_t projection_cap{1000};
  std::size_t top_k{5};
  std::size_t threads{1};
};

struct ReportData {
  std::size_t n_requests{0};
  double corpus_median_ms{0.0};
  std::optional<OutlierStats> outliers;
  Grouping grouping;
  std::vector<GroupStats> groups;
  std::vector<DifferentialNGram> ngrams;
  std::optional<Projection2D> projection;
  Diagnostics diagnostics;
};

inline ReportData build_report(const ReportInputs& in) {
  if (!in.table) throw InputError("report needs a feature table");
  const auto& t = *in.table;
  ReportData r;
  r.n_requests = t.size();
  const auto dur = t.total_ms();
  if (!dur.empty()) r.corpus_median_ms = lower_median(dur);
  r.outliers = outlier_stats(dur, in.detection);
  r.grouping = make_grouping(in.detection, in.clusters, in.n_clusters);
  r.groups = cluster_stats(t, r.grouping);
  std::vector<SyscallSequence> seqs;
  seqs.reserve(t.size());
  for (const auto& q : t.requests) seqs.push_back(q.syscalls);
  const std::array<std::size_t, 3> orders{1, 2, 3};
  r.ngrams = differential_ngrams(seqs, r.grouping, orders, in.top_k);

  const auto rows = projection_sample(in.detection, in.projection_cap);
  if (rows.size() >= in.n_neighbors + 1) {
    auto proj = project_isomap(t.duration_matrix().select_rows(rows), in.n_neighbors, in.threads);
    for (auto& i : proj.included) i = rows[i];
    for (auto& i : proj.excluded) i = rows[i];
    r.diagnostics.append(proj.diagnostics);
    r.projection = std::move(proj);
  } else {
    r.diagnostics.warn("too few requests for the Isomap projection");
  }
  return r;
}

namespace detail {

inline nlohmann::ordered_json stats_json(const std::optional<OutlierStats>& s) {
  if (!s) return nullptr;
  nlohmann::ordered_json j;
  j["n_outliers"] = s->n_outliers;
  j["median_duration_ms"] = round6(s->median_duration_ms);
  nlohmann::ordered_json p;
  for (std::size_t t = 0; t < kDurationThresholdsMs.size(); ++t) p[fmt6(kDurationThresholdsMs[t])] = round6(s->p_over[t]);
  j["p_over"] = p;
  return j;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw InputError("cannot write " + p.string());
  return f;
}

}  // namespace detail

inline void write_inertia_csv(std::ostream& out, std::span<const std::pair<std::size_t, double>> curve) {
  out << "k,inertia\n";
  for (const auto& [k, v] : curve) out << k << ',' << fmt6(v) << '\n';
}

inline constexpr double kHistogramBinMs = 10.0;

// Duration histogram per group: all, normal, outlier, then each cluster.
inline void write_distributions_csv(std::ostream& out, const FeatureTable& t, const ReportData& r) {
  const auto dur = t.total_ms();
  std::vector<std::pair<std::string, std::vector<double>>> series{{"all", dur}, {"normal", {}}, {"outlier", {}}};
  for (std::size_t g = 1; g < r.grouping.n_groups(); ++g) series.emplace_back(r.grouping.names[g], std::vector<double>{});
  for (std::size_t i = 0; i < dur.size(); ++i) {
    const std::size_t g = r.grouping.group[i];
    series[g == 0 ? 1 : 2].second.push_back(dur[i]);
    if (g != 0) series[2 + g].second.push_back(dur[i]);
  }
  const double max_ms = dur.empty() ? 0.0 : *std::max_element(dur.begin(), dur.end());
  const auto bins = static_cast<std::size_t>(std::floor(max_ms / kHistogramBinMs)) + 1;
  out << "group,bin_lo_ms,bin_hi_ms,count\n";
  for (const auto& [name, values] : series) {
    std::vector<std::size_t> h(bins, 0);
    for (double v : values) ++h[std::min(bins - 1, static_cast<std::size_t>(std::floor(v / kHistogramBinMs)))];
    for (std::size_t b = 0; b < bins; ++b) {
      out << name << ',' << fmt6(static_cast<double>(b) * kHistogramBinMs) << ','
          << fmt6(static_cast<double>(b + 1) * kHistogramBinMs) << ',' << h[b] << '\n';
    }
  }
}

inline nlohmann::ordered_json summary_json(const ReportInputs& in, const ReportData& r) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["requests"] = r.n_requests;
  j["corpus_median_ms"] = round6(r.corpus_median_ms);
  j["detection"] = {{"feature_set", std::string(to_string(in.feature_set))},
                    {"epsilon", round6(in.params.epsilon)},
                    {"min_points", in.params.min_points},
                    {"standardize", in.standardized}};
  j["outliers"] = detail::stats_json(r.outliers);
  ordered_json reps = ordered_json::array();
  for (const auto& row : in.representations) {
    reps.push_back({{"feature_set", std::string(to_string(row.feature_set))},
                    {"epsilon", round6(row.params.epsilon)},
                    {"min_points", row.params.min_points},
                    {"outliers", detail::stats_json(row.stats)}});
  }
  j["representations"] = reps;
  ordered_json curve = ordered_json::array();
  for (const auto& [k, v] : in.inertia_curve) curve.push_back({{"k", k}, {"inertia", round6(v)}});
  j["clustering"] = {{"chosen_k", in.n_clusters}, {"inertia", curve}};
  ordered_json groups = ordered_json::array();
  for (const auto& g : r.groups) {
    ordered_json mean, sd;
    for (std::size_t c = 0; c < kNumStates; ++c) {
      mean[std::string(kExecStateNames[c])] = round6(g.mean_counts[c]);
      sd[std::string(kExecStateNames[c])] = round6(g.std_counts[c]);
    }
    groups.push_back({{"name", g.name},
                      {"size", g.size},
                      {"median_duration_ms", g.size ? ordered_json(round6(g.median_duration_ms)) : ordered_json()},
                      {"mean_syscalls", round6(g.mean_syscalls)},
                      {"mean_distinct_syscalls", round6(g.mean_distinct_syscalls)},
                      {"mean_state_counts", mean},
                      {"std_state_counts", sd}});
  }
  j["groups"] = groups;
  ordered_json grams = ordered_json::array();
  for (const auto& d : r.ngrams) {
    grams.push_back({{"group", r.grouping.names[d.group]},
                     {"n", d.n},
                     {"ngram", join_gram(d.gram)},
                     {"mean_group", round6(d.mean_group)},
                     {"mean_normal", round6(d.mean_normal)},
                     {"score", round6(d.score)}});
  }
  j["ngrams"] = grams;
  if (r.projection) {
    j["projection"] = {{"points", r.projection->included.size()},
                       {"excluded", r.projection->excluded.size()},
                       {"eigenvalues", {round6(r.projection->eigenvalues[0]), round6(r.projection->eigenvalues[1])}}};
  } else {
    j["projection"] = nullptr;
  }
  if (in.evaluation) {
    const auto& e = *in.evaluation;
    j["evaluation"] = {{"anomalies", e.anomalies},
                       {"true_positives", e.true_positives},
                       {"recall", round6(e.recall)},
                       {"precision", round6(e.precision)},
                       {"purity", e.purity ? ordered_json(round6(*e.purity)) : ordered_json()}};
  }
  return j;
}

inline void write_report_md(std::ostream& out, const ReportInputs& in, const ReportData& r) {
  out << "# Request anomaly report\n\n";
  out << "Requests: " << r.n_requests << "  \nCorpus median duration: " << fmt6(r.corpus_median_ms) << " ms  \n";
  out << "Detection: DBSCAN on " << to_string(in.feature_set) << ", epsilon " << fmt6(in.params.epsilon)
      << ", min points " << in.params.min_points << (in.standardized ? ", standardized" : "") << "\n\n";

  const auto stats_row = [&](std::string_view name, const std::optional<OutlierStats>& s) {
    out << "| " << name << " | ";
    if (!s) {
      out << "0 | - | - | - | - |\n";
      return;
    }
    out << s->n_outliers << " | " << fmt6(s->median_duration_ms);
    for (double p : s->p_over) out << " | " << fmt6(p);
    out << " |\n";
  };
  out << "## Outliers\n\n";
  if (!r.outliers) {
    out << "No outliers were detected; cluster and n-gram sections are empty.\n\n";
  } else {
    out << "| representation | outliers | median (ms) | P(d>200) | P(d>250) | P(d>300) |\n";
    out << "|---|---|---|---|---|---|\n";
    stats_row(to_string(in.feature_set), r.outliers);
    out << '\n';
  }
  if (!in.representations.empty()) {
    out << "## Representation comparison\n\n";
    out << "| representation | outliers | median (ms) | P(d>200) | P(d>250) | P(d>300) |\n";
    out << "|---|---|---|---|---|---|\n";
    for (const auto& row : in.representations) stats_row(to_string(row.feature_set), row.stats);
    out << '\n';
  }

  out << "## Groups\n\n| group | size | median (ms) | syscalls | distinct syscalls |";
  for (auto s : kExecStateNames) out << ' ' << s << " |";
  out << "\n|---|---|---|---|---|";
  for (std::size_t c = 0; c < kNumStates; ++c) out << "---|";
  out << '\n';
  for (const auto& g : r.groups) {
    out << "| " << g.name << " | " << g.size << " | " << (g.size ? fmt6(g.median_duration_ms) : "-") << " | "
        << fmt6(g.mean_syscalls) << " | " << fmt6(g.mean_distinct_syscalls) << " |";
    for (std::size_t c = 0; c < kNumStates; ++c) out << ' ' << fmt6(g.mean_counts[c]) << " ± " << fmt6(g.std_counts[c]) << " |";
    out << '\n';
  }
  out << '\n';

  if (!in.inertia_curve.empty()) {
    out << "## Elbow\n\nChosen k: " << in.n_clusters << "\n\n| k | inertia |\n|---|---|\n";
    for (const auto& [k, v] : in.inertia_curve) out << "| " << k << " | " << fmt6(v) << " |\n";
    out << '\n';
  }

  out << "## Differential n-grams\n\n";
  if (r.ngrams.empty()) {
    out << "None.\n\n";
  } else {
    out << "| group | n | n-gram | group mean | normal mean | score |\n|---|---|---|---|---|---|\n";
    for (const auto& d : r.ngrams) {
      out << "| " << r.grouping.names[d.group] << " | " << d.n << " | " << join_gram(d.gram) << " | "
          << fmt6(d.mean_group) << " | " << fmt6(d.mean_normal) << " | " << fmt6(d.score) << " |\n";
    }
    out << '\n';
  }

  out << "## Projection\n\n";
  if (r.projection) {
    out << "Isomap (" << in.n_neighbors << " neighbors) of " << r.projection->included.size() + r.projection->excluded.size()
        << " requests; " << r.projection->excluded.size() << " off the main component.\n\n";
  } else {
    out << "Not computed.\n\n";
  }

  if (in.evaluation) {
    const auto& e = *in.evaluation;
    out << "## Ground truth\n\nAnomalies: " << e.anomalies << "  \nRecall: " << fmt6(e.recall)
        << "  \nPrecision: " << fmt6(e.precision) << "  \n";
    if (e.purity) out << "Cluster purity: " << fmt6(*e.purity) << "  \n";
    out << '\n';
  }
}

// Writes summary.json, report.md, projection.csv, inertia.csv and
// distributions.csv into `dir`.
inline ReportData emit_report(const std::filesystem::path& dir, const ReportInputs& in) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir.string() + ": " + ec.message());
  ReportData r = build_report(in);
  const auto& t = *in.table;
  {
    auto f = detail::open_out(dir / "summary.json");
    f << summary_json(in, r).dump(2) << '\n';
  }
  {
    auto f = detail::open_out(dir / "report.md");
    write_report_md(f, in, r);
  }
  {
    auto f = detail::open_out(dir / "projection.csv");
    f << "request_id,x,y,duration_ms,label\n";
    if (r.projection) {
      const auto& p = *r.projection;
      for (std::size_t i = 0; i < p.included.size(); ++i) {
        const std::size_t row = p.included[i];
        f << t.requests[row].window.request_id << ',' << fmt6(p.coords(i, 0)) << ',' << fmt6(p.coords(i, 1)) << ','
          << fmt6(t.requests[row].durations[kTotalTimeIndex]) << ',' << r.grouping.names[r.grouping.group[row]] << '\n';
      }
    }
  }
  {
    auto f = detail::open_out(dir / "inertia.csv");
    write_inertia_csv(f, in.inertia_curve);
  }
  {
    auto f = detail::open_out(dir / "distributions.csv");
    write_distributions_csv(f, t, r);
  }
  return r;
}

}  // namespace reqdiag
