#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cluster.hpp"
#include "detect.hpp"
#include "features.hpp"
#include "report.hpp"
#include "workload_sim.hpp"

namespace reqdiag {

namespace fs = std::filesystem;

// Intermediate artifacts and the stage that writes each.
namespace files {
inline constexpr std::string_view requests = "requests.tsv";
inline constexpr std::string_view counts = "state_counts.csv";
inline constexpr std::string_view durations = "state_durations.csv";
inline constexpr std::string_view syscall_bow = "syscall_bow.csv";
inline constexpr std::string_view sequences = "sequences.tsv";
inline constexpr std::string_view paths = "paths.tsv";
inline constexpr std::string_view labels = "labels.tsv";
inline constexpr std::string_view clusters = "clusters.tsv";
inline constexpr std::string_view inertia = "inertia.tsv";
inline constexpr std::string_view trace = "trace.txt";
inline constexpr std::string_view truth = "truth.tsv";
}  // namespace files

struct PipelineConfig {
  fs::path in;
  fs::path out;
  std::optional<fs::path> truth;
  std::uint64_t seed{42};
  std::size_t threads{0};
  FeatureSet feature_set{FeatureSet::state_durations};
  std::optional<double> epsilon;  // default_epsilon(feature_set) when unset
  std::size_t min_points{5};
  std::optional<std::size_t> k;
  std::size_t k_min{2};
  std::size_t k_max{10};
  std::size_t n_neighbors{10};
  bool standardize{false};
  bool dump_paths{false};
  bool compare_representations{true};
  std::size_t projection_cap{1000};
  std::size_t top_k{5};
  WorkloadConfig workload{};

  DbscanParams dbscan() const { return {epsilon.value_or(default_epsilon(feature_set)), min_points}; }
};

class MissingStageOutput : public InputError {
 public:
  MissingStageOutput(const fs::path& file, std::string_view stage)
      : InputError("missing " + file.string() + "; run the '" + std::string(stage) + "' stage first") {}
};

namespace detail {

inline std::ifstream open_stage_input(const fs::path& dir, std::string_view name, std::string_view stage) {
  const fs::path p = dir / name;
  std::ifstream f(p, std::ios::binary);
  if (!f) throw MissingStageOutput(p, stage);
  return f;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir.string() + ": " + ec.message());
}

template <typename Fn>
void write_file(const fs::path& p, Fn&& body) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw InputError("cannot write " + p.string());
  body(f);
  if (!f) throw InputError("write failed: " + p.string());
}

inline double parse_double(std::string_view s, std::size_t lineno, const fs::path& file) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw InputError(file.string() + ":" + std::to_string(lineno) + ": bad number");
  return v;
}

// Reads data rows of a headed, `sep`-separated file.
template <typename Fn>
void for_each_row(std::istream& in, char sep, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty() || line.front() == '#') continue;
    fn(split(line, sep), lineno);
  }
}

inline RequestId parse_id(std::string_view s, std::size_t lineno, const fs::path& file) {
  RequestId id = 0;
  if (!parse_int(s, id)) throw InputError(file.string() + ":" + std::to_string(lineno) + ": bad request id");
  return id;
}

inline void print_diagnostics(const Diagnostics& d, std::ostream& err, std::string_view stage, std::size_t limit = 10) {
  for (std::size_t i = 0; i < std::min(limit, d.warnings.size()); ++i) err << stage << ": warning: " << d.warnings[i] << '\n';
  if (d.warnings.size() > limit) err << stage << ": " << d.warnings.size() - limit << " more warnings\n";
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Intermediate file I/O
// ----------------------------------------------------------------------------

inline void write_features(const fs::path& dir, const FeatureTable& t) {
  detail::write_file(dir / files::requests, [&](std::ostream& f) {
    f << "request_id\tstart_ns\tend_ns\tentry_thread\n";
    for (const auto& r : t.requests) {
      f << r.window.request_id << '\t' << r.window.start_ts << '\t' << r.window.end_ts << '\t' << r.window.entry_thread
        << '\n';
    }
  });
  detail::write_file(dir / files::counts, [&](std::ostream& f) { write_count_csv(f, t); });
  detail::write_file(dir / files::durations, [&](std::ostream& f) { write_duration_csv(f, t); });
  detail::write_file(dir / files::syscall_bow, [&](std::ostream& f) { write_bow_csv(f, t, t.syscall_matrix()); });
  detail::write_file(dir / files::sequences, [&](std::ostream& f) {
    f << "request_id\tsyscalls\n";
    for (const auto& r : t.requests) {
      f << r.window.request_id << '\t';
      for (std::size_t i = 0; i < r.syscalls.size(); ++i) f << (i ? " " : "") << r.syscalls[i];
      f << '\n';
    }
  });
}

inline FeatureTable load_features(const fs::path& dir) {
  FeatureTable t;
  std::map<RequestId, std::size_t> row;
  {
    auto f = detail::open_stage_input(dir, files::requests, "extract");
    const fs::path p = dir / files::requests;
    detail::for_each_row(f, '\t', [&](const auto& c, std::size_t ln) {
      RequestFeatures r;
      if (c.size() != 4 || !parse_int(c[1], r.window.start_ts) || !parse_int(c[2], r.window.end_ts) ||
          !parse_int(c[3], r.window.entry_thread)) {
        throw InputError(p.string() + ":" + std::to_string(ln) + ": malformed row");
      }
      r.window.request_id = detail::parse_id(c[0], ln, p);
      if (!row.emplace(r.window.request_id, t.requests.size()).second) {
        throw InputError(p.string() + ":" + std::to_string(ln) + ": duplicate request id");
      }
      t.requests.push_back(std::move(r));
    });
  }
  const auto lookup = [&](RequestId id, const fs::path& p, std::size_t ln) -> RequestFeatures& {
    const auto it = row.find(id);
    if (it == row.end()) throw InputError(p.string() + ":" + std::to_string(ln) + ": unknown request id");
    return t.requests[it->second];
  };
  const auto read_csv = [&](std::string_view name, std::size_t width, auto&& store) {
    auto f = detail::open_stage_input(dir, name, "extract");
    const fs::path p = dir / name;
    std::size_t rows = 0;
    detail::for_each_row(f, ',', [&](const auto& c, std::size_t ln) {
      if (c.size() != width + 1) throw InputError(p.string() + ":" + std::to_string(ln) + ": wrong column count");
      store(lookup(detail::parse_id(c[0], ln, p), p, ln), c, ln, p);
      ++rows;
    });
    if (rows != t.size()) throw InputError(p.string() + ": row count differs from " + std::string(files::requests));
  };
  read_csv(files::counts, kNumStates, [](RequestFeatures& r, const auto& c, std::size_t ln, const fs::path& p) {
    for (std::size_t i = 0; i < kNumStates; ++i) {
      if (!parse_int(c[i + 1], r.counts[i])) throw InputError(p.string() + ":" + std::to_string(ln) + ": bad count");
    }
  });
  read_csv(files::durations, kNumStates + 1, [](RequestFeatures& r, const auto& c, std::size_t ln, const fs::path& p) {
    for (std::size_t i = 0; i <= kNumStates; ++i) r.durations[i] = detail::parse_double(c[i + 1], ln, p);
  });
  {
    auto f = detail::open_stage_input(dir, files::sequences, "extract");
    const fs::path p = dir / files::sequences;
    detail::for_each_row(f, '\t', [&](const auto& c, std::size_t ln) {
      if (c.size() != 2) throw InputError(p.string() + ":" + std::to_string(ln) + ": malformed row");
      auto& r = lookup(detail::parse_id(c[0], ln, p), p, ln);
      r.syscalls.clear();
      if (!c[1].empty()) {
        for (auto tok : split(c[1], ' ')) r.syscalls.emplace_back(tok);
      }
    });
  }
  return t;
}

struct StoredDetection {
  FeatureSet feature_set{FeatureSet::state_durations};
  DbscanParams params{};
  bool standardized{false};
  DetectionResult result;
};

inline void write_detection(const fs::path& dir, std::span<const RequestId> ids, const StoredDetection& d) {
  detail::write_file(dir / files::labels, [&](std::ostream& f) {
    f << "# feature_set=" << to_string(d.feature_set) << " epsilon=" << exact_double(d.params.epsilon)
      << " min_points=" << d.params.min_points << " standardize=" << (d.standardized ? 1 : 0) << '\n';
    f << "request_id\tlabel\n";
    write_labels(f, ids, d.result);
  });
}

inline StoredDetection load_detection(const fs::path& dir, const FeatureTable& t) {
  auto f = detail::open_stage_input(dir, files::labels, "detect");
  const fs::path p = dir / files::labels;
  StoredDetection d;
  std::string line;
  if (!std::getline(f, line) || !line.starts_with("# ")) throw InputError(p.string() + ": missing parameter header");
  for (auto kv : split(std::string_view(line).substr(2), ' ')) {
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw InputError(p.string() + ": bad header field");
    const auto key = kv.substr(0, eq);
    const auto val = kv.substr(eq + 1);
    if (key == "feature_set") {
      d.feature_set = parse_feature_set(val);
    } else if (key == "epsilon") {
      d.params.epsilon = detail::parse_double(val, 1, p);
    } else if (key == "min_points") {
      if (!parse_int(val, d.params.min_points)) throw InputError(p.string() + ": bad min_points");
    } else if (key == "standardize") {
      d.standardized = val == "1";
    }
  }
  std::vector<std::pair<RequestId, int>> rows;
  detail::for_each_row(f, '\t', [&](const auto& c, std::size_t ln) {
    if (c.size() != 2) throw InputError(p.string() + ":" + std::to_string(ln + 1) + ": malformed row");
    rows.emplace_back(detail::parse_id(c[0], ln + 1, p), parse_label(c[1]));
  });
  if (rows.size() != t.size()) throw InputError(p.string() + ": label count differs from the feature table");
  d.result.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != t.requests[i].window.request_id) {
      throw InputError(p.string() + ": request order differs from the feature table; re-run 'detect'");
    }
    d.result.labels[i] = rows[i].second;
    d.result.n_clusters = std::max(d.result.n_clusters, rows[i].second + 1);
  }
  return d;
}

struct StoredClustering {
  std::vector<std::size_t> clusters;  // per outlier, row order
  std::size_t n_clusters{0};
  std::vector<std::pair<std::size_t, double>> curve;
};

inline void write_clustering(const fs::path& dir, const FeatureTable& t, const DetectionResult& det,
                             const StoredClustering& c) {
  const auto idx = det.outlier_indices();
  detail::write_file(dir / files::clusters, [&](std::ostream& f) {
    f << "request_id\tcluster_id\n";
    for (std::size_t j = 0; j < idx.size(); ++j) f << t.requests[idx[j]].window.request_id << '\t' << c.clusters[j] << '\n';
  });
  detail::write_file(dir / files::inertia, [&](std::ostream& f) {
    f << "k\tinertia\n";
    for (const auto& [k, v] : c.curve) f << k << '\t' << exact_double(v) << '\n';
  });
}

inline StoredClustering load_clustering(const fs::path& dir, const FeatureTable& t, const DetectionResult& det) {
  StoredClustering c;
  const auto idx = det.outlier_indices();
  {
    auto f = detail::open_stage_input(dir, files::clusters, "cluster");
    const fs::path p = dir / files::clusters;
    std::size_t j = 0;
    detail::for_each_row(f, '\t', [&](const auto& col, std::size_t ln) {
      std::size_t k = 0;
      if (col.size() != 2 || !parse_int(col[1], k)) throw InputError(p.string() + ":" + std::to_string(ln) + ": malformed row");
      if (j >= idx.size() || detail::parse_id(col[0], ln, p) != t.requests[idx[j]].window.request_id) {
        throw InputError(p.string() + ": clusters do not match labels.tsv; re-run 'cluster'");
      }
      c.clusters.push_back(k);
      c.n_clusters = std::max(c.n_clusters, k + 1);
      ++j;
    });
    if (j != idx.size()) throw InputError(p.string() + ": clusters do not match labels.tsv; re-run 'cluster'");
  }
  {
    auto f = detail::open_stage_input(dir, files::inertia, "cluster");
    const fs::path p = dir / files::inertia;
    detail::for_each_row(f, '\t', [&](const auto& col, std::size_t ln) {
      std::size_t k = 0;
      if (col.size() != 2 || !parse_int(col[0], k)) throw InputError(p.string() + ":" + std::to_string(ln) + ": malformed row");
      c.curve.emplace_back(k, detail::parse_double(col[1], ln, p));
    });
  }
  return c;
}

// ----------------------------------------------------------------------------
// Ground-truth evaluation
// ----------------------------------------------------------------------------

inline Evaluation evaluate(const FeatureTable& t, const DetectionResult& det, std::span<const std::size_t> clusters,
                           std::size_t n_clusters, const std::map<RequestId, RequestLabel>& truth) {
  Evaluation e;
  const auto label_of = [&](std::size_t row) {
    const auto it = truth.find(t.requests[row].window.request_id);
    if (it == truth.end()) throw InputError("ground truth lacks request " + std::to_string(t.requests[row].window.request_id));
    return it->second;
  };
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool anomalous = label_of(i) != RequestLabel::normal;
    e.anomalies += anomalous ? 1 : 0;
    if (anomalous && det.is_outlier(i)) ++e.true_positives;
  }
  const auto idx = det.outlier_indices();
  e.recall = e.anomalies ? static_cast<double>(e.true_positives) / static_cast<double>(e.anomalies) : 0.0;
  e.precision = idx.empty() ? 0.0 : static_cast<double>(e.true_positives) / static_cast<double>(idx.size());
  if (!idx.empty() && clusters.size() == idx.size() && n_clusters > 0) {
    std::vector<std::array<std::size_t, kRequestLabelNames.size()>> tab(n_clusters, std::array<std::size_t, kRequestLabelNames.size()>{});
    for (std::size_t j = 0; j < idx.size(); ++j) ++tab[clusters[j]][static_cast<std::size_t>(label_of(idx[j]))];
    std::size_t majority = 0;
    for (const auto& row : tab) majority += *std::max_element(row.begin(), row.end());
    e.purity = static_cast<double>(majority) / static_cast<double>(idx.size());
  }
  return e;
}

// ----------------------------------------------------------------------------
// Stages. Each throws on error; run_stage maps exceptions to exit codes.
// ----------------------------------------------------------------------------

inline void stage_generate(const PipelineConfig& cfg, std::ostream& err) {
  if (cfg.out.empty()) throw ConfigError("generate needs --out FILE");
  if (cfg.out.has_parent_path()) detail::ensure_dir(cfg.out.parent_path());
  WorkloadConfig w = cfg.workload;
  w.seed = cfg.seed;
  GenerationResult result;
  detail::write_file(cfg.out, [&](std::ostream& f) { result = generate(w, f); });
  if (cfg.truth) {
    if (cfg.truth->has_parent_path()) detail::ensure_dir(cfg.truth->parent_path());
    detail::write_file(*cfg.truth, [&](std::ostream& f) { result.truth.write(f); });
  }
  err << "generate: " << result.truth.requests.size() << " requests, " << result.emitted_events << " events\n";
}

inline void stage_extract(const PipelineConfig& cfg, std::ostream& err) {
  if (cfg.in.empty()) throw ConfigError("extract needs --in TRACE");
  if (cfg.out.empty()) throw ConfigError("extract needs --out DIR");
  std::ifstream in(cfg.in, std::ios::binary);
  if (!in) throw InputError("cannot read trace " + cfg.in.string());
  Diagnostics diag;
  const Trace trace = parse_trace(in, &diag);
  auto seg = segment_requests(trace);
  diag.append(seg.diagnostics);
  const TraceTimeline tl(trace);
  detail::ensure_dir(cfg.out);
  ExtractOptions opts;
  opts.threads = cfg.threads;
  std::ofstream dump;
  if (cfg.dump_paths) {
    dump.open(cfg.out / files::paths, std::ios::binary);
    if (!dump) throw InputError("cannot write " + (cfg.out / files::paths).string());
    dump << "request_id\tthread\tstate\tstart\tend\n";
    opts.path_dump = &dump;
  }
  auto ex = extract_features(tl, seg.windows, opts);
  diag.append(ex.diagnostics);
  write_features(cfg.out, ex.table);
  detail::print_diagnostics(diag, err, "extract");
  err << "extract: " << ex.table.size() << " requests\n";
}

inline void stage_detect(const PipelineConfig& cfg, std::ostream& err) {
  const fs::path in = cfg.in.empty() ? cfg.out : cfg.in;
  const fs::path out = cfg.out.empty() ? in : cfg.out;
  const FeatureTable t = load_features(in);
  StoredDetection d{cfg.feature_set, cfg.dbscan(), cfg.standardize, {}};
  d.result = detect_outliers(t, d.feature_set, d.params, d.standardized, cfg.threads);
  std::vector<RequestId> ids;
  for (const auto& r : t.requests) ids.push_back(r.window.request_id);
  detail::ensure_dir(out);
  write_detection(out, ids, d);
  err << "detect: " << d.result.outlier_count() << " outliers among " << t.size() << " requests (" << to_string(d.feature_set)
      << ", epsilon " << fmt6(d.params.epsilon) << ")\n";
}

inline void stage_cluster(const PipelineConfig& cfg, std::ostream& err) {
  const fs::path in = cfg.in.empty() ? cfg.out : cfg.in;
  const fs::path out = cfg.out.empty() ? in : cfg.out;
  const FeatureTable t = load_features(in);
  const auto det = load_detection(in, t);
  const auto idx = det.result.outlier_indices();
  KMeansParams params;
  params.seed = cfg.seed;
  auto oc = cluster_outliers(t.count_matrix().select_rows(idx), cfg.k_min, cfg.k_max, params, cfg.k);
  detail::print_diagnostics(oc.diagnostics, err, "cluster");
  StoredClustering c{oc.assignments, idx.empty() ? 0 : oc.chosen_k, oc.curve};
  detail::ensure_dir(out);
  write_clustering(out, t, det.result, c);
  err << "cluster: " << idx.size() << " outliers in " << c.n_clusters << " clusters\n";
}

inline void stage_report(const PipelineConfig& cfg, std::ostream& err) {
  const fs::path in = cfg.in.empty() ? cfg.out : cfg.in;
  const fs::path out = cfg.out.empty() ? in / "report" : cfg.out;
  const FeatureTable t = load_features(in);
  const auto det = load_detection(in, t);
  const auto cl = load_clustering(in, t, det.result);
  ReportInputs ri;
  ri.table = &t;
  ri.feature_set = det.feature_set;
  ri.params = det.params;
  ri.standardized = det.standardized;
  ri.detection = det.result;
  ri.clusters = cl.clusters;
  ri.n_clusters = cl.n_clusters;
  ri.inertia_curve = cl.curve;
  ri.n_neighbors = cfg.n_neighbors;
  ri.projection_cap = cfg.projection_cap;
  ri.top_k = cfg.top_k;
  ri.threads = cfg.threads;
  if (cfg.compare_representations) {
    const auto dur = t.total_ms();
    for (std::size_t f = 0; f < kFeatureSetNames.size(); ++f) {
      RepresentationRow row;
      row.feature_set = static_cast<FeatureSet>(f);
      row.params = row.feature_set == det.feature_set ? det.params : DbscanParams{default_epsilon(row.feature_set), det.params.min_points};
      const bool z = row.feature_set == det.feature_set && det.standardized;
      const auto r = row.feature_set == det.feature_set ? det.result : detect_outliers(t, row.feature_set, row.params, z, cfg.threads);
      row.stats = outlier_stats(dur, r);
      ri.representations.push_back(row);
    }
  }
  if (cfg.truth) {
    std::ifstream tf(*cfg.truth, std::ios::binary);
    if (!tf) throw InputError("cannot read ground truth " + cfg.truth->string());
    ri.evaluation = evaluate(t, det.result, cl.clusters, cl.n_clusters, GroundTruth::read(tf).labels());
  }
  const auto data = emit_report(out, ri);
  detail::print_diagnostics(data.diagnostics, err, "report");
  err << "report: written to " << out.string() << '\n';
}

// generate (unless --in names a trace) -> extract -> detect -> cluster ->
// report, every stage reading its predecessor's files from --out.
inline void stage_all(const PipelineConfig& cfg, std::ostream& err) {
  if (cfg.out.empty()) throw ConfigError("all needs --out DIR");
  detail::ensure_dir(cfg.out);
  PipelineConfig c = cfg;
  fs::path trace = cfg.in;
  if (trace.empty()) {
    trace = cfg.out / files::trace;
    c.out = trace;
    if (!c.truth) c.truth = cfg.out / files::truth;
    stage_generate(c, err);
  }
  c.in = trace;
  c.out = cfg.out;
  stage_extract(c, err);
  c.in = cfg.out;
  stage_detect(c, err);
  stage_cluster(c, err);
  c.out = cfg.out / "report";
  stage_report(c, err);
}

enum ExitCode : int { kExitOk = 0, kExitInput = 1, kExitInvariant = 2 };

template <typename Stage>
int run_stage(Stage&& stage, const PipelineConfig& cfg, std::ostream& err) {
  try {
    stage(cfg, err);
    return kExitOk;
  } catch (const InvariantError& e) {
    err << "error: invariant violated: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

inline int run_generate(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_generate, c, err); }
inline int run_extract(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_extract, c, err); }
inline int run_detect(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_detect, c, err); }
inline int run_cluster(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_cluster, c, err); }
inline int run_report(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_report, c, err); }
inline int run_all(const PipelineConfig& c, std::ostream& err = std::cerr) { return run_stage(stage_all, c, err); }

}  // namespace reqdiag
