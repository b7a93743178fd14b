// reqdiag: request anomaly detection and diagnosis over kernel-style traces.

#include <CLI11.hpp>
#include <iostream>

#include "reqdiag/pipeline.hpp"

namespace {

using namespace reqdiag;

struct Flags {
  std::string in, out, truth, feature_set{"state_durations"}, k_range{"2-10"}, mix;
  std::uint64_t seed{42};
  std::size_t threads{0}, min_points{5}, n_neighbors{10}, requests{1000}, k{0};
  double epsilon{0.0}, anomaly_rate{0.01};
  bool standardize{false}, dump_paths{false}, no_compare{false};
};

PipelineConfig to_config(const Flags& f) {
  PipelineConfig c;
  c.in = f.in;
  c.out = f.out;
  if (!f.truth.empty()) c.truth = f.truth;
  c.seed = f.seed;
  c.threads = f.threads;
  c.feature_set = parse_feature_set(f.feature_set);
  if (f.epsilon > 0.0) c.epsilon = f.epsilon;
  c.min_points = f.min_points;
  if (f.k > 0) c.k = f.k;
  const auto dash = f.k_range.find('-');
  if (dash == std::string::npos || !parse_int(std::string_view(f.k_range).substr(0, dash), c.k_min) ||
      !parse_int(std::string_view(f.k_range).substr(dash + 1), c.k_max) || c.k_min < 1 || c.k_min > c.k_max) {
    throw ConfigError("--k-range expects LO-HI with 1 <= LO <= HI, got '" + f.k_range + "'");
  }
  c.n_neighbors = f.n_neighbors;
  c.standardize = f.standardize;
  c.dump_paths = f.dump_paths;
  c.compare_representations = !f.no_compare;
  c.workload.n_requests = f.requests;
  c.workload.anomaly_rate = f.anomaly_rate;
  if (!f.mix.empty()) {
    const auto parts = split(f.mix, ',');
    if (parts.size() != 3) throw ConfigError("--mix expects three comma-separated weights");
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      try {
        c.workload.anomaly_mix[i] = std::stod(std::string(parts[i]));
      } catch (const std::exception&) {
        throw ConfigError("--mix: bad weight '" + std::string(parts[i]) + "'");
      }
      sum += c.workload.anomaly_mix[i];
    }
    if (!(sum > 0.0)) throw ConfigError("--mix weights must have a positive sum");
    for (auto& w : c.workload.anomaly_mix) w /= sum;
  }
  c.workload.seed = f.seed;
  return c;
}

void add_common(CLI::App* s, Flags& f) {
  s->add_option("--in", f.in, "Input: trace file (extract, all) or stage directory (detect, cluster, report)");
  s->add_option("--out", f.out, "Output file (generate) or directory (other stages)");
  s->add_option("--seed", f.seed, "Seed for generation and k-means")->capture_default_str();
  s->add_option("--threads", f.threads, "Worker threads, 0 = all cores")->capture_default_str();
  s->add_option("--feature-set", f.feature_set,
                "syscall_bow | syscall_tfidf | state_counts_bow | state_counts_tfidf | state_durations")
      ->capture_default_str();
  s->add_option("--epsilon", f.epsilon, "DBSCAN radius (default depends on the feature set; 50 ms for durations)");
  s->add_option("--min-points", f.min_points, "DBSCAN minimum neighborhood size")->capture_default_str();
  s->add_option("--k", f.k, "Force the number of outlier clusters (overrides the elbow)");
  s->add_option("--k-range", f.k_range, "Elbow search range LO-HI")->capture_default_str();
  s->add_option("--n-neighbors", f.n_neighbors, "Isomap neighborhood size")->capture_default_str();
  s->add_flag("--standardize", f.standardize, "Standardize features before DBSCAN");
}

void add_generation(CLI::App* s, Flags& f) {
  s->add_option("--requests", f.requests, "Number of requests to simulate")->capture_default_str();
  s->add_option("--anomaly-rate", f.anomaly_rate, "Fraction of requests with an injected fault")->capture_default_str();
  s->add_option("--mix", f.mix, "Fault mix write_storm,connect_block,lock_contention (default equal)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Request anomaly detection and diagnosis over execution traces"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("generate", "Simulate a multi-tier workload and write its trace");
  add_common(gen, f);
  add_generation(gen, f);
  gen->add_option("--truth", f.truth, "Write ground-truth labels (request_id<TAB>label) here");

  auto* ext = app.add_subcommand("extract", "Segment requests, extract critical paths and features");
  add_common(ext, f);
  ext->add_flag("--dump-paths", f.dump_paths, "Also write every critical path to paths.tsv");

  auto* det = app.add_subcommand("detect", "Flag outlying requests with DBSCAN");
  add_common(det, f);

  auto* clu = app.add_subcommand("cluster", "Group outliers with k-means on standardized state counts");
  add_common(clu, f);

  auto* rep = app.add_subcommand("report", "Write the diagnostic report bundle");
  add_common(rep, f);
  rep->add_option("--truth", f.truth, "Ground-truth labels for recall, precision and purity");
  rep->add_flag("--no-compare", f.no_compare, "Skip re-running detection on every representation");

  auto* all = app.add_subcommand("all", "Run every stage; generates a trace unless --in is given");
  add_common(all, f);
  add_generation(all, f);
  all->add_option("--truth", f.truth, "Ground-truth labels (defaults to the generated ones)");
  all->add_flag("--dump-paths", f.dump_paths, "Also write every critical path to paths.tsv");
  all->add_flag("--no-compare", f.no_compare, "Skip re-running detection on every representation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  PipelineConfig cfg;
  try {
    cfg = to_config(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  if (gen->parsed()) return run_generate(cfg);
  if (ext->parsed()) return run_extract(cfg);
  if (det->parsed()) return run_detect(cfg);
  if (clu->parsed()) return run_cluster(cfg);
  if (rep->parsed()) return run_report(cfg);
  return run_all(cfg);
}
