#pragma once

#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "critical_path.hpp"

namespace reqdiag {

using StateCountVector = std::array<std::uint64_t, kNumStates>;

// Nine per-state totals in milliseconds followed by total request time.
using StateDurationVector = std::array<double, kNumStates + 1>;

inline constexpr std::size_t kTotalTimeIndex = kNumStates;

using SyscallSequence = std::vector<std::string>;
using SyscallBoW = std::map<std::string, std::uint64_t>;

inline StateCountVector state_counts(const CriticalPath& path) {
  StateCountVector c{};
  for (const auto& s : path.segments) ++c[index_of(s.state)];
  return c;
}

inline std::array<Duration, kNumStates> state_totals_ns(const CriticalPath& path) {
  std::array<Duration, kNumStates> t{};
  for (const auto& s : path.segments) t[index_of(s.state)] += s.duration();
  return t;
}

inline StateDurationVector state_durations(const CriticalPath& path) {
  StateDurationVector v{};
  if (path.segments.empty()) return v;
  const auto totals = state_totals_ns(path);
  for (std::size_t i = 0; i < kNumStates; ++i) v[i] = ns_to_ms(totals[i]);
  v[kTotalTimeIndex] = ns_to_ms(path.segments.back().end - path.segments.front().start);
  return v;
}

// Syscalls entered by each path thread while it was on the path, in time
// order. A syscall belongs to the segment containing its entry timestamp.
inline SyscallSequence syscall_sequence(const TraceTimeline& tl, const CriticalPath& path) {
  SyscallSequence out;
  const auto& trace = tl.trace();
  const auto& ev = trace.events();
  for (const auto& seg : path.segments) {
    const auto idx = trace.thread_events(seg.thread);
    for (std::size_t k = tl.lower_bound(seg.thread, seg.start); k < idx.size(); ++k) {
      const auto& e = ev[idx[k]];
      if (e.ts >= seg.end) break;
      if (e.kind == EventKind::syscall_entry) out.push_back(trace.syscall_name(e));
    }
  }
  return out;
}

template <typename Token>
std::map<Token, std::uint64_t> bag_of_words(std::span<const Token> seq) {
  std::map<Token, std::uint64_t> out;
  for (const auto& t : seq) ++out[t];
  return out;
}

inline SyscallBoW bow(const SyscallSequence& seq) { return bag_of_words<std::string>(seq); }

struct Vectorized {
  Matrix counts;
  std::vector<std::string> vocabulary;  // sorted lexicographically
};

// Dense document-term matrix over the corpus vocabulary.
inline Vectorized vectorize(std::span<const SyscallBoW> corpus) {
  std::set<std::string> vocab;
  for (const auto& doc : corpus) {
    for (const auto& [term, n] : doc) vocab.insert(term);
  }
  Vectorized out;
  out.vocabulary.assign(vocab.begin(), vocab.end());
  std::map<std::string_view, std::size_t> column;
  for (std::size_t i = 0; i < out.vocabulary.size(); ++i) column.emplace(out.vocabulary[i], i);
  out.counts = Matrix(corpus.size(), out.vocabulary.size());
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    for (const auto& [term, n] : corpus[r]) out.counts(r, column.at(term)) = static_cast<double>(n);
  }
  return out;
}

// tf-idf(i,j) = tf(i,j) * ln(|D| / df(i)), df counting documents that contain
// the term at least once. Terms present in every document weigh exactly 0.
inline Matrix tfidf(const Matrix& tf) {
  const std::size_t docs = tf.rows();
  Matrix out(docs, tf.cols());
  for (std::size_t c = 0; c < tf.cols(); ++c) {
    std::size_t df = 0;
    for (std::size_t r = 0; r < docs; ++r) df += tf(r, c) > 0.0 ? 1 : 0;
    if (df == 0 || df == docs) continue;
    const double idf = std::log(static_cast<double>(docs) / static_cast<double>(df));
    for (std::size_t r = 0; r < docs; ++r) out(r, c) = tf(r, c) * idf;
  }
  return out;
}

template <typename Token>
using NGramProfile = std::map<std::vector<Token>, std::uint64_t>;

template <typename Token>
NGramProfile<Token> ngrams(std::span<const Token> seq, std::size_t n) {
  NGramProfile<Token> out;
  if (n == 0 || seq.size() < n) return out;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++out[std::vector<Token>(seq.begin() + i, seq.begin() + i + n)];
  return out;
}

inline NGramProfile<std::string> ngrams(const SyscallSequence& seq, std::size_t n) {
  return ngrams<std::string>(std::span<const std::string>{seq}, n);
}

// ----------------------------------------------------------------------------
// Per-request feature table
// ----------------------------------------------------------------------------

struct RequestFeatures {
  RequestWindow window;
  StateCountVector counts{};
  StateDurationVector durations{};
  SyscallSequence syscalls;
};

struct FeatureTable {
  std::vector<RequestFeatures> requests;

  std::size_t size() const noexcept { return requests.size(); }

  Matrix count_matrix() const {
    Matrix m(size(), kNumStates);
    for (std::size_t r = 0; r < size(); ++r) {
      for (std::size_t c = 0; c < kNumStates; ++c) m(r, c) = static_cast<double>(requests[r].counts[c]);
    }
    return m;
  }

  Matrix duration_matrix() const {
    Matrix m(size(), kNumStates + 1);
    for (std::size_t r = 0; r < size(); ++r) std::copy(requests[r].durations.begin(), requests[r].durations.end(), m.row(r).begin());
    return m;
  }

  Vectorized syscall_matrix() const {
    std::vector<SyscallBoW> docs;
    docs.reserve(size());
    for (const auto& r : requests) docs.push_back(bow(r.syscalls));
    return vectorize(docs);
  }

  std::vector<double> total_ms() const {
    std::vector<double> out;
    out.reserve(size());
    for (const auto& r : requests) out.push_back(r.durations[kTotalTimeIndex]);
    return out;
  }
};

struct ExtractOptions {
  PathParams path{};
  std::size_t threads{1};
  std::ostream* path_dump{nullptr};
};

struct Extraction {
  FeatureTable table;
  std::vector<CriticalPath> paths;  // only kept when a dump stream is given
  Diagnostics diagnostics;
};

// Critical path and features for every window. Per-request work is
// independent and runs in parallel; output order follows `windows`.
inline Extraction extract_features(const TraceTimeline& tl, std::span<const RequestWindow> windows,
                                   const ExtractOptions& opts = {}) {
  Extraction out;
  out.table.requests.resize(windows.size());
  std::vector<Diagnostics> diags(windows.size());
  std::vector<CriticalPath> paths(opts.path_dump ? windows.size() : 0);
  parallel_for(windows.size(), opts.threads, [&](std::size_t i) {
    const auto& w = windows[i];
    CriticalPath p = critical_path_for(tl, w, opts.path, &diags[i]);
    auto& f = out.table.requests[i];
    f.window = w;
    f.counts = state_counts(p);
    f.durations = state_durations(p);
    f.syscalls = syscall_sequence(tl, p);
    if (opts.path_dump) paths[i] = std::move(p);
  });
  for (const auto& d : diags) out.diagnostics.append(d);
  if (opts.path_dump) {
    for (const auto& p : paths) write_path_dump(*opts.path_dump, p);
    out.paths = std::move(paths);
  }
  return out;
}

// ----------------------------------------------------------------------------
// Text export
// ----------------------------------------------------------------------------

// Shortest representation that parses back to the same double.
inline std::string exact_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, p};
}

inline void write_count_csv(std::ostream& out, const FeatureTable& t) {
  out << "request_id";
  for (auto n : kExecStateNames) out << ',' << n;
  out << '\n';
  for (const auto& r : t.requests) {
    out << r.window.request_id;
    for (auto c : r.counts) out << ',' << c;
    out << '\n';
  }
}

inline void write_duration_csv(std::ostream& out, const FeatureTable& t) {
  out << "request_id";
  for (auto n : kExecStateNames) out << ',' << n;
  out << ",TT\n";
  for (const auto& r : t.requests) {
    out << r.window.request_id;
    for (auto d : r.durations) out << ',' << exact_double(d);
    out << '\n';
  }
}

inline void write_bow_csv(std::ostream& out, const FeatureTable& t, const Vectorized& v) {
  out << "request_id";
  for (const auto& term : v.vocabulary) out << ',' << term;
  out << '\n';
  for (std::size_t r = 0; r < t.size(); ++r) {
    out << t.requests[r].window.request_id;
    for (double c : v.counts.row(r)) out << ',' << static_cast<std::uint64_t>(c);
    out << '\n';
  }
}

}  // namespace reqdiag
