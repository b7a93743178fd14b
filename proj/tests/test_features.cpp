#include <gtest/gtest.h>

#include <charconv>
#include <numeric>

#include "oracles.hpp"
#include "reqdiag/features.hpp"
#include "reqdiag/workload_sim.hpp"

using namespace reqdiag;

namespace {

CriticalPath path_of(std::initializer_list<std::tuple<ExecState, Timestamp, Timestamp>> segs, ThreadId tid = 1) {
  CriticalPath p;
  for (auto [s, a, b] : segs) p.segments.push_back({tid, s, a, b, {}});
  return p;
}

constexpr Timestamp ms(double v) { return static_cast<Timestamp>(v * 1e6); }

std::uint64_t runs_minus(const SyscallSequence& seq, std::string_view tok, std::size_t n) {
  std::uint64_t total = 0;
  std::size_t run = 0;
  for (std::size_t i = 0; i <= seq.size(); ++i) {
    if (i < seq.size() && seq[i] == tok) {
      ++run;
      continue;
    }
    if (run >= n) total += run - n + 1;
    run = 0;
  }
  return total;
}

}  // namespace

TEST(StateCounts, SingleRunning) {
  const auto c = state_counts(path_of({{ExecState::RU, 0, 10}}));
  EXPECT_EQ(c, (StateCountVector{0, 1, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(StateCounts, OnePerDistinctState) {
  const auto c = state_counts(path_of({{ExecState::RU, 0, 1},
                                       {ExecState::RS, 1, 2},
                                       {ExecState::BD, 2, 3},
                                       {ExecState::BT, 3, 4},
                                       {ExecState::BP, 4, 5}}));
  EXPECT_EQ(c, (StateCountVector{1, 1, 1, 0, 1, 1, 0, 0, 0}));
}

TEST(StateCounts, RepeatedStatesCounted) {
  const auto c = state_counts(
      path_of({{ExecState::RU, 0, 1}, {ExecState::RS, 1, 2}, {ExecState::RU, 2, 3}, {ExecState::RS, 3, 4}}));
  EXPECT_EQ(c[index_of(ExecState::RU)], 2u);
  EXPECT_EQ(c[index_of(ExecState::RS)], 2u);
}

TEST(StateDurations, SingleSegment) {
  const auto d = state_durations(path_of({{ExecState::RU, 0, ms(5)}}));
  StateDurationVector e{};
  e[index_of(ExecState::RU)] = 5.0;
  e[kTotalTimeIndex] = 5.0;
  EXPECT_EQ(d, e);
}

TEST(StateDurations, Sums) {
  const auto d = state_durations(
      path_of({{ExecState::RS, 0, ms(1)}, {ExecState::RU, ms(1), ms(4)}, {ExecState::RS, ms(4), ms(6)}}));
  EXPECT_DOUBLE_EQ(d[index_of(ExecState::RS)], 3.0);
  EXPECT_DOUBLE_EQ(d[index_of(ExecState::RU)], 3.0);
  EXPECT_DOUBLE_EQ(d[kTotalTimeIndex], 6.0);
  EXPECT_EQ(d.size(), 10u);
}

TEST(SyscallSequence, NoSyscalls) {
  const Trace t = oracle::parse("0\t1\tsched_switch_in\n0\t1\trequest_start\treq=1\n9\t1\trequest_exit\treq=1\n");
  const TraceTimeline tl(t);
  const auto w = segment_requests(t).windows.at(0);
  EXPECT_TRUE(syscall_sequence(tl, critical_path_for(tl, w)).empty());
}

TEST(SyscallSequence, OpenReadClose) {
  const Trace t = oracle::parse(
      "0\t1\tsched_switch_in\n0\t1\trequest_start\treq=1\n"
      "1\t1\tsyscall_entry\tname=open\n2\t1\tsyscall_exit\tname=open\n"
      "3\t1\tsyscall_entry\tname=read\n4\t1\tsyscall_exit\tname=read\n"
      "5\t1\tsyscall_entry\tname=close\n6\t1\tsyscall_exit\tname=close\n"
      "9\t1\trequest_exit\treq=1\n");
  const TraceTimeline tl(t);
  const auto w = segment_requests(t).windows.at(0);
  EXPECT_EQ(syscall_sequence(tl, critical_path_for(tl, w)), (SyscallSequence{"open", "read", "close"}));
}

TEST(SyscallSequence, OffPathSyscallsExcluded) {
  // Thread 2 issues a syscall while thread 1, which is not waiting on it, runs.
  const Trace t = oracle::parse(
      "0\t1\tsched_switch_in\n0\t2\tsched_switch_in\n0\t1\trequest_start\treq=1\n"
      "1\t2\tsyscall_entry\tname=write\n2\t2\tsyscall_exit\tname=write\n"
      "3\t1\tsyscall_entry\tname=read\n4\t1\tsyscall_exit\tname=read\n"
      "9\t1\trequest_exit\treq=1\n");
  const TraceTimeline tl(t);
  const auto w = segment_requests(t).windows.at(0);
  EXPECT_EQ(syscall_sequence(tl, critical_path_for(tl, w)), (SyscallSequence{"read"}));
}

TEST(Bow, Counts) {
  EXPECT_EQ(bow({"a", "b", "a"}), (SyscallBoW{{"a", 2}, {"b", 1}}));
  EXPECT_TRUE(bow({}).empty());
}

TEST(Vectorize, SortedVocabulary) {
  const std::vector<SyscallBoW> docs{{{"b", 1}}, {{"a", 1}}};
  const auto v = vectorize(docs);
  EXPECT_EQ(v.vocabulary, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(v.counts.rows(), 2u);
  EXPECT_EQ(v.counts(0, 0), 0.0);
  EXPECT_EQ(v.counts(0, 1), 1.0);
  EXPECT_EQ(v.counts(1, 0), 1.0);
  EXPECT_EQ(v.counts(1, 1), 0.0);
}

TEST(Vectorize, TwoDocsIdentity) {
  const std::vector<SyscallBoW> docs{{{"a", 1}}, {{"b", 1}}};
  const auto v = vectorize(docs);
  EXPECT_EQ(v.vocabulary, (std::vector<std::string>{"a", "b"}));
  Matrix id(2, 2);
  id(0, 0) = id(1, 1) = 1.0;
  EXPECT_EQ(v.counts, id);
}

TEST(Vectorize, EmptyDocumentGivesZeroRow) {
  const std::vector<SyscallBoW> docs{{{"a", 3}}, {}};
  const auto v = vectorize(docs);
  ASSERT_EQ(v.counts.rows(), 2u);
  EXPECT_EQ(v.counts(1, 0), 0.0);
}

TEST(TfIdf, UniversalTermIsZero) {
  Matrix tf(3, 2);
  tf(0, 0) = 1;
  tf(1, 0) = 5;
  tf(2, 0) = 2;
  tf(0, 1) = 4;
  const Matrix w = tfidf(tf);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(w(r, 0), 0.0);
  EXPECT_DOUBLE_EQ(w(0, 1), 4.0 * std::log(3.0));
}

TEST(TfIdf, HandComputed) {
  Matrix tf(2, 1);
  tf(0, 0) = 3;
  const Matrix w = tfidf(tf);
  EXPECT_NEAR(w(0, 0), 2.0794, 1e-4);
  EXPECT_DOUBLE_EQ(w(0, 0), 3.0 * std::log(2.0));
  EXPECT_EQ(w(1, 0), 0.0);
}

TEST(TfIdf, SingleDocumentAllZero) {
  Matrix tf(1, 3);
  tf(0, 0) = 2;
  tf(0, 2) = 7;
  const Matrix w = tfidf(tf);
  for (double v : w.data()) EXPECT_EQ(v, 0.0);
}

TEST(TfIdf, DocumentFrequencyCountsPresenceAndMatchesOracle) {
  KeyedRng rng(31, 0, 0);
  const std::vector<std::string> alphabet{"open", "read", "write", "close", "poll", "fcntl"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<std::string>> docs(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    std::vector<SyscallBoW> bows;
    for (auto& d : docs) {
      const auto len = rng.uniform_int(0, 15);
      for (std::int64_t i = 0; i < len; ++i) d.push_back(alphabet[static_cast<std::size_t>(rng.uniform_int(0, 5))]);
      bows.push_back(bow(d));
    }
    const auto v = vectorize(bows);
    const Matrix w = tfidf(v.counts);
    for (std::size_t r = 0; r < docs.size(); ++r) {
      const auto expect = oracle::tfidf_doc(docs, r);
      for (std::size_t c = 0; c < v.vocabulary.size(); ++c) {
        const auto it = expect.find(v.vocabulary[c]);
        const double e = it == expect.end() ? 0.0 : it->second;
        EXPECT_NEAR(w(r, c), e, 1e-12);
        EXPECT_GE(w(r, c), 0.0);
      }
    }
  }
}

TEST(NGrams, Bigrams) {
  const auto p = ngrams(SyscallSequence{"a", "b", "a"}, 2);
  EXPECT_EQ(p, (NGramProfile<std::string>{{{"a", "b"}, 1}, {{"b", "a"}, 1}}));
}

TEST(NGrams, ShorterThanOrder) {
  EXPECT_TRUE(ngrams(SyscallSequence{"a", "b"}, 3).empty());
  EXPECT_TRUE(ngrams(SyscallSequence{}, 1).empty());
}

TEST(NGrams, CountIdentity) {
  KeyedRng rng(4, 0, 0);
  for (int trial = 0; trial < 200; ++trial) {
    SyscallSequence s(static_cast<std::size_t>(rng.uniform_int(0, 30)));
    for (auto& x : s) x = rng.bernoulli(0.5) ? "x" : "y";
    for (std::size_t n = 1; n <= 3; ++n) {
      std::uint64_t total = 0;
      for (const auto& [g, c] : ngrams(s, n)) {
        total += c;
        EXPECT_EQ(g.size(), n);
      }
      EXPECT_EQ(total, s.size() >= n ? s.size() - n + 1 : 0u);
    }
    std::uint64_t bsum = 0;
    for (const auto& [t, c] : bow(s)) bsum += c;
    EXPECT_EQ(bsum, s.size());
  }
}

// ----------------------------------------------------------------------------
// Generator oracle
// ----------------------------------------------------------------------------

class GeneratedFeatures : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    WorkloadConfig cfg;
    cfg.seed = 91;
    cfg.n_requests = 1200;
    cfg.anomaly_rate = 0.1;
    auto [text, r] = generate_to_string(cfg, true);
    d = new Data{oracle::parse(text), {}, std::move(r), {}};
    d->windows = segment_requests(d->trace).windows;
    d->ex = extract_features(TraceTimeline(d->trace), d->windows);
  }
  static void TearDownTestSuite() { delete d; }
  struct Data {
    Trace trace;
    std::vector<RequestWindow> windows;
    GenerationResult gen;
    Extraction ex;
  };
  static Data* d;
  static const RequestPlan& plan(RequestId id) { return d->gen.plans.at(id - 1); }
};

GeneratedFeatures::Data* GeneratedFeatures::d = nullptr;

TEST_F(GeneratedFeatures, DurationsMatchPlanAndClose) {
  for (const auto& f : d->ex.table.requests) {
    const auto& p = plan(f.window.request_id);
    double sum = 0.0;
    for (std::size_t s = 0; s < kNumStates; ++s) {
      EXPECT_DOUBLE_EQ(f.durations[s], ns_to_ms(p.state_totals[s]));
      sum += f.durations[s];
    }
    EXPECT_DOUBLE_EQ(f.durations[kTotalTimeIndex], ns_to_ms(p.end - p.start));
    EXPECT_LE(std::abs(sum - f.durations[kTotalTimeIndex]), 1e-9 * f.durations[kTotalTimeIndex]);
  }
}

TEST_F(GeneratedFeatures, SequenceMatchesPlan) {
  for (const auto& f : d->ex.table.requests) {
    ASSERT_EQ(f.syscalls, plan(f.window.request_id).syscalls) << "request " << f.window.request_id;
  }
}

TEST_F(GeneratedFeatures, ConnectBlockHasConnectRun) {
  for (const auto& f : d->ex.table.requests) {
    const auto& p = plan(f.window.request_id);
    if (p.label != RequestLabel::connect_block) continue;
    EXPECT_GE(runs_minus(f.syscalls, "connect", p.connect_attempts), 1u);
  }
}

TEST_F(GeneratedFeatures, LockContentionCountsAndTrigrams) {
  const TraceTimeline tl(d->trace);
  std::size_t seen = 0;
  for (const auto& f : d->ex.table.requests) {
    const auto& p = plan(f.window.request_id);
    if (p.label != RequestLabel::lock_contention) continue;
    ++seen;
    // Every contention round blocks the app worker on the lock.
    std::size_t bf = 0;
    for (const auto& iv : derive_thread_intervals(tl, p.app, f.window)) bf += iv.state == ExecState::BF;
    EXPECT_GE(bf, p.contention_rounds);
    EXPECT_GE(f.counts[index_of(ExecState::RS)], p.contention_rounds);
    const auto tri = ngrams(f.syscalls, 3);
    const auto it = tri.find({"fcntl", "fcntl", "fcntl"});
    ASSERT_NE(it, tri.end());
    EXPECT_EQ(it->second, runs_minus(p.syscalls, "fcntl", 3));
  }
  EXPECT_GT(seen, 20u);
}

TEST_F(GeneratedFeatures, ThreadCountDoesNotChangeResults) {
  ExtractOptions o;
  o.threads = 3;
  const auto par = extract_features(TraceTimeline(d->trace), d->windows, o);
  ASSERT_EQ(par.table.size(), d->ex.table.size());
  for (std::size_t i = 0; i < par.table.size(); ++i) {
    EXPECT_EQ(par.table.requests[i].counts, d->ex.table.requests[i].counts);
    EXPECT_EQ(par.table.requests[i].durations, d->ex.table.requests[i].durations);
    EXPECT_EQ(par.table.requests[i].syscalls, d->ex.table.requests[i].syscalls);
  }
  EXPECT_EQ(par.diagnostics.warnings, d->ex.diagnostics.warnings);
}

TEST_F(GeneratedFeatures, PathDumpCoversEveryRequest) {
  std::ostringstream os;
  ExtractOptions o;
  o.path_dump = &os;
  const auto ex = extract_features(TraceTimeline(d->trace), std::span(d->windows).first(20), o);
  std::istringstream in(os.str());
  std::string line;
  std::set<std::string> ids;
  while (std::getline(in, line)) ids.insert(line.substr(0, line.find('\t')));
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_EQ(ex.paths.size(), 20u);
}

TEST_F(GeneratedFeatures, CsvExportRoundTripsExactly) {
  std::ostringstream os;
  write_duration_csv(os, d->ex.table);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "request_id,RS,RU,BD,BN,BP,BT,BF,BI,BS,TT");
  for (const auto& f : d->ex.table.requests) {
    ASSERT_TRUE(std::getline(in, line));
    const auto cells = split(line, ',');
    ASSERT_EQ(cells.size(), 11u);
    for (std::size_t c = 0; c < 10; ++c) {
      double v = 0.0;
      std::from_chars(cells[c + 1].data(), cells[c + 1].data() + cells[c + 1].size(), v);
      EXPECT_EQ(v, f.durations[c]);
    }
  }
}
