#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "reqdiag/workload_sim.hpp"

using namespace reqdiag;

TEST(ParseTrace, EmptyStream) {
  const Trace t = oracle::parse("");
  EXPECT_EQ(t.size(), 0u);
  EXPECT_TRUE(t.thread_index().empty());
}

TEST(ParseTrace, CommentsAndBlankLinesIgnored) {
  const Trace t = oracle::parse("# header\n\n10\t1\trequest_start\treq=1\n# trailer\n");
  EXPECT_EQ(t.size(), 1u);
}

TEST(ParseTrace, SingleRequestStart) {
  const Trace t = oracle::parse("10\t7\trequest_start\treq=3\n");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.thread_index().size(), 1u);
  const auto& e = t.events()[0];
  EXPECT_EQ(e.ts, 10);
  EXPECT_EQ(e.thread, 7u);
  EXPECT_EQ(e.kind, EventKind::request_start);
  EXPECT_EQ(e.request_id(), 3u);
}

TEST(ParseTrace, EveryPayloadKind) {
  const Trace t = oracle::parse(
      "1\t1\tsyscall_entry\tname=open\n"
      "2\t1\tsyscall_exit\tname=open\n"
      "3\t1\tsched_wakeup\twakee=2\n"
      "4\t1\tblock_begin\treason=futex\n"
      "4\t1\tsched_switch_out\n"
      "5\t1\tblock_end\treason=futex\n"
      "5\t1\tsched_switch_in\n");
  ASSERT_EQ(t.size(), 7u);
  EXPECT_EQ(t.syscall_name(t.events()[0]), "open");
  EXPECT_EQ(t.events()[2].wakee(), 2u);
  EXPECT_EQ(t.events()[3].reason(), BlockingReason::futex);
}

TEST(ParseTrace, CarriageReturnsTolerated) {
  EXPECT_EQ(oracle::parse("1\t1\tsched_switch_in\r\n").size(), 1u);
}

TEST(ParseTrace, MalformedRecordsReportLine) {
  const std::vector<std::string> bad{
      "x\t1\tsched_switch_in\n",             // timestamp
      "1\tq\tsched_switch_in\n",             // thread
      "1\t1\tjump\n",                        // kind
      "1\t1\tsched_switch_in\textra=1\n",    // payload on a payload-free kind
      "1\t1\trequest_start\n",               // missing payload
      "1\t1\trequest_start\tname=1\n",       // wrong key
      "1\t1\tblock_begin\treason=coffee\n",  // reason
      "1\t1\tsched_wakeup\twakee=1\n",       // waker == wakee
      "1\t1\tsyscall_entry\tname=\n",        // empty name
      "-5\t1\tsched_switch_in\n",            // negative
      "1\t1\n",                              // too few fields
  };
  for (const auto& line : bad) {
    try {
      oracle::parse("# ok\n" + line);
      ADD_FAILURE() << "accepted: " << line;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 2u) << line;
    }
  }
}

TEST(ParseTrace, TimestampRegressionWithinThreadRejected) {
  EXPECT_THROW(oracle::parse("10\t1\tsched_switch_in\n5\t1\tsched_switch_out\n"), ParseError);
  // Different threads may interleave freely.
  const Trace t = oracle::parse("10\t1\tsched_switch_in\n5\t2\tsched_switch_in\n");
  EXPECT_EQ(t.events()[0].ts, 5);  // globally time-ordered
}

TEST(ParseTrace, EqualTimestampsKeepFileOrder) {
  const Trace t = oracle::parse("5\t2\tsched_switch_out\n5\t1\tsched_switch_in\n5\t3\tsched_switch_in\n");
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t.events()[0].thread, 2u);
  EXPECT_EQ(t.events()[1].thread, 1u);
  EXPECT_EQ(t.events()[2].thread, 3u);
}

TEST(ParseTrace, UnbalancedExitDroppedWithWarning) {
  Diagnostics d;
  const Trace t = oracle::parse("1\t1\tsyscall_exit\tname=read\n", &d);
  EXPECT_EQ(t.size(), 0u);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("thread 1"), std::string::npos);
}

TEST(ParseTrace, OpenSyscallClosedAtRequestExit) {
  Diagnostics d;
  const Trace t = oracle::parse(
      "1\t4\trequest_start\treq=1\n"
      "2\t4\tsyscall_entry\tname=read\n"
      "9\t4\trequest_exit\treq=1\n",
      &d);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t.events()[2].kind, EventKind::syscall_exit);
  EXPECT_EQ(t.events()[2].ts, 9);
  EXPECT_EQ(t.events()[3].kind, EventKind::request_exit);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("thread 4"), std::string::npos);
}

TEST(ParseTrace, OpenSyscallClosedAtTraceEnd) {
  Diagnostics d;
  const Trace t = oracle::parse("3\t2\tsyscall_entry\tname=poll\n7\t2\tsched_switch_out\n", &d);
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t.events().back().kind, EventKind::syscall_exit);
  EXPECT_EQ(t.events().back().ts, 7);
  EXPECT_EQ(d.warnings.size(), 1u);
}

TEST(ParseTrace, ThreadIndexConsistent) {
  auto [text, gen] = generate_to_string(WorkloadConfig{.seed = 3, .n_requests = 20});
  const Trace t = oracle::parse(text);
  std::size_t total = 0;
  for (const auto& [tid, idx] : t.thread_index()) {
    total += idx.size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      EXPECT_EQ(t.events()[idx[k]].thread, tid);
      if (k) {
        EXPECT_LT(idx[k - 1], idx[k]);
      }
    }
  }
  EXPECT_EQ(total, t.size());
}

TEST(ParseTrace, EventCountMatchesGeneratorCounter) {
  WorkloadConfig cfg;
  cfg.n_requests = 100;
  auto [text, gen] = generate_to_string(cfg);
  EXPECT_EQ(oracle::parse(text).size(), gen.emitted_events);
}

TEST(ParseTrace, RoundTripIsIdentity) {
  auto [text, gen] = generate_to_string(WorkloadConfig{.seed = 9, .n_requests = 50, .anomaly_rate = 0.2});
  const Trace a = oracle::parse(text);
  std::ostringstream os;
  serialize_trace(a, os);
  const Trace b = oracle::parse(os.str());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.events()[i];
    const auto& y = b.events()[i];
    ASSERT_EQ(x.ts, y.ts);
    ASSERT_EQ(x.thread, y.thread);
    ASSERT_EQ(x.kind, y.kind);
    if (x.is_syscall()) {
      ASSERT_EQ(a.syscall_name(x), b.syscall_name(y));
    } else {
      ASSERT_EQ(x.arg, y.arg);
    }
  }
  // Serialization of a generator trace reproduces it byte for byte.
  const auto body = text.substr(text.find('\n') + 1);
  EXPECT_EQ(os.str(), body);
}

TEST(BlockingReason, SevenReasonsMapOneToOne) {
  std::set<ExecState> seen;
  for (std::size_t i = 0; i < kBlockingReasonNames.size(); ++i) {
    const auto r = static_cast<BlockingReason>(i);
    EXPECT_EQ(parse_blocking_reason(kBlockingReasonNames[i]), r);
    seen.insert(blocked_state(r));
    EXPECT_TRUE(is_blocked(blocked_state(r)));
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(blocked_state(BlockingReason::disk), ExecState::BD);
  EXPECT_EQ(blocked_state(BlockingReason::network), ExecState::BN);
  EXPECT_EQ(blocked_state(BlockingReason::preempted), ExecState::BP);
  EXPECT_EQ(blocked_state(BlockingReason::task), ExecState::BT);
  EXPECT_EQ(blocked_state(BlockingReason::futex), ExecState::BF);
  EXPECT_EQ(blocked_state(BlockingReason::interrupt), ExecState::BI);
  EXPECT_EQ(blocked_state(BlockingReason::timer), ExecState::BS);
}

// ----------------------------------------------------------------------------
// Segmentation
// ----------------------------------------------------------------------------

TEST(SegmentRequests, SimplePair) {
  const auto s = segment_requests(oracle::parse("10\t1\trequest_start\treq=1\n50\t1\trequest_exit\treq=1\n"));
  ASSERT_EQ(s.windows.size(), 1u);
  EXPECT_EQ(s.windows[0], (RequestWindow{1, 10, 50, 1}));
  EXPECT_EQ(s.dropped_starts, 0u);
}

TEST(SegmentRequests, InterleavedOnDifferentThreads) {
  const std::string text =
      "10\t1\trequest_start\treq=1\n"
      "20\t2\trequest_start\treq=2\n"
      "30\t1\trequest_exit\treq=1\n"
      "40\t2\trequest_exit\treq=2\n";
  const Trace t = oracle::parse(text);
  const auto s = segment_requests(t);
  const auto expect = oracle::pair_requests(t.events());
  ASSERT_EQ(s.windows.size(), 2u);
  ASSERT_EQ(expect.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(s.windows[i].request_id, expect[i].id);
    EXPECT_EQ(s.windows[i].start_ts, expect[i].start);
    EXPECT_EQ(s.windows[i].end_ts, expect[i].end);
  }
}

TEST(SegmentRequests, StartWithoutExitIsDropped) {
  const auto s = segment_requests(oracle::parse("10\t1\trequest_start\treq=1\n"));
  EXPECT_TRUE(s.windows.empty());
  EXPECT_EQ(s.dropped_starts, 1u);
}

TEST(SegmentRequests, ExitWithoutStartIgnored) {
  const auto s = segment_requests(oracle::parse("10\t1\trequest_exit\treq=4\n"));
  EXPECT_TRUE(s.windows.empty());
  EXPECT_EQ(s.orphan_exits, 1u);
  EXPECT_FALSE(s.diagnostics.empty());
}

TEST(SegmentRequests, OverlapOnEntryThreadAbandonsOlder) {
  const auto s = segment_requests(oracle::parse(
      "10\t1\trequest_start\treq=1\n"
      "20\t1\trequest_start\treq=2\n"
      "30\t1\trequest_exit\treq=1\n"
      "40\t1\trequest_exit\treq=2\n"));
  ASSERT_EQ(s.windows.size(), 1u);
  EXPECT_EQ(s.windows[0].request_id, 2u);
  EXPECT_EQ(s.dropped_starts, 1u);
  EXPECT_EQ(s.orphan_exits, 1u);
}

TEST(SegmentRequests, EmptyWindowDropped) {
  const auto s = segment_requests(oracle::parse("10\t1\trequest_start\treq=1\n10\t1\trequest_exit\treq=1\n"));
  EXPECT_TRUE(s.windows.empty());
  EXPECT_EQ(s.dropped_starts, 1u);
}

// Random request streams against brute-force pairing.
TEST(SegmentRequests, MatchesBruteForcePairingOnRandomStreams) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    KeyedRng rng(seed, 0, 7);
    std::string text;
    Timestamp ts = 0;
    const int n = static_cast<int>(rng.uniform_int(1, 40));
    for (int i = 0; i < n; ++i) {
      ts += rng.uniform_int(0, 3);
      const auto tid = rng.uniform_int(1, 3);
      const auto id = rng.uniform_int(1, 6);
      text += std::to_string(ts) + "\t" + std::to_string(tid) + (rng.bernoulli(0.5) ? "\trequest_start" : "\trequest_exit") +
              "\treq=" + std::to_string(id) + "\n";
    }
    const Trace t = oracle::parse(text);
    const auto s = segment_requests(t);
    const auto expect = oracle::pair_requests(t.events());
    std::size_t starts = 0;
    for (const auto& e : t.events()) starts += e.kind == EventKind::request_start;
    ASSERT_EQ(s.windows.size(), expect.size()) << "seed " << seed << "\n" << text;
    for (std::size_t i = 0; i < expect.size(); ++i) {
      EXPECT_EQ(s.windows[i].request_id, expect[i].id);
      EXPECT_EQ(s.windows[i].start_ts, expect[i].start);
      EXPECT_EQ(s.windows[i].end_ts, expect[i].end);
      EXPECT_EQ(s.windows[i].entry_thread, expect[i].thread);
      EXPECT_LT(s.windows[i].start_ts, s.windows[i].end_ts);
      if (i) {
        EXPECT_LE(s.windows[i - 1].start_ts, s.windows[i].start_ts);
      }
    }
    EXPECT_EQ(s.windows.size() + s.dropped_starts, starts) << "seed " << seed;
  }
}

TEST(SegmentRequests, GeneratorWindowsMatchGroundTruth) {
  auto [text, gen] = generate_to_string(WorkloadConfig{.seed = 5, .n_requests = 300, .anomaly_rate = 0.05});
  const auto s = segment_requests(oracle::parse(text));
  ASSERT_EQ(s.windows.size(), gen.truth.requests.size());
  EXPECT_EQ(s.dropped_starts, 0u);
  std::map<RequestId, Duration> truth;
  for (const auto& r : gen.truth.requests) truth[r.id] = r.duration;
  std::map<ThreadId, Timestamp> last_end;
  for (std::size_t i = 0; i < s.windows.size(); ++i) {
    ASSERT_TRUE(truth.contains(s.windows[i].request_id));
    EXPECT_EQ(s.windows[i].duration(), truth[s.windows[i].request_id]);
    truth.erase(s.windows[i].request_id);
    // Windows on one entry thread never overlap.
    auto& le = last_end[s.windows[i].entry_thread];
    EXPECT_LE(le, s.windows[i].start_ts);
    le = s.windows[i].end_ts;
  }
}
