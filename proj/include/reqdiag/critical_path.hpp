#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <vector>

#include "exec_state.hpp"
#include "trace_model.hpp"

namespace reqdiag {

struct StateInterval {
  ThreadId thread{0};
  ExecState state{ExecState::RU};
  Timestamp start{0};
  Timestamp end{0};
  std::optional<ThreadId> waker;  // set when a blocked interval ended by sched_wakeup

  Duration duration() const noexcept { return end - start; }
  friend bool operator==(const StateInterval&, const StateInterval&) = default;
};

using ThreadIntervals = std::map<ThreadId, std::vector<StateInterval>>;

// ----------------------------------------------------------------------------
// Per-thread scheduling state, precomputed once per trace
// ----------------------------------------------------------------------------

struct ThreadState {
  bool on_cpu{true};
  bool has_sched{false};  // any switch/block event seen so far
  std::uint16_t depth{0};
  std::int8_t reason{-1};  // BlockingReason, or -1 when not blocked

  ExecState classify() const noexcept {
    if (on_cpu) return depth > 0 ? ExecState::RS : ExecState::RU;
    if (reason >= 0) return blocked_state(static_cast<BlockingReason>(reason));
    return ExecState::BP;  // switched out while runnable
  }

  void apply(const TraceEvent& e) noexcept {
    switch (e.kind) {
      case EventKind::sched_switch_in:
        on_cpu = true;
        reason = -1;
        has_sched = true;
        break;
      case EventKind::sched_switch_out:
        on_cpu = false;
        has_sched = true;
        break;
      case EventKind::block_begin:
        on_cpu = false;
        reason = static_cast<std::int8_t>(e.reason());
        has_sched = true;
        break;
      case EventKind::block_end:
        reason = -1;
        has_sched = true;
        break;
      case EventKind::syscall_entry:
        ++depth;
        break;
      case EventKind::syscall_exit:
        if (depth > 0) --depth;
        break;
      default:
        break;
    }
  }
};

// Read-only index over a Trace: replayed thread states and wakeups by wakee.
class TraceTimeline {
 public:
  struct Wakeup {
    Timestamp ts;
    ThreadId waker;
  };

  explicit TraceTimeline(const Trace& trace) : _trace{trace} {
    for (const auto& [tid, idx] : trace.thread_index()) {
      auto& states = _states[tid];
      states.reserve(idx.size());
      ThreadState st;
      for (auto i : idx) {
        st.apply(trace.events()[i]);
        states.push_back(st);
      }
    }
    for (const auto& e : trace.events()) {
      if (e.kind == EventKind::sched_wakeup) _wakeups[e.wakee()].push_back({e.ts, e.thread});
    }
  }

  const Trace& trace() const noexcept { return _trace; }

  // Position of the first event of `tid` with timestamp >= ts.
  std::size_t lower_bound(ThreadId tid, Timestamp ts) const {
    const auto idx = _trace.thread_events(tid);
    const auto& ev = _trace.events();
    return static_cast<std::size_t>(
        std::partition_point(idx.begin(), idx.end(), [&](std::uint32_t i) { return ev[i].ts < ts; }) - idx.begin());
  }

  // Thread state just before the thread's k-th event.
  ThreadState state_before(ThreadId tid, std::size_t k) const {
    if (k == 0) return {};
    return _states.at(tid)[k - 1];
  }

  // Wakers of `tid` at exactly `ts`, sorted and de-duplicated.
  std::vector<ThreadId> wakers_at(ThreadId tid, Timestamp ts) const {
    std::vector<ThreadId> out;
    auto it = _wakeups.find(tid);
    if (it == _wakeups.end()) return out;
    const auto& w = it->second;
    auto lo = std::partition_point(w.begin(), w.end(), [&](const Wakeup& x) { return x.ts < ts; });
    for (; lo != w.end() && lo->ts == ts; ++lo) out.push_back(lo->waker);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  // Global event index range [first, last) with timestamps in [a, b].
  std::pair<std::size_t, std::size_t> window_range(Timestamp a, Timestamp b) const {
    const auto& ev = _trace.events();
    auto lo = std::partition_point(ev.begin(), ev.end(), [&](const TraceEvent& e) { return e.ts < a; });
    auto hi = std::partition_point(lo, ev.end(), [&](const TraceEvent& e) { return e.ts <= b; });
    return {static_cast<std::size_t>(lo - ev.begin()), static_cast<std::size_t>(hi - ev.begin())};
  }

 private:
  const Trace& _trace;
  std::map<ThreadId, std::vector<ThreadState>> _states;
  std::map<ThreadId, std::vector<Wakeup>> _wakeups;
};

// ----------------------------------------------------------------------------
// Interval derivation
// ----------------------------------------------------------------------------

// Disjoint, ordered state cover of [start_ts, end_ts) for one thread.
inline std::vector<StateInterval> derive_thread_intervals(const TraceTimeline& tl, ThreadId tid,
                                                          const RequestWindow& w, Diagnostics* diag = nullptr) {
  const auto& ev = tl.trace().events();
  const auto idx = tl.trace().thread_events(tid);
  std::size_t k = tl.lower_bound(tid, w.start_ts);
  ThreadState st = tl.state_before(tid, k);

  std::vector<StateInterval> out;
  ExecState cur = st.classify();
  Timestamp cur_start = w.start_ts;

  const auto close = [&](Timestamp ts) {
    if (ts <= cur_start) return;
    StateInterval iv{tid, cur, cur_start, ts, std::nullopt};
    if (is_blocked(cur)) {
      const auto wakers = tl.wakers_at(tid, ts);
      if (!wakers.empty()) iv.waker = wakers.front();
      if (wakers.size() > 1 && diag) {
        diag->warn("request " + std::to_string(w.request_id) + ": simultaneous wakeups of thread " +
                   std::to_string(tid) + " at " + std::to_string(ts) + "; lowest waker id chosen");
      }
    }
    out.push_back(iv);
  };

  for (; k < idx.size() && ev[idx[k]].ts <= w.end_ts; ++k) {
    const TraceEvent& e = ev[idx[k]];
    const bool was_blocked = !st.on_cpu;
    st.apply(e);
    const ExecState next = st.classify();
    const bool episode_end =
        was_blocked && (e.kind == EventKind::block_end || e.kind == EventKind::sched_switch_in);
    if (next != cur || episode_end) {
      close(e.ts);
      cur = next;
      cur_start = std::max(cur_start, e.ts);
    }
  }
  if (!st.has_sched && diag) {
    diag->warn("request " + std::to_string(w.request_id) + ": thread " + std::to_string(tid) +
               " has no scheduling information; assumed on CPU");
  }
  close(w.end_ts);
  return out;
}

// Threads with at least one event inside the window, plus the entry thread.
inline std::vector<ThreadId> active_threads(const TraceTimeline& tl, const RequestWindow& w) {
  std::set<ThreadId> s{w.entry_thread};
  const auto [lo, hi] = tl.window_range(w.start_ts, w.end_ts);
  const auto& ev = tl.trace().events();
  for (std::size_t i = lo; i < hi; ++i) s.insert(ev[i].thread);
  return {s.begin(), s.end()};
}

inline ThreadIntervals derive_state_intervals(const TraceTimeline& tl, const RequestWindow& w,
                                              Diagnostics* diag = nullptr) {
  ThreadIntervals out;
  for (ThreadId tid : active_threads(tl, w)) out.emplace(tid, derive_thread_intervals(tl, tid, w, diag));
  return out;
}

// ----------------------------------------------------------------------------
// Execution graph
// ----------------------------------------------------------------------------

struct WakeupEdge {
  ThreadId waker{0};
  ThreadId wakee{0};
  Timestamp ts{0};
  std::size_t wakee_interval{0};  // blocked interval ending at ts
  std::size_t waker_interval{0};  // waker interval containing ts

  friend bool operator==(const WakeupEdge&, const WakeupEdge&) = default;
};

struct ExecutionGraph {
  ThreadIntervals intervals;      // horizontal edges
  std::vector<WakeupEdge> edges;  // vertical edges, in trace order
  std::size_t dropped_wakeups{0};

  // Edge that resolves the given blocked interval, if any.
  const WakeupEdge* resolving_edge(ThreadId wakee, std::size_t interval) const {
    auto it = _by_wakee.find({wakee, interval});
    return it == _by_wakee.end() ? nullptr : &edges[it->second];
  }

  void add_edge(const WakeupEdge& e) {
    _by_wakee.emplace(std::pair{e.wakee, e.wakee_interval}, edges.size());
    edges.push_back(e);
  }

 private:
  std::map<std::pair<ThreadId, std::size_t>, std::size_t> _by_wakee;
};

namespace detail {

// Index of the interval of `ivs` whose end equals ts, if any.
inline std::optional<std::size_t> interval_ending_at(const std::vector<StateInterval>& ivs, Timestamp ts) {
  auto it = std::partition_point(ivs.begin(), ivs.end(), [&](const StateInterval& iv) { return iv.end < ts; });
  if (it == ivs.end() || it->end != ts) return std::nullopt;
  return static_cast<std::size_t>(it - ivs.begin());
}

// Index of the interval with start <= ts <= end (the earliest one at a boundary).
inline std::optional<std::size_t> interval_containing(const std::vector<StateInterval>& ivs, Timestamp ts) {
  auto it = std::partition_point(ivs.begin(), ivs.end(), [&](const StateInterval& iv) { return iv.end < ts; });
  if (it == ivs.end() || it->start > ts) return std::nullopt;
  return static_cast<std::size_t>(it - ivs.begin());
}

}  // namespace detail

inline ExecutionGraph build_execution_graph(ThreadIntervals intervals, const TraceTimeline& tl,
                                            const RequestWindow& w, Diagnostics* diag = nullptr) {
  ExecutionGraph g;
  g.intervals = std::move(intervals);
  const auto [lo, hi] = tl.window_range(w.start_ts, w.end_ts);
  const auto& ev = tl.trace().events();
  for (std::size_t i = lo; i < hi; ++i) {
    const auto& e = ev[i];
    if (e.kind != EventKind::sched_wakeup) continue;
    const ThreadId wakee = e.wakee();
    const auto drop = [&](std::string_view why) {
      ++g.dropped_wakeups;
      if (diag) {
        diag->warn("request " + std::to_string(w.request_id) + ": wakeup " + std::to_string(e.thread) + "->" +
                   std::to_string(wakee) + " at " + std::to_string(e.ts) + " dropped (" + std::string{why} + ")");
      }
    };
    auto wi = g.intervals.find(wakee);
    auto ki = g.intervals.find(e.thread);
    if (wi == g.intervals.end() || ki == g.intervals.end()) {
      drop("thread not active in window");
      continue;
    }
    const auto blocked = detail::interval_ending_at(wi->second, e.ts);
    if (!blocked || !is_blocked(wi->second[*blocked].state)) {
      drop("no blocked interval ends at the wakeup");
      continue;
    }
    if (wi->second[*blocked].waker != e.thread) {
      drop("simultaneous wakeup resolved to another waker");
      continue;
    }
    const auto waker_iv = detail::interval_containing(ki->second, e.ts);
    if (!waker_iv) {
      drop("waker has no interval at the wakeup");
      continue;
    }
    g.add_edge({e.thread, wakee, e.ts, *blocked, *waker_iv});
  }
  return g;
}

// ----------------------------------------------------------------------------
// Critical path
// ----------------------------------------------------------------------------

struct CriticalPath {
  RequestId request_id{0};
  std::vector<StateInterval> segments;

  Duration total() const noexcept {
    Duration d = 0;
    for (const auto& s : segments) d += s.duration();
    return d;
  }
};

struct PathParams {
  std::size_t max_depth{32};
};

inline bool substitutable(ExecState s) { return s == ExecState::BT || s == ExecState::BF; }

namespace detail {

inline void expand_path(const ExecutionGraph& g, ThreadId tid, Timestamp a, Timestamp b, std::size_t depth,
                        const PathParams& params, const RequestWindow& w, std::vector<StateInterval>& out,
                        Diagnostics* diag) {
  const auto& ivs = g.intervals.at(tid);
  auto it = std::partition_point(ivs.begin(), ivs.end(), [&](const StateInterval& iv) { return iv.end <= a; });
  for (; it != ivs.end() && it->start < b; ++it) {
    StateInterval seg = *it;
    seg.start = std::max(seg.start, a);
    seg.end = std::min(seg.end, b);
    const auto index = static_cast<std::size_t>(it - ivs.begin());
    const WakeupEdge* edge = substitutable(seg.state) ? g.resolving_edge(tid, index) : nullptr;
    if (edge && depth < params.max_depth) {
      expand_path(g, edge->waker, seg.start, seg.end, depth + 1, params, w, out, diag);
      continue;
    }
    if (edge && diag) {
      diag->warn("request " + std::to_string(w.request_id) + ": substitution depth limit reached on thread " +
                 std::to_string(tid) + " at " + std::to_string(seg.start) + "; blocked segment kept");
    }
    out.push_back(seg);
  }
}

}  // namespace detail

inline void validate_path(const CriticalPath& p, const RequestWindow& w) {
  const std::string where = "critical path of request " + std::to_string(w.request_id);
  check_invariant(!p.segments.empty(), where + ": empty");
  check_invariant(p.segments.front().start == w.start_ts, where + ": does not start at request start");
  check_invariant(p.segments.back().end == w.end_ts, where + ": does not end at request exit");
  for (std::size_t i = 0; i < p.segments.size(); ++i) {
    check_invariant(p.segments[i].start < p.segments[i].end, where + ": empty segment");
    if (i > 0) check_invariant(p.segments[i].start == p.segments[i - 1].end, where + ": segments not contiguous");
  }
  check_invariant(p.total() == w.duration(), where + ": segment sum differs from total request time");
}

// Starts from the entry thread's intervals over the window and recursively
// replaces resolved BT/BF intervals with the waker's intervals over the same
// span. Other blocked states stay on the path.
inline CriticalPath extract_critical_path(const ExecutionGraph& g, const RequestWindow& w,
                                          const PathParams& params = {}, Diagnostics* diag = nullptr) {
  CriticalPath p{w.request_id, {}};
  if (!g.intervals.contains(w.entry_thread)) throw InvariantError("entry thread missing from execution graph");
  detail::expand_path(g, w.entry_thread, w.start_ts, w.end_ts, 0, params, w, p.segments, diag);
  validate_path(p, w);
  return p;
}

// One-call convenience: intervals, graph and path for one window.
inline CriticalPath critical_path_for(const TraceTimeline& tl, const RequestWindow& w, const PathParams& params = {},
                                      Diagnostics* diag = nullptr) {
  auto graph = build_execution_graph(derive_state_intervals(tl, w, diag), tl, w, diag);
  return extract_critical_path(graph, w, params, diag);
}

// Debug dump: req_id<TAB>thread<TAB>state<TAB>start<TAB>end per segment.
inline void write_path_dump(std::ostream& out, const CriticalPath& p) {
  for (const auto& s : p.segments) {
    out << p.request_id << '\t' << s.thread << '\t' << to_string(s.state) << '\t' << s.start << '\t' << s.end << '\n';
  }
}

}  // namespace reqdiag
