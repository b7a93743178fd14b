#pragma once

// Synthetic multi-tier request workload with injectable anomalies.
//
// Each request enters on a front worker, which hands off to an app worker;
// the app worker may query a db worker and hands the response back before the
// front worker exits the request. Exactly one thread of a request is running
// at any time (the "baton"), so the generator knows the request's critical
// path without running any path extraction. That plan is exported for tests.

#include <array>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "exec_state.hpp"
#include "trace_model.hpp"

namespace reqdiag {

enum class RequestLabel : std::uint8_t { normal, write_storm, connect_block, lock_contention };

inline constexpr std::array<std::string_view, 4> kRequestLabelNames{
    "normal", "write_storm", "connect_block", "lock_contention",
};

inline std::string_view to_string(RequestLabel l) { return kRequestLabelNames[static_cast<std::size_t>(l)]; }

inline std::optional<RequestLabel> parse_request_label(std::string_view s) {
  return enum_from_string<RequestLabel>(kRequestLabelNames, s);
}

struct TierTopology {
  std::size_t front{8};
  std::size_t app{8};
  std::size_t db{4};
};

// Defaults follow the slowdown ratios of the diagnosed clusters relative to
// normal requests (about 4x for the write run, over 20x for the blocked
// connects, about 4.4x and 10x the syscalls for lock contention).
struct AnomalyMagnitudes {
  double write_storm_multiplier{4.0};
  double connect_block_multiplier{25.0};
  double lock_contention_multiplier{4.4};
  double multiplier_jitter{0.25};  // log-normal scale applied to each multiplier
  std::size_t write_run_min{20};
  std::size_t write_run_max{60};
  std::size_t connect_attempts_min{3};
  std::size_t connect_attempts_max{8};
  std::size_t contention_rounds_min{180};
  std::size_t contention_rounds_max{220};
};

struct WorkloadConfig {
  std::uint64_t seed{42};
  std::size_t n_requests{1000};
  double anomaly_rate{0.01};
  std::array<double, 3> anomaly_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // write_storm, connect_block, lock_contention
  double duration_location{std::log(120.0)};                    // log of milliseconds
  double duration_scale{0.3};
  TierTopology topology{};
  double db_probability{0.7};
  double preempt_probability{0.3};
  double heavy_page_probability{0.01};
  double mean_interarrival_ms{25.0};
  AnomalyMagnitudes magnitudes{};

  void validate() const {
    if (topology.front == 0 || topology.app == 0 || topology.db == 0) {
      throw ConfigError("every tier needs at least one worker thread");
    }
    if (topology.front > 999 || topology.app > 999 || topology.db > 999) {
      throw ConfigError("at most 999 worker threads per tier");
    }
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0)) throw ConfigError("anomaly_rate must be in [0, 1]");
    double sum = 0.0;
    for (double w : anomaly_mix) {
      if (!(w >= 0.0)) throw ConfigError("anomaly_mix weights must be non-negative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("anomaly_mix weights must sum to 1");
    if (anomaly_rate > 0.0 && anomaly_mix[2] > 0.0 && topology.app < 2) {
      throw ConfigError("lock_contention needs at least two app workers");
    }
    if (!(duration_scale >= 0.0) || !std::isfinite(duration_location)) {
      throw ConfigError("invalid base duration parameters");
    }
    if (!(mean_interarrival_ms > 0.0)) throw ConfigError("mean_interarrival_ms must be positive");
    const auto& m = magnitudes;
    if (m.write_run_min == 0 || m.write_run_min > m.write_run_max || m.connect_attempts_min == 0 ||
        m.connect_attempts_min > m.connect_attempts_max || m.contention_rounds_min == 0 ||
        m.contention_rounds_min > m.contention_rounds_max) {
      throw ConfigError("invalid anomaly magnitude ranges");
    }
    if (!(m.write_storm_multiplier > 1.0 && m.connect_block_multiplier > 1.0 && m.lock_contention_multiplier > 1.0)) {
      throw ConfigError("anomaly multipliers must exceed 1");
    }
  }
};

// ----------------------------------------------------------------------------
// Ground truth
// ----------------------------------------------------------------------------

struct RequestTruth {
  RequestId id{0};
  RequestLabel label{RequestLabel::normal};
  Duration duration{0};
};

struct GroundTruth {
  std::vector<RequestTruth> requests;

  std::size_t count(RequestLabel l) const {
    return static_cast<std::size_t>(
        std::count_if(requests.begin(), requests.end(), [l](const RequestTruth& r) { return r.label == l; }));
  }

  std::map<RequestId, RequestLabel> labels() const {
    std::map<RequestId, RequestLabel> out;
    for (const auto& r : requests) out.emplace(r.id, r.label);
    return out;
  }

  // request_id<TAB>label
  void write(std::ostream& out) const {
    for (const auto& r : requests) out << r.id << '\t' << to_string(r.label) << '\n';
  }

  static GroundTruth read(std::istream& in) {
    GroundTruth gt;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line.front() == '#') continue;
      const auto f = split(line, '\t');
      RequestTruth r;
      std::optional<RequestLabel> label;
      if (f.size() != 2 || !parse_int(f[0], r.id) || !(label = parse_request_label(f[1]))) {
        throw ParseError(lineno, "expected request_id<TAB>label");
      }
      r.label = *label;
      gt.requests.push_back(r);
    }
    return gt;
  }
};

// What the generator laid down for one request: the oracle for path
// extraction and feature tests.
struct PlannedSegment {
  ThreadId thread{0};
  ExecState state{ExecState::RU};
  Timestamp start{0};
  Timestamp end{0};

  friend bool operator==(const PlannedSegment&, const PlannedSegment&) = default;
};

struct RequestPlan {
  RequestId id{0};
  RequestLabel label{RequestLabel::normal};
  Timestamp start{0};
  Timestamp end{0};
  ThreadId front{0};
  ThreadId app{0};
  std::optional<ThreadId> db;
  std::optional<ThreadId> sibling;
  ThreadId irq{0};
  std::vector<PlannedSegment> path;
  std::array<Duration, kNumStates> state_totals{};
  std::vector<std::string> syscalls;  // on-path syscall entries in order
  std::size_t handoffs{0};            // wakeups emitted strictly inside the window
  std::size_t events{0};              // events this request emitted
  std::size_t contention_rounds{0};
  std::size_t connect_attempts{0};
  std::size_t write_run{0};

  std::vector<ThreadId> threads() const {
    std::vector<ThreadId> t{front, app, irq};
    if (db) t.push_back(*db);
    if (sibling) t.push_back(*sibling);
    std::sort(t.begin(), t.end());
    return t;
  }
};

struct GenerationResult {
  GroundTruth truth;
  std::vector<RequestPlan> plans;  // only filled when requested
  std::size_t emitted_events{0};
};

// ----------------------------------------------------------------------------
// Generator internals
// ----------------------------------------------------------------------------

namespace sim {

inline constexpr ThreadId kFrontBase = 1000;
inline constexpr ThreadId kAppBase = 2000;
inline constexpr ThreadId kDbBase = 3000;
inline constexpr ThreadId kIrqBase = 4000;

inline constexpr Duration kMinPiece = 2000;   // every generated interval is at least 2 us
inline constexpr Duration kIrqLead = 1000;    // irq thread runs 1 us before its wakeup
inline constexpr Duration kThreadGap = 10000;  // idle gap before a thread is reused

inline constexpr std::array<std::string_view, 22> kSyscalls{
    "read",  "writev", "getcwd",  "fstat",  "lstat",        "stat",   "open",      "close",
    "fcntl", "mmap",   "munmap",  "brk",    "time",         "connect", "sendto",   "recvfrom",
    "write", "pread",  "nanosleep", "gettimeofday", "poll", "access",
};

inline SymbolId sys(std::string_view name) {
  for (std::size_t i = 0; i < kSyscalls.size(); ++i) {
    if (kSyscalls[i] == name) return static_cast<SymbolId>(i);
  }
  throw std::logic_error("unknown generator syscall");
}

enum class Role : std::uint8_t { front, app, db, sibling };
enum class Op : std::uint8_t { run, enter, exit, block, preempt, handoff };
enum class Pool : std::uint8_t { base, extra };

struct Action {
  Op op{Op::run};
  Pool pool{Pool::base};
  double weight{0.0};
  SymbolId name{0};
  BlockingReason reason{BlockingReason::task};  // block: why; handoff: why the current thread sleeps
  Role target{Role::front};
};

// The symbolic script of one request; durations are resolved later from the
// weights.
struct Script {
  RequestLabel label{RequestLabel::normal};
  bool has_db{false};
  bool has_sibling{false};
  Duration base_ns{0};
  Duration extra_ns{0};
  std::vector<Action> actions;
  std::size_t contention_rounds{0};
  std::size_t connect_attempts{0};
  std::size_t write_run{0};
};

class ScriptWriter {
 public:
  explicit ScriptWriter(KeyedRng& rng) : _rng{rng} {}

  void run(double w, Pool p = Pool::base) { push({Op::run, p, jitter(w)}); }
  void enter(std::string_view name) { push({Op::enter, Pool::base, 0.0, sys(name)}); }
  void exit(std::string_view name) { push({Op::exit, Pool::base, 0.0, sys(name)}); }
  void block(BlockingReason r, double w, Pool p = Pool::base) {
    Action a{Op::block, p, jitter(w)};
    a.reason = r;
    push(a);
  }
  void preempt(double w) { push({Op::preempt, Pool::base, jitter(w)}); }
  void handoff(Role target, BlockingReason my_reason) {
    Action a{Op::handoff};
    a.target = target;
    a.reason = my_reason;
    push(a);
  }

  // A plain syscall on the current thread, optionally blocking on disk.
  void syscall(std::string_view name, double rs_w, double disk_w = 0.0, Pool p = Pool::base) {
    enter(name);
    if (disk_w > 0.0) {
      run(rs_w / 2, p);
      block(BlockingReason::disk, disk_w, p);
      run(rs_w / 2, p);
    } else {
      run(rs_w, p);
    }
    exit(name);
  }

  std::vector<Action> take() { return std::move(_actions); }

 private:
  double jitter(double w) { return w * std::exp(_rng.normal(0.0, 0.1)); }
  void push(Action a) { _actions.push_back(a); }

  KeyedRng& _rng;
  std::vector<Action> _actions;
};

inline double jittered_multiplier(KeyedRng& rng, double m, double scale) {
  return std::max(1.5, m * std::exp(rng.normal(0.0, scale)));
}

inline RequestLabel draw_label(const WorkloadConfig& cfg, KeyedRng& rng) {
  if (!rng.bernoulli(cfg.anomaly_rate)) return RequestLabel::normal;
  return static_cast<RequestLabel>(1 + rng.weighted_index(cfg.anomaly_mix));
}

// Builds the script for request `index`. All randomness comes from the
// (seed, index) stream, so scripts can be built in any order.
inline Script build_script(const WorkloadConfig& cfg, std::size_t index) {
  KeyedRng rng(cfg.seed, index, 0);
  const auto& mag = cfg.magnitudes;
  Script s;
  s.label = draw_label(cfg, rng);
  s.has_db = rng.bernoulli(cfg.db_probability);
  s.has_sibling = s.label == RequestLabel::lock_contention;
  const double base_ms = rng.lognormal(cfg.duration_location, cfg.duration_scale);
  s.base_ns = std::max<Duration>(kMinPiece * 200, std::llround(base_ms * kNsPerMs));

  double multiplier = 1.0;
  switch (s.label) {
    case RequestLabel::write_storm:
      multiplier = jittered_multiplier(rng, mag.write_storm_multiplier, mag.multiplier_jitter);
      break;
    case RequestLabel::connect_block:
      multiplier = jittered_multiplier(rng, mag.connect_block_multiplier, mag.multiplier_jitter * 1.2);
      break;
    case RequestLabel::lock_contention:
      multiplier = jittered_multiplier(rng, mag.lock_contention_multiplier, mag.multiplier_jitter);
      break;
    case RequestLabel::normal:
      break;
  }
  s.extra_ns = std::llround(static_cast<double>(s.base_ns) * (multiplier - 1.0));

  ScriptWriter w(rng);
  const auto pick = [&](std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
  };
  const auto maybe_disk = [&](double p, double wt) { return rng.bernoulli(p) ? wt : 0.0; };

  // Front worker: read the request, hand it to the app tier.
  w.run(2.0);
  w.syscall("read", 1.5);
  w.run(1.0);
  w.handoff(Role::app, BlockingReason::task);

  // App worker. Lock contention happens first, on the shared code cache.
  if (s.label == RequestLabel::lock_contention) {
    const std::size_t rounds = pick(mag.contention_rounds_min, mag.contention_rounds_max);
    const double compile_share = rng.uniform(0.3, 0.7);
    const double rest = (1.0 - compile_share - 0.05) / 2.0;
    const double per = 1.0 / static_cast<double>(rounds);
    for (std::size_t r = 0; r < rounds; ++r) {
      w.run(0.05 * per, Pool::extra);
      w.enter("fcntl");
      w.run(rest * per / 2, Pool::extra);
      w.handoff(Role::sibling, BlockingReason::futex);
      // Sibling holds the lock: finishes its compile step, then unlocks.
      w.run(compile_share * per, Pool::extra);
      w.enter("fcntl");
      w.run(rest * per, Pool::extra);
      w.exit("fcntl");
      w.handoff(Role::app, r + 1 == rounds ? BlockingReason::task : BlockingReason::futex);
      w.run(rest * per / 2, Pool::extra);
      w.exit("fcntl");
    }
    s.contention_rounds = rounds;
  }

  const auto app_call = [&](std::string_view name, double disk_p = 0.0) {
    w.run(1.0);
    w.syscall(name, 0.6, maybe_disk(disk_p, 1.5));
  };

  for (auto name : {"getcwd", "fstat", "lstat", "stat", "open", "fstat", "read", "close"}) {
    app_call(name, std::string_view{name} == "read" ? 0.3 : 0.0);
  }
  const bool heavy = rng.bernoulli(cfg.heavy_page_probability);
  const std::size_t includes = heavy ? pick(15, 30) : pick(2, 6);
  for (std::size_t i = 0; i < includes; ++i) {
    app_call("stat");
    app_call("open", 0.3);
    app_call("fstat");
    app_call("read", 0.3);
    app_call("close");
  }
  // Seven fcntl calls, two of them back to back twice.
  for (auto name : {"fcntl", "fcntl", "mmap", "fcntl", "brk", "fcntl", "fcntl", "munmap", "fcntl", "time", "fcntl"}) {
    app_call(name);
  }

  if (s.label == RequestLabel::connect_block) {
    const std::size_t attempts = pick(mag.connect_attempts_min, mag.connect_attempts_max);
    const double per = 1.0 / static_cast<double>(attempts);
    for (std::size_t a = 0; a < attempts; ++a) {
      w.run(0.01 * per, Pool::extra);
      w.enter("connect");
      w.run(0.01 * per, Pool::extra);
      w.block(BlockingReason::network, 0.97 * per, Pool::extra);
      w.run(0.01 * per, Pool::extra);
      w.exit("connect");
    }
    s.connect_attempts = attempts;
  }
  // The one successful connect (database or cache).
  w.run(1.0);
  w.enter("connect");
  w.run(0.3);
  w.block(BlockingReason::network, 3.0);
  w.run(0.3);
  w.exit("connect");

  if (s.has_db) {
    app_call("sendto");
    w.run(1.0);
    w.enter("recvfrom");
    w.run(0.3);
    w.handoff(Role::db, BlockingReason::task);
    // Db worker: read pages, maybe back off, reply.
    w.run(2.0);
    w.syscall("pread", 1.0, 8.0);
    if (rng.bernoulli(0.2)) {
      w.enter("nanosleep");
      w.run(0.2);
      w.block(BlockingReason::timer, 2.0);
      w.run(0.2);
      w.exit("nanosleep");
    }
    w.run(2.0);
    w.syscall("sendto", 0.5);
    w.handoff(Role::app, BlockingReason::task);
    w.run(0.3);
    w.exit("recvfrom");
  } else {
    app_call("poll");
  }

  app_call("write");
  if (s.label == RequestLabel::write_storm) {
    const std::size_t writes = pick(mag.write_run_min, mag.write_run_max);
    const double disk_share = rng.uniform(0.0, 0.6);
    const double per = 1.0 / static_cast<double>(writes);
    for (std::size_t i = 0; i < writes; ++i) {
      w.run(0.15 * per, Pool::extra);
      w.syscall("write", (0.85 - disk_share) * per, disk_share * per, Pool::extra);
    }
    s.write_run = writes;
  }
  for (std::size_t i = pick(0, 3); i > 0; --i) app_call("gettimeofday");
  for (std::size_t i = pick(0, 2); i > 0; --i) app_call("brk");
  app_call("close");
  w.run(1.0);
  if (rng.bernoulli(cfg.preempt_probability)) {
    w.preempt(3.0);
    w.run(0.5);
  }
  w.handoff(Role::front, BlockingReason::task);

  // Front worker: send the response.
  w.run(1.0);
  w.syscall("writev", 1.0);
  w.run(0.5);

  s.actions = w.take();
  return s;
}

// Resolves weights into integer nanosecond durations per pool.
inline std::vector<Duration> resolve_durations(const Script& s) {
  double sum[2] = {0.0, 0.0};
  for (const auto& a : s.actions) sum[static_cast<int>(a.pool)] += a.weight;
  const double total[2] = {static_cast<double>(s.base_ns), static_cast<double>(s.extra_ns)};
  std::vector<Duration> out(s.actions.size(), 0);
  for (std::size_t i = 0; i < s.actions.size(); ++i) {
    const auto& a = s.actions[i];
    if (a.op != Op::run && a.op != Op::block && a.op != Op::preempt) continue;
    const int p = static_cast<int>(a.pool);
    out[i] = std::max<Duration>(kMinPiece, std::llround(total[p] * a.weight / sum[p]));
  }
  return out;
}

struct PendingEvent {
  Timestamp ts;
  std::int64_t order;  // request index, -1 for trace preamble
  std::uint64_t seq;
  TraceEvent event;

  bool operator>(const PendingEvent& o) const {
    if (ts != o.ts) return ts > o.ts;
    if (order != o.order) return order > o.order;
    return seq > o.seq;
  }
};

// Emits one request's events given its script and thread assignment.
class RequestEmitter {
 public:
  struct Threads {
    ThreadId front, app, db, sibling, irq;
  };

  RequestEmitter(const Script& s, std::int64_t order, Threads threads, std::map<ThreadId, BlockingReason>& idle,
                 bool record)
      : _script{s}, _order{order}, _t{threads}, _idle{idle}, _record{record} {}

  void emit(Timestamp start, RequestId id, std::vector<PendingEvent>& out, RequestPlan& plan) {
    _out = &out;
    const auto durations = resolve_durations(_script);
    ThreadId cur = _t.front;
    std::map<ThreadId, int> depth;

    // The irq thread wakes the front worker just before the request begins.
    irq_wake(start - 2000, cur, /*in_window=*/false);
    push(start, TraceEvent::request(start, cur, EventKind::request_start, id));

    Timestamp t = start;
    for (std::size_t i = 0; i < _script.actions.size(); ++i) {
      const auto& a = _script.actions[i];
      const Duration d = durations[i];
      switch (a.op) {
        case Op::run:
          segment(cur, depth[cur] > 0 ? ExecState::RS : ExecState::RU, t, t + d);
          t += d;
          break;
        case Op::enter:
          ++depth[cur];
          push(t, TraceEvent::syscall(t, cur, EventKind::syscall_entry, a.name));
          if (_record) _plan_syscalls.emplace_back(kSyscalls[a.name]);
          break;
        case Op::exit:
          --depth[cur];
          push(t, TraceEvent::syscall(t, cur, EventKind::syscall_exit, a.name));
          break;
        case Op::block:
          push(t, TraceEvent::block(t, cur, EventKind::block_begin, a.reason));
          push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_out));
          segment(cur, blocked_state(a.reason), t, t + d);
          t += d;
          irq_wake(t, cur, true);
          push(t, TraceEvent::block(t, cur, EventKind::block_end, a.reason));
          push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_in));
          break;
        case Op::preempt:
          push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_out));
          segment(cur, ExecState::BP, t, t + d);
          t += d;
          push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_in));
          break;
        case Op::handoff: {
          const ThreadId next = thread_for(a.target);
          push(t, TraceEvent::wakeup(t, cur, next));
          ++_handoffs;
          push(t, TraceEvent::block(t, cur, EventKind::block_begin, a.reason));
          push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_out));
          _idle[cur] = a.reason;
          const BlockingReason was = _idle[next];
          push(t, TraceEvent::block(t, next, EventKind::block_end, was));
          push(t, TraceEvent::sched(t, next, EventKind::sched_switch_in));
          cur = next;
          break;
        }
      }
    }
    check_invariant(cur == _t.front, "generator script must end on the front worker");
    push(t, TraceEvent::request(t, cur, EventKind::request_exit, id));
    push(t, TraceEvent::block(t, cur, EventKind::block_begin, BlockingReason::network));
    push(t, TraceEvent::sched(t, cur, EventKind::sched_switch_out));
    _idle[cur] = BlockingReason::network;

    plan.id = id;
    plan.label = _script.label;
    plan.start = start;
    plan.end = t;
    plan.front = _t.front;
    plan.app = _t.app;
    if (_script.has_db) plan.db = _t.db;
    if (_script.has_sibling) plan.sibling = _t.sibling;
    plan.irq = _t.irq;
    plan.handoffs = _handoffs;
    plan.events = _emitted;
    plan.contention_rounds = _script.contention_rounds;
    plan.connect_attempts = _script.connect_attempts;
    plan.write_run = _script.write_run;
    if (_record) {
      plan.path = std::move(_plan_path);
      plan.syscalls = std::move(_plan_syscalls);
      plan.state_totals = _totals;
    }
  }

 private:
  ThreadId thread_for(Role r) const {
    switch (r) {
      case Role::front:
        return _t.front;
      case Role::app:
        return _t.app;
      case Role::db:
        return _t.db;
      case Role::sibling:
        return _t.sibling;
    }
    return _t.front;
  }

  void irq_wake(Timestamp t, ThreadId wakee, bool in_window) {
    const ThreadId k = _t.irq;
    push(t - kIrqLead, TraceEvent::block(t - kIrqLead, k, EventKind::block_end, BlockingReason::interrupt));
    push(t - kIrqLead, TraceEvent::sched(t - kIrqLead, k, EventKind::sched_switch_in));
    push(t, TraceEvent::wakeup(t, k, wakee));
    if (in_window) ++_handoffs;
    push(t, TraceEvent::block(t, k, EventKind::block_begin, BlockingReason::interrupt));
    push(t, TraceEvent::sched(t, k, EventKind::sched_switch_out));
    if (!in_window) {
      // Front worker leaves its idle wait.
      push(t, TraceEvent::block(t, wakee, EventKind::block_end, _idle[wakee]));
      push(t, TraceEvent::sched(t, wakee, EventKind::sched_switch_in));
    }
  }

  void segment(ThreadId tid, ExecState st, Timestamp a, Timestamp b) {
    _totals[index_of(st)] += b - a;
    if (_record) _plan_path.push_back({tid, st, a, b});
  }

  void push(Timestamp ts, TraceEvent e) {
    e.ts = ts;
    _out->push_back({ts, _order, _seq++, e});
    ++_emitted;
  }

  const Script& _script;
  std::int64_t _order;
  Threads _t;
  std::map<ThreadId, BlockingReason>& _idle;
  bool _record;
  std::vector<PendingEvent>* _out{nullptr};
  std::uint64_t _seq{0};
  std::size_t _emitted{0};
  std::size_t _handoffs{0};
  std::vector<PlannedSegment> _plan_path;
  std::vector<std::string> _plan_syscalls;
  std::array<Duration, kNumStates> _totals{};
};

inline void append_event_line(std::string& buf, const TraceEvent& e) {
  char tmp[32];
  auto put_int = [&](auto v) {
    auto [p, ec] = std::to_chars(tmp, tmp + sizeof tmp, v);
    buf.append(tmp, p);
  };
  put_int(e.ts);
  buf.push_back('\t');
  put_int(e.thread);
  buf.push_back('\t');
  buf.append(to_string(e.kind));
  switch (e.kind) {
    case EventKind::request_start:
    case EventKind::request_exit:
      buf.append("\treq=");
      put_int(e.request_id());
      break;
    case EventKind::syscall_entry:
    case EventKind::syscall_exit:
      buf.append("\tname=");
      buf.append(kSyscalls[e.syscall()]);
      break;
    case EventKind::sched_wakeup:
      buf.append("\twakee=");
      put_int(e.wakee());
      break;
    case EventKind::block_begin:
    case EventKind::block_end:
      buf.append("\treason=");
      buf.append(to_string(e.reason()));
      break;
    default:
      break;
  }
  buf.push_back('\n');
}

}  // namespace sim

// Writes a trace in the text format to `out`. Identical (seed, config)
// produces byte-identical output. Set `record_plans` to keep each request's
// planned critical path (memory grows with the request count).
inline GenerationResult generate(const WorkloadConfig& cfg, std::ostream& out, bool record_plans = false) {
  using namespace sim;
  cfg.validate();
  GenerationResult result;
  const auto& topo = cfg.topology;

  out << "# synthetic request trace: seed=" << cfg.seed << " requests=" << cfg.n_requests << '\n';

  // Arrival times come from an independent per-request stream.
  std::vector<Timestamp> arrivals(cfg.n_requests);
  double clock_ms = 1.0;
  for (std::size_t i = 0; i < cfg.n_requests; ++i) {
    KeyedRng rng(cfg.seed, i, 1);
    clock_ms += rng.exponential(cfg.mean_interarrival_ms);
    arrivals[i] = std::llround(clock_ms * kNsPerMs);
  }

  std::priority_queue<PendingEvent, std::vector<PendingEvent>, std::greater<>> heap;
  std::string buf;
  const auto flush_below = [&](Timestamp watermark) {
    while (!heap.empty() && heap.top().ts < watermark) {
      append_event_line(buf, heap.top().event);
      heap.pop();
      ++result.emitted_events;
      if (buf.size() > (1u << 20)) {
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        buf.clear();
      }
    }
  };

  // Preamble: every worker starts idle.
  std::map<ThreadId, BlockingReason> idle;
  std::map<ThreadId, Timestamp> free_at;
  std::uint64_t seq = 0;
  const auto preamble = [&](ThreadId tid, BlockingReason r) {
    idle[tid] = r;
    free_at[tid] = 0;
    heap.push({0, -1, seq++, TraceEvent::block(0, tid, EventKind::block_begin, r)});
    heap.push({0, -1, seq++, TraceEvent::sched(0, tid, EventKind::sched_switch_out)});
  };
  for (std::size_t i = 0; i < topo.front; ++i) preamble(kFrontBase + static_cast<ThreadId>(i), BlockingReason::network);
  for (std::size_t i = 0; i < topo.app; ++i) preamble(kAppBase + static_cast<ThreadId>(i), BlockingReason::task);
  for (std::size_t i = 0; i < topo.db; ++i) preamble(kDbBase + static_cast<ThreadId>(i), BlockingReason::task);
  for (std::size_t i = 0; i < topo.front; ++i) preamble(kIrqBase + static_cast<ThreadId>(i), BlockingReason::interrupt);

  const auto earliest = [&](ThreadId base, std::size_t n, std::optional<ThreadId> exclude) {
    ThreadId best = 0;
    Timestamp best_t = std::numeric_limits<Timestamp>::max();
    for (std::size_t i = 0; i < n; ++i) {
      const ThreadId tid = base + static_cast<ThreadId>(i);
      if (exclude && *exclude == tid) continue;
      if (free_at[tid] < best_t) {
        best_t = free_at[tid];
        best = tid;
      }
    }
    return best;
  };

  result.truth.requests.reserve(cfg.n_requests);
  std::vector<PendingEvent> events;
  for (std::size_t i = 0; i < cfg.n_requests; ++i) {
    const Script script = build_script(cfg, i);
    RequestEmitter::Threads th{};
    const std::size_t lane = i % topo.front;
    th.front = kFrontBase + static_cast<ThreadId>(lane);
    th.irq = kIrqBase + static_cast<ThreadId>(lane);
    th.app = earliest(kAppBase, topo.app, std::nullopt);
    th.db = script.has_db ? earliest(kDbBase, topo.db, std::nullopt) : 0;
    th.sibling = script.has_sibling ? earliest(kAppBase, topo.app, th.app) : 0;

    Timestamp start = std::max({arrivals[i], free_at[th.front], free_at[th.app]});
    if (script.has_db) start = std::max(start, free_at[th.db]);
    if (script.has_sibling) start = std::max(start, free_at[th.sibling]);

    RequestEmitter emitter(script, static_cast<std::int64_t>(i), th, idle, record_plans);
    RequestPlan plan;
    events.clear();
    const RequestId id = i + 1;
    emitter.emit(start, id, events, plan);
    for (auto& e : events) heap.push(e);

    for (ThreadId tid : plan.threads()) free_at[tid] = plan.end + kThreadGap;
    result.truth.requests.push_back({id, plan.label, plan.end - plan.start});
    if (record_plans) result.plans.push_back(std::move(plan));

    // Later requests never emit before their arrival minus the irq lead.
    if (i + 1 < cfg.n_requests) flush_below(arrivals[i + 1] - 5 * kIrqLead);
  }
  flush_below(std::numeric_limits<Timestamp>::max());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  return result;
}

inline std::pair<std::string, GenerationResult> generate_to_string(const WorkloadConfig& cfg,
                                                                   bool record_plans = false) {
  std::ostringstream os;
  auto result = generate(cfg, os, record_plans);
  return {std::move(os).str(), std::move(result)};
}

}  // namespace reqdiag
