#pragma once

#include <array>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace reqdiag {

// ----------------------------------------------------------------------------
// Event schema
// ----------------------------------------------------------------------------

enum class EventKind : std::uint8_t {
  request_start,
  request_exit,
  syscall_entry,
  syscall_exit,
  sched_switch_in,
  sched_switch_out,
  sched_wakeup,
  block_begin,
  block_end,
};

inline constexpr std::array<std::string_view, 9> kEventKindNames{
    "request_start",   "request_exit",     "syscall_entry", "syscall_exit", "sched_switch_in",
    "sched_switch_out", "sched_wakeup",    "block_begin",   "block_end",
};

enum class BlockingReason : std::uint8_t { disk, network, preempted, task, futex, interrupt, timer };

inline constexpr std::array<std::string_view, 7> kBlockingReasonNames{
    "disk", "network", "preempted", "task", "futex", "interrupt", "timer",
};

inline std::string_view to_string(EventKind k) { return kEventKindNames[static_cast<std::size_t>(k)]; }
inline std::string_view to_string(BlockingReason r) { return kBlockingReasonNames[static_cast<std::size_t>(r)]; }

template <typename Enum, std::size_t N>
std::optional<Enum> enum_from_string(const std::array<std::string_view, N>& names, std::string_view s) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<Enum>(i);
  }
  return std::nullopt;
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  return enum_from_string<EventKind>(kEventKindNames, s);
}

inline std::optional<BlockingReason> parse_blocking_reason(std::string_view s) {
  return enum_from_string<BlockingReason>(kBlockingReasonNames, s);
}

using SymbolId = std::uint32_t;

// Interned syscall names. Ids are assigned in order of first appearance.
class SymbolTable {
 public:
  SymbolId intern(std::string_view name) {
    auto it = _ids.find(std::string{name});
    if (it != _ids.end()) return it->second;
    const auto id = static_cast<SymbolId>(_names.size());
    _names.emplace_back(name);
    _ids.emplace(_names.back(), id);
    return id;
  }

  std::optional<SymbolId> find(std::string_view name) const {
    auto it = _ids.find(std::string{name});
    if (it == _ids.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name(SymbolId id) const { return _names.at(id); }
  std::size_t size() const noexcept { return _names.size(); }

 private:
  std::vector<std::string> _names;
  std::unordered_map<std::string, SymbolId> _ids;
};

// One timestamped event on one thread. The meaning of `arg` depends on the
// kind; use the typed accessors.
struct TraceEvent {
  Timestamp ts{0};
  ThreadId thread{0};
  EventKind kind{EventKind::request_start};
  std::uint64_t arg{0};

  static TraceEvent request(Timestamp ts, ThreadId tid, EventKind k, RequestId id) { return {ts, tid, k, id}; }
  static TraceEvent syscall(Timestamp ts, ThreadId tid, EventKind k, SymbolId name) { return {ts, tid, k, name}; }
  static TraceEvent wakeup(Timestamp ts, ThreadId waker, ThreadId wakee) {
    return {ts, waker, EventKind::sched_wakeup, wakee};
  }
  static TraceEvent block(Timestamp ts, ThreadId tid, EventKind k, BlockingReason r) {
    return {ts, tid, k, static_cast<std::uint64_t>(r)};
  }
  static TraceEvent sched(Timestamp ts, ThreadId tid, EventKind k) { return {ts, tid, k, 0}; }

  RequestId request_id() const noexcept { return arg; }
  SymbolId syscall() const noexcept { return static_cast<SymbolId>(arg); }
  ThreadId wakee() const noexcept { return static_cast<ThreadId>(arg); }
  BlockingReason reason() const noexcept { return static_cast<BlockingReason>(arg); }

  bool is_syscall() const noexcept { return kind == EventKind::syscall_entry || kind == EventKind::syscall_exit; }
  bool is_request() const noexcept { return kind == EventKind::request_start || kind == EventKind::request_exit; }
  bool is_block() const noexcept { return kind == EventKind::block_begin || kind == EventKind::block_end; }

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

// ----------------------------------------------------------------------------
// Trace
// ----------------------------------------------------------------------------

// Immutable after construction; safe for concurrent readers.
class Trace {
 public:
  using ThreadIndex = std::map<ThreadId, std::vector<std::uint32_t>>;

  Trace() = default;

  const std::vector<TraceEvent>& events() const noexcept { return _events; }
  const ThreadIndex& thread_index() const noexcept { return _threads; }
  const SymbolTable& symbols() const noexcept { return _symbols; }
  std::size_t size() const noexcept { return _events.size(); }

  std::span<const std::uint32_t> thread_events(ThreadId tid) const {
    auto it = _threads.find(tid);
    if (it == _threads.end()) return {};
    return it->second;
  }

  const std::string& syscall_name(const TraceEvent& e) const { return _symbols.name(e.syscall()); }

 private:
  friend class TraceBuilder;

  std::vector<TraceEvent> _events;
  ThreadIndex _threads;
  SymbolTable _symbols;
};

// Accumulates events in file order, validating as it goes. Used by the parser
// and by tests that build traces programmatically.
class TraceBuilder {
 public:
  SymbolId intern(std::string_view name) { return _trace._symbols.intern(name); }

  // `line` is only used for error messages.
  void add(const TraceEvent& e, std::size_t line = 0) {
    if (e.ts < 0) throw ParseError(line, "negative timestamp");
    auto& st = _state[e.thread];
    if (st.seen && e.ts < st.last_ts) {
      throw ParseError(line, "timestamp regression on thread " + std::to_string(e.thread) + " (" +
                                 std::to_string(e.ts) + " < " + std::to_string(st.last_ts) + ")");
    }
    if (e.kind == EventKind::sched_wakeup && e.wakee() == e.thread) {
      throw ParseError(line, "sched_wakeup with identical waker and wakee " + std::to_string(e.thread));
    }
    st.seen = true;
    st.last_ts = e.ts;

    switch (e.kind) {
      case EventKind::syscall_entry:
        st.open_syscalls.push_back(e.syscall());
        break;
      case EventKind::syscall_exit:
        if (st.open_syscalls.empty()) {
          _diag.warn("line " + std::to_string(line) + ": syscall_exit without entry on thread " +
                     std::to_string(e.thread) + "; dropped");
          return;
        }
        st.open_syscalls.pop_back();
        break;
      case EventKind::request_exit:
        close_open_syscalls(e.thread, st, e.ts, "request_exit");
        break;
      default:
        break;
    }
    _trace._events.push_back(e);
  }

  const Diagnostics& diagnostics() const noexcept { return _diag; }

  Trace finish(Diagnostics* diag = nullptr) && {
    for (auto& [tid, st] : _state) close_open_syscalls(tid, st, st.last_ts, "end of trace");

    auto& ev = _trace._events;
    const auto by_ts = [](const TraceEvent& a, const TraceEvent& b) { return a.ts < b.ts; };
    if (!std::is_sorted(ev.begin(), ev.end(), by_ts)) std::stable_sort(ev.begin(), ev.end(), by_ts);

    for (std::size_t i = 0; i < ev.size(); ++i) {
      _trace._threads[ev[i].thread].push_back(static_cast<std::uint32_t>(i));
    }
    if (diag) diag->append(_diag);
    return std::move(_trace);
  }

 private:
  struct ThreadState {
    bool seen{false};
    Timestamp last_ts{0};
    std::vector<SymbolId> open_syscalls;
  };

  // Unbalanced nesting is repaired rather than rejected: an exit is
  // synthesized at the end of the enclosing request window (or trace).
  void close_open_syscalls(ThreadId tid, ThreadState& st, Timestamp ts, std::string_view where) {
    while (!st.open_syscalls.empty()) {
      const SymbolId name = st.open_syscalls.back();
      st.open_syscalls.pop_back();
      _diag.warn("unbalanced syscall '" + _trace._symbols.name(name) + "' on thread " + std::to_string(tid) +
                 "; exit synthesized at " + std::string{where} + " (t=" + std::to_string(ts) + ")");
      _trace._events.push_back(TraceEvent::syscall(ts, tid, EventKind::syscall_exit, name));
    }
  }

  Trace _trace;
  std::map<ThreadId, ThreadState> _state;
  Diagnostics _diag;
};

// ----------------------------------------------------------------------------
// Text format: <ts>\t<tid>\t<kind>[\t<key>=<value>], '#' starts a comment
// ----------------------------------------------------------------------------

namespace detail {

inline std::string_view payload_key(EventKind k) {
  switch (k) {
    case EventKind::request_start:
    case EventKind::request_exit:
      return "req";
    case EventKind::syscall_entry:
    case EventKind::syscall_exit:
      return "name";
    case EventKind::sched_wakeup:
      return "wakee";
    case EventKind::block_begin:
    case EventKind::block_end:
      return "reason";
    default:
      return {};
  }
}

inline TraceEvent parse_record(std::string_view line, std::size_t lineno, TraceBuilder& builder) {
  const auto fields = split(line, '\t');
  if (fields.size() < 3) throw ParseError(lineno, "expected at least 3 tab-separated fields");

  TraceEvent e;
  if (!parse_int(fields[0], e.ts)) throw ParseError(lineno, "bad timestamp '" + std::string{fields[0]} + "'");
  if (!parse_int(fields[1], e.thread)) throw ParseError(lineno, "bad thread id '" + std::string{fields[1]} + "'");
  const auto kind = parse_event_kind(fields[2]);
  if (!kind) throw ParseError(lineno, "unknown event kind '" + std::string{fields[2]} + "'");
  e.kind = *kind;

  const auto key = payload_key(e.kind);
  if (key.empty()) {
    if (fields.size() != 3) throw ParseError(lineno, std::string{to_string(e.kind)} + " takes no payload");
    return e;
  }
  if (fields.size() != 4) throw ParseError(lineno, std::string{to_string(e.kind)} + " requires one payload field");
  const auto payload = fields[3];
  const auto eq = payload.find('=');
  if (eq == std::string_view::npos || payload.substr(0, eq) != key) {
    throw ParseError(lineno, "expected payload '" + std::string{key} + "=...'");
  }
  const auto value = payload.substr(eq + 1);

  switch (e.kind) {
    case EventKind::request_start:
    case EventKind::request_exit:
      if (!parse_int(value, e.arg)) throw ParseError(lineno, "bad request id '" + std::string{value} + "'");
      break;
    case EventKind::syscall_entry:
    case EventKind::syscall_exit:
      if (value.empty()) throw ParseError(lineno, "empty syscall name");
      e.arg = builder.intern(value);
      break;
    case EventKind::sched_wakeup: {
      ThreadId wakee{};
      if (!parse_int(value, wakee)) throw ParseError(lineno, "bad wakee '" + std::string{value} + "'");
      e.arg = wakee;
      break;
    }
    case EventKind::block_begin:
    case EventKind::block_end: {
      const auto r = parse_blocking_reason(value);
      if (!r) throw ParseError(lineno, "unknown blocking reason '" + std::string{value} + "'");
      e.arg = static_cast<std::uint64_t>(*r);
      break;
    }
    default:
      break;
  }
  return e;
}

}  // namespace detail

// Parses the newline-delimited trace format. Records are validated: malformed
// lines and per-thread timestamp regressions throw ParseError; unbalanced
// syscall nesting is repaired and reported through `diag`.
inline Trace parse_trace(std::istream& in, Diagnostics* diag = nullptr) {
  TraceBuilder builder;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    builder.add(detail::parse_record(line, lineno, builder), lineno);
  }
  return std::move(builder).finish(diag);
}

inline void write_event(std::ostream& out, const TraceEvent& e, const SymbolTable& symbols) {
  out << e.ts << '\t' << e.thread << '\t' << to_string(e.kind);
  switch (e.kind) {
    case EventKind::request_start:
    case EventKind::request_exit:
      out << "\treq=" << e.request_id();
      break;
    case EventKind::syscall_entry:
    case EventKind::syscall_exit:
      out << "\tname=" << symbols.name(e.syscall());
      break;
    case EventKind::sched_wakeup:
      out << "\twakee=" << e.wakee();
      break;
    case EventKind::block_begin:
    case EventKind::block_end:
      out << "\treason=" << to_string(e.reason());
      break;
    default:
      break;
  }
  out << '\n';
}

inline void serialize_trace(const Trace& trace, std::ostream& out) {
  for (const auto& e : trace.events()) write_event(out, e, trace.symbols());
}

// ----------------------------------------------------------------------------
// Request segmentation
// ----------------------------------------------------------------------------

struct RequestWindow {
  RequestId request_id{0};
  Timestamp start_ts{0};
  Timestamp end_ts{0};
  ThreadId entry_thread{0};

  Duration duration() const noexcept { return end_ts - start_ts; }
  bool contains(Timestamp t) const noexcept { return start_ts <= t && t <= end_ts; }

  friend bool operator==(const RequestWindow&, const RequestWindow&) = default;
};

struct Segmentation {
  std::vector<RequestWindow> windows;
  std::size_t dropped_starts{0};   // starts never matched (truncation, restarts, overlap)
  std::size_t orphan_exits{0};     // exits with no pending start
  Diagnostics diagnostics;
};

// Pairs request_start/request_exit events with equal request ids. Handling is
// assumed serial per entry thread: a start on a thread that still has an open
// request abandons the open one.
inline Segmentation segment_requests(const Trace& trace) {
  struct Pending {
    Timestamp ts;
    ThreadId thread;
    std::size_t order;
  };
  Segmentation out;
  std::unordered_map<RequestId, Pending> pending;
  std::unordered_map<ThreadId, RequestId> open_on_thread;
  std::vector<std::pair<std::size_t, RequestWindow>> found;

  const auto abandon = [&](RequestId id, std::string_view why) {
    pending.erase(id);
    ++out.dropped_starts;
    out.diagnostics.warn("request " + std::to_string(id) + " dropped: " + std::string{why});
  };

  const auto& ev = trace.events();
  for (std::size_t i = 0; i < ev.size(); ++i) {
    const auto& e = ev[i];
    if (e.kind == EventKind::request_start) {
      const RequestId id = e.request_id();
      if (pending.contains(id)) {
        open_on_thread.erase(pending[id].thread);
        abandon(id, "restarted before exit");
      }
      if (auto it = open_on_thread.find(e.thread); it != open_on_thread.end()) {
        abandon(it->second, "overlapping request on thread " + std::to_string(e.thread));
        open_on_thread.erase(it);
      }
      pending[id] = Pending{e.ts, e.thread, i};
      open_on_thread[e.thread] = id;
    } else if (e.kind == EventKind::request_exit) {
      const RequestId id = e.request_id();
      auto it = pending.find(id);
      if (it == pending.end()) {
        ++out.orphan_exits;
        out.diagnostics.warn("request_exit for request " + std::to_string(id) + " without a start; ignored");
        continue;
      }
      const Pending p = it->second;
      pending.erase(it);
      if (auto ot = open_on_thread.find(p.thread); ot != open_on_thread.end() && ot->second == id) {
        open_on_thread.erase(ot);
      }
      if (e.ts <= p.ts) {
        ++out.dropped_starts;
        out.diagnostics.warn("request " + std::to_string(id) + " dropped: empty window");
        continue;
      }
      found.push_back({p.order, RequestWindow{id, p.ts, e.ts, p.thread}});
    }
  }
  out.dropped_starts += pending.size();
  if (!pending.empty()) {
    out.diagnostics.warn(std::to_string(pending.size()) + " request(s) without request_exit (truncated trace)");
  }

  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  out.windows.reserve(found.size());
  for (auto& [order, w] : found) out.windows.push_back(w);
  return out;
}

}  // namespace reqdiag
