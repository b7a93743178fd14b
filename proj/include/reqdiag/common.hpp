#pragma once

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <exception>
#include <cstdio>
#include <numbers>
#include <thread>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace reqdiag {

using Timestamp = std::int64_t;   // nanoseconds since trace start
using Duration = std::int64_t;    // nanoseconds
using ThreadId = std::uint32_t;
using RequestId = std::uint64_t;

inline constexpr double kNsPerMs = 1e6;

inline double ns_to_ms(Duration d) { return static_cast<double>(d) / kNsPerMs; }

// ----------------------------------------------------------------------------
// Errors
// ----------------------------------------------------------------------------

// Bad user input: malformed files, bad parameters, missing stage outputs.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public InputError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : InputError("line " + std::to_string(line) + ": " + what), _line{line} {}

  std::size_t line() const noexcept { return _line; }

 private:
  std::size_t _line;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

// A computed result broke one of its own invariants. Always a bug.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void check_invariant(bool cond, const std::string& what) {
  if (!cond) throw InvariantError(what);
}

// Non-fatal findings (repairs, dropped edges, ambiguous wakeups).
struct Diagnostics {
  std::vector<std::string> warnings;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
  bool empty() const noexcept { return warnings.empty(); }
  void append(const Diagnostics& other) {
    warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
  }
};

// ----------------------------------------------------------------------------
// Matrix: dense row-major storage for feature sets
// ----------------------------------------------------------------------------

template <typename T>
class BasicMatrix {
 public:
  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : _rows{rows}, _cols{cols}, _data(rows * cols, fill) {}

  std::size_t rows() const noexcept { return _rows; }
  std::size_t cols() const noexcept { return _cols; }
  bool empty() const noexcept { return _rows == 0; }

  T& operator()(std::size_t r, std::size_t c) { return _data[r * _cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return _data[r * _cols + c]; }

  std::span<T> row(std::size_t r) { return {_data.data() + r * _cols, _cols}; }
  std::span<const T> row(std::size_t r) const { return {_data.data() + r * _cols, _cols}; }

  std::span<const T> data() const noexcept { return _data; }

  void append_row(std::span<const T> values) {
    if (_rows == 0 && _cols == 0) _cols = values.size();
    if (values.size() != _cols) throw std::invalid_argument("append_row: width mismatch");
    _data.insert(_data.end(), values.begin(), values.end());
    ++_rows;
  }

  BasicMatrix select_rows(std::span<const std::size_t> idx) const {
    BasicMatrix out(idx.size(), _cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(row(idx[i]).begin(), _cols, out.row(i).begin());
    }
    return out;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t _rows{0};
  std::size_t _cols{0};
  std::vector<T> _data;
};

using Matrix = BasicMatrix<double>;

template <typename T>
bool all_finite(const BasicMatrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(),
                     [](T v) { return std::isfinite(static_cast<double>(v)); });
}

// Squared Euclidean distance, summed in index order. Every distance
// comparison in the library goes through this so that boundary decisions
// (<= eps) are reproducible bit-for-bit.
inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// ----------------------------------------------------------------------------
// Random numbers
// ----------------------------------------------------------------------------

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based stream: the state is a pure function of (seed, key, stream),
// so any request (or restart) can be drawn independently of all the others.
// Distributions are implemented here rather than taken from <random>, whose
// distribution algorithms are implementation-defined.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::uint64_t key, std::uint64_t stream = 0) noexcept
      : _base{splitmix64(splitmix64(seed ^ 0x5851f42d4c957f2dULL) ^ splitmix64(key + 0x14057b7ef767814fULL)
                         ^ (stream * 0xd1342543de82ef95ULL))} {}

  std::uint64_t next_u64() noexcept { return splitmix64(_base + 0x9e3779b97f4a7c15ULL * ++_counter); }

  // Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Box-Muller; one variate per call keeps the stream position predictable.
  double normal(double mean = 0.0, double stddev = 1.0) noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double lognormal(double location, double scale) noexcept { return std::exp(normal(location, scale)); }

  double exponential(double mean) noexcept {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -mean * std::log(u);
  }

  std::size_t weighted_index(std::span<const double> weights) noexcept {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (r < weights[i]) return i;
      r -= weights[i];
    }
    return weights.size() - 1;
  }

 private:
  std::uint64_t _base;
  std::uint64_t _counter{0};
};

// ----------------------------------------------------------------------------
// Parallelism
// ----------------------------------------------------------------------------

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i) for i in [0, n) over contiguous blocks. fn must only write to
// slot i of its outputs; results are then independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t block = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t lo = t * block;
        const std::size_t hi = std::min(n, lo + block);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ----------------------------------------------------------------------------
// Formatting
// ----------------------------------------------------------------------------

// Six significant digits, used for every floating-point value written to disk.
inline std::string fmt6(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline double round6(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  return std::stod(fmt6(v));
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(s.substr(pos, next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

}  // namespace reqdiag
