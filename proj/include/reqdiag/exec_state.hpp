#pragma once

#include <array>
#include <optional>
#include <string_view>

#include "trace_model.hpp"

namespace reqdiag {

// Execution states of a thread interval, in feature-vector order. Total
// request time is derived from the window and is not a state.
enum class ExecState : std::uint8_t { RS, RU, BD, BN, BP, BT, BF, BI, BS };

inline constexpr std::size_t kNumStates = 9;

inline constexpr std::array<std::string_view, kNumStates> kExecStateNames{
    "RS", "RU", "BD", "BN", "BP", "BT", "BF", "BI", "BS",
};

inline std::string_view to_string(ExecState s) { return kExecStateNames[static_cast<std::size_t>(s)]; }

inline std::optional<ExecState> parse_exec_state(std::string_view s) {
  return enum_from_string<ExecState>(kExecStateNames, s);
}

inline constexpr std::size_t index_of(ExecState s) { return static_cast<std::size_t>(s); }

inline constexpr ExecState blocked_state(BlockingReason r) {
  switch (r) {
    case BlockingReason::disk:
      return ExecState::BD;
    case BlockingReason::network:
      return ExecState::BN;
    case BlockingReason::preempted:
      return ExecState::BP;
    case BlockingReason::task:
      return ExecState::BT;
    case BlockingReason::futex:
      return ExecState::BF;
    case BlockingReason::interrupt:
      return ExecState::BI;
    case BlockingReason::timer:
      return ExecState::BS;
  }
  return ExecState::BP;
}

inline constexpr bool is_blocked(ExecState s) { return s != ExecState::RS && s != ExecState::RU; }

}  // namespace reqdiag
