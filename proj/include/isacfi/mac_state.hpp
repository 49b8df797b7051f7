#pragma once

#include <stdexcept>
#include <string>

namespace isacfi {

/// Communication, Monostatic sensing, Bistatic sensing.
enum class MacState { C, M, B };

inline const char* to_string(MacState s) {
  switch (s) {
    case MacState::C: return "C";
    case MacState::M: return "M";
    case MacState::B: return "B";
  }
  return "?";
}

/// Raised when an operation is attempted in a state the protocol does not allow.
struct ProtocolViolation : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace isacfi
