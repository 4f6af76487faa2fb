#pragma once

#include <stdexcept>
#include <string>

namespace vbsd {

// Single exception type for contract violations (bad shapes, non-finite
// values, malformed files/configs). The CLI maps these to exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(what);
}

}  // namespace vbsd
