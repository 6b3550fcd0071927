#pragma once

#include <stdexcept>
#include <string>

namespace stagecap {

/// Raised for every contract violation the library detects (bad shapes,
/// malformed files, invalid configuration).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace stagecap
