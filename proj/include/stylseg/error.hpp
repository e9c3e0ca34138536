#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>

namespace stylseg {

/// Invalid user input: bad shapes, missing files, malformed config.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure or violated internal invariant (non-finite loss, etc.).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw InputError(message);
}

using WarningSink = std::function<void(const std::string&)>;

/// Destination for non-fatal diagnostics; stderr by default, replaceable
/// (e.g. by tests that count warnings).
inline WarningSink& warning_sink() {
  static WarningSink sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

inline void warn(const std::string& message) {
  if (warning_sink()) warning_sink()(message);
}

}  // namespace stylseg
