#pragma once

#include <atomic>
#include <cstddef>
#include <iostream>
#include <stdexcept>
#include <string>

namespace hjs {

/// Caller violated a documented precondition (bad shapes, times out of range, ...).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation not defined for the given variant (e.g. divergence of a general drift).
class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A simulation or solve produced a non-finite value or lost a structural property.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t path, std::size_t step)
      : std::runtime_error(what + " (path " + std::to_string(path) + ", step " +
                           std::to_string(step) + ")"),
        path_(path),
        step_(step) {}
  explicit NumericalError(const std::string& what)
      : std::runtime_error(what), path_(npos), step_(npos) {}

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t path() const noexcept { return path_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t path_;
  std::size_t step_;
};

/// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw PreconditionError(msg);
}

/// Number of warnings raised so far in this process.
inline std::atomic<std::size_t>& warning_count() {
  static std::atomic<std::size_t> count{0};
  return count;
}

/// Logs to stderr; only the first few are printed, all are counted.
inline void warn(const std::string& msg) {
  if (warning_count().fetch_add(1) < 5) std::clog << "hjs warning: " << msg << '\n';
}

}  // namespace hjs
