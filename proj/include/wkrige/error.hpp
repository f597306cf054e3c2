#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wkrige {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: violated preconditions, malformed files, inconsistent shapes.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what, std::vector<std::string> details = {})
      : Error(what), details_(std::move(details)) {}

  [[nodiscard]] const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  std::vector<std::string> details_;
};

/// A computation that cannot proceed: singular systems, non-converged solvers.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class E = ValidationError>
inline void require(bool condition, const char* message) {
  if (!condition) throw E(message);
}

}  // namespace detail
}  // namespace wkrige
