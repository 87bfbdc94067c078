#pragma once

#include <stdexcept>
#include <string>

namespace gsh {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (bad keys, bad values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data problems: lattice mismatches, malformed files, wrong class counts.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite state, singular systems and other numerical breakdowns.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// W^T L W lost rank; the offending mode must be reinitialised.
class RankDeficiencyError : public NumericalError {
 public:
  RankDeficiencyError(const std::string& what, int mode)
      : NumericalError(what), mode_(mode) {}
  int mode() const { return mode_; }

 private:
  int mode_;
};

}  // namespace gsh
