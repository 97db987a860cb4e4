#pragma once

#include <stdexcept>
#include <string>

namespace glossrec {

// Shape or dimensionality mismatch between operands.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration value (window < 1, bad preset, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse (non-scalar backward, push after finish, ...).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// A forward op produced NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Input sequence shorter than the encoder window.
class SequenceTooShortError : public std::runtime_error {
 public:
  SequenceTooShortError(int got, int minimum)
      : std::runtime_error("sequence of length " + std::to_string(got) +
                           " is too short; at least " + std::to_string(minimum) +
                           " frames are required"),
        got_(got),
        minimum_(minimum) {}
  int got() const { return got_; }
  int minimum() const { return minimum_; }

 private:
  int got_;
  int minimum_;
};

// Target sequence cannot be aligned to the given number of steps.
class InfeasibleTargetError : public std::runtime_error {
 public:
  explicit InfeasibleTargetError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace glossrec
