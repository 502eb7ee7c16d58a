#pragma once

#include <stdexcept>
#include <string>

namespace divae {

/// A caller broke a documented precondition (shape mismatch, empty batch, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A computation produced or consumed a non-finite value.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string op, const std::string& what)
      : std::runtime_error("numeric failure in '" + op + "': " + what), op_(std::move(op)) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Persisted file could not be decoded.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { io, magic, version, checksum, truncated, parse };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Experiment configuration is malformed; the message lists every offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace divae
