#pragma once

#include <stdexcept>
#include <string>

namespace bil {

/// Shape or length disagreement between tensors / parameter blocks.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Value outside an operation's mathematical domain (log of <= 0, sigma <= 0, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API contract violated (non-scalar loss, non-deterministic closure, wrong family, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Prior/model structural mismatch (layer counts, families, parameter sizes).
class StructureError : public std::runtime_error {
 public:
  explicit StructureError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad run configuration (T out of range, empty shard, odd class count, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed on-disk payload (bad magic, unknown version).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Internally inconsistent on-disk payload (length mismatch, truncated blob).
class ConsistencyError : public std::runtime_error {
 public:
  explicit ConsistencyError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Label or index outside its valid range.
class IndexError : public std::runtime_error {
 public:
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem failure while reading or writing artifacts.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bil
