// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fairmoe {

// Precondition / contract violations (bad shapes, invalid arguments, misuse).
class ContractError : public std::runtime_error {
public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch in a tensor operation.
class DimensionError : public ContractError {
public:
  explicit DimensionError(const std::string& msg) : ContractError(msg) {}
};

// A metric that is mathematically undefined on the given records
// (e.g. AUC on a single-class sample).
class UndefinedMetricError : public std::runtime_error {
public:
  explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input files (manifests, configs, checkpoints).
class ParseError : public std::runtime_error {
public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally valid input that violates the documented schema.
class SchemaError : public std::runtime_error {
public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a training loss goes non-finite.
class TrainingDiverged : public std::runtime_error {
public:
  explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fairmoe
