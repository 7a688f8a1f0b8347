// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace shardtrain {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration, arguments, or input values. Maps to CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Incompatible tensor shapes.
class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// An operation was invoked in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Ranks disagree on a collective (op kind, sequence number, or lengths).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// The worker group was aborted while a rank was blocked in a collective.
class AbortedError : public Error {
 public:
  using Error::Error;
};

/// Memory ledger underflow.
class AccountingError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant was violated.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// A worker thread failed; the group was aborted.
class WorkerFailure : public Error {
 public:
  WorkerFailure(int rank, const std::string& what)
      : Error("worker rank " + std::to_string(rank) + " failed: " + what), rank_(rank) {}

  int rank() const noexcept { return rank_; }

 private:
  int rank_;
};

class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, std::size_t byte_offset)
      : Error(what + " at byte offset " + std::to_string(byte_offset)),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace shardtrain
