#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace predmob {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data: bad CSV cells, invalid treatment coding, empty arms.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments or configuration supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Weighted design matrix without full column rank.
class SingularDesignError : public Error {
 public:
  SingularDesignError(const std::string& what, std::vector<std::size_t> columns)
      : Error(what), columns_(std::move(columns)) {}
  const std::vector<std::size_t>& columns() const noexcept { return columns_; }

 private:
  std::vector<std::size_t> columns_;
};

// A node (or sample) that lacks positive weight in one treatment arm.
class DegenerateNodeError : public Error {
 public:
  using Error::Error;
};

// No admissible adjustment plan exists (e.g. exact matching without any mixed stratum).
class InfeasiblePlanError : public Error {
 public:
  using Error::Error;
};

// Too many failed replicates in an experiment batch.
class ExperimentFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace predmob
