#pragma once

#include <stdexcept>
#include <string>

namespace mmtumor {

/// Root of every error raised by the library. The category drives the CLI
/// exit code.
class Error : public std::runtime_error {
 public:
  enum class Category { Usage, Data, Divergence };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

/// Invalid argument to a numeric routine (levels < 2, empty image, ...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(Category::Usage, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::Usage, what) {}
};

/// Tensor or vector dimensions disagree.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(Category::Usage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::Data, what) {}
};

class LoadError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class BalanceError : public DataError {
 public:
  using DataError::DataError;
};

class StandardizationError : public DataError {
 public:
  using DataError::DataError;
};

class PartitionError : public DataError {
 public:
  using DataError::DataError;
};

class MetricError : public DataError {
 public:
  using DataError::DataError;
};

class EvaluationError : public DataError {
 public:
  using DataError::DataError;
};

class BuildError : public Error {
 public:
  explicit BuildError(const std::string& what) : Error(Category::Usage, what) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error(Category::Data, what) {}
};

/// Loss became NaN or infinite.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : Error(Category::Divergence, what), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace mmtumor
