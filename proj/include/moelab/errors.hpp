// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training, or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user input: overlong sequences, out-of-vocabulary ids, unreadable files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A parameter is degenerate for the requested computation (zero norm).
class DegenerateParameterError : public Error {
 public:
  using Error::Error;
};

/// A metric is mathematically undefined for the given setting (e.g. k = 1).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Statistical routine cannot run on the supplied sample.
class StatisticsError : public Error {
 public:
  using Error::Error;
};

/// Correlation undefined because a series is constant.
class UndefinedCorrelationError : public StatisticsError {
 public:
  using StatisticsError::StatisticsError;
};

/// Too few observations for the requested statistic.
class SampleSizeError : public StatisticsError {
 public:
  using StatisticsError::StatisticsError;
};

/// Paired test on differences that are all exactly zero.
class DegenerateTestError : public StatisticsError {
 public:
  using StatisticsError::StatisticsError;
};

/// Loss became non-finite during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A sweep lacks the cells needed for the requested analysis.
class AnalysisScopeError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint, metrics, or CSV file could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moelab
