#pragma once

#include <stdexcept>
#include <string>

namespace msnet {

/// Tensor shapes that do not fit an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an API precondition (non-scalar loss, bad argument range).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Normalization routing asked for a site the layer does not own.
class SiteRoutingError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace msnet

namespace msnet {

/// A metric has no value for its input (surface distance of an empty mask).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace msnet
