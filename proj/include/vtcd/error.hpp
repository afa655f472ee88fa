#pragma once

#include <stdexcept>
#include <string>

namespace vtcd {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented invariant (non-finite data, bad parameter range).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow the expected on-disk layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Shapes or extents disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Phantom cells could not be placed within the attempt budget.
class PlacementError : public Error {
 public:
  using Error::Error;
};

/// No separating direction exists between two latent classes.
class DegeneracyError : public Error {
 public:
  using Error::Error;
};

/// A callback (e.g. a noise predictor) broke its output contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite loss.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace vtcd
