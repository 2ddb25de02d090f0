#pragma once

#include <stdexcept>
#include <string>

namespace synstitch {

// Base of every error the library raises. The CLI maps ValidationError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class InvalidParameter : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InvalidRange : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MissingArtifact : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InvalidTransform : public Error {
 public:
  using Error::Error;
};

class NoOverlap : public Error {
 public:
  using Error::Error;
};

class NoValidAffine : public Error {
 public:
  using Error::Error;
};

class InsufficientFeatures : public Error {
 public:
  using Error::Error;
};

class EstimationFailed : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class SamplingDiverged : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace synstitch
