#pragma once

#include <stdexcept>
#include <string>

namespace neuropipe {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// File is not a NIfTI-1 volume, or a structured text document is malformed.
class FormatError : public Error {
public:
  using Error::Error;
};

class UnsupportedDtypeError : public Error {
public:
  using Error::Error;
};

// Data section ends before dim[] says it should.
class TruncationError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Grid/affine mismatch between operands, or a matrix that violates rigidity.
class GeometryError : public Error {
public:
  using Error::Error;
};

// Too few voxels, zero variance, empty mask, empty record list.
class DegenerateInputError : public Error {
public:
  using Error::Error;
};

class LabelError : public Error {
public:
  using Error::Error;
};

class UsageError : public Error {
public:
  using Error::Error;
};

// An external tool exited nonzero, or a pipeline stage could not complete.
class StageFailureError : public Error {
public:
  using Error::Error;
};

class TimeoutError : public StageFailureError {
public:
  using StageFailureError::StageFailureError;
};

// Tool exited 0 but did not produce its declared output.
class ToolContractError : public Error {
public:
  using Error::Error;
};

} // namespace neuropipe
