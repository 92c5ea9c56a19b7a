#pragma once

#include <stdexcept>
#include <string>

namespace ctun {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or channel counts that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad argument values (non-positive scale, unknown variant, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// File and format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

// Frame directory with no frames (index -1) or a gap in the numbering.
class MissingFrameError : public IoError {
 public:
  MissingFrameError(const std::string& what, int index) : IoError(what), index_(index) {}
  int index() const { return index_; }

 private:
  int index_;
};

// Malformed weight file.
class WeightFormatError : public IoError {
 public:
  enum class Kind { bad_magic, bad_version, bad_checksum, truncated, malformed };
  WeightFormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctun
