#pragma once

#include <stdexcept>
#include <string>

namespace axfault {

// Every error the library raises derives from Error; category() is the short
// machine-readable tag the CLI prints.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "invalid-argument"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "shape"; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "format"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "io"; }
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "diverged"; }
};

class NotFound : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "not-found"; }
};

}  // namespace axfault
