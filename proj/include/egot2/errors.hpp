#pragma once

#include <stdexcept>
#include <string>

namespace egot2 {

// Every error carries the CLI exit code it maps to:
// 2 config/validation, 3 missing prerequisite, 4 incompatibility, 1 anything else.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what, 2) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, 1) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what, 1) {}
};

class MissingPrerequisite : public Error {
 public:
  explicit MissingPrerequisite(const std::string& what) : Error(what, 3) {}
};

class Incompatible : public Error {
 public:
  explicit Incompatible(const std::string& what) : Error(what, 4) {}
};

}  // namespace egot2
