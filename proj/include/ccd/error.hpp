#pragma once

#include <stdexcept>
#include <string>

namespace ccd {

/// Error families map one-to-one onto CLI exit codes.
enum class ErrorFamily : int {
  kConfig = 2,
  kInput = 3,
  kProvider = 4,
  kNumeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorFamily family, const std::string& what)
      : std::runtime_error(what), family_(family) {}

  ErrorFamily family() const noexcept { return family_; }
  int exit_code() const noexcept { return static_cast<int>(family_); }

 private:
  ErrorFamily family_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorFamily::kConfig, what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what)
      : Error(ErrorFamily::kInput, what) {}
};

class ProviderError : public Error {
 public:
  explicit ProviderError(const std::string& what)
      : Error(ErrorFamily::kProvider, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorFamily::kNumeric, what) {}
};

}  // namespace ccd
