#pragma once

#include <stdexcept>
#include <string>

namespace ctguard {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Volume ingestion failures (missing directory, bad geometry, unreadable file).
class IngestError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration or command line; the CLI maps this to exit 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A domain invariant was violated by caller-supplied data; CLI exit 3.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// Archive (checkpoint / weights) read or write failure. `section()` names the
/// part of the file that could not be decoded.
class ArchiveError : public Error {
 public:
  ArchiveError(std::string section, const std::string& what)
      : Error("archive section '" + section + "': " + what), section_(std::move(section)) {}
  [[nodiscard]] const std::string& section() const { return section_; }

 private:
  std::string section_;
};

/// Non-finite loss or similar training abort.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctguard
