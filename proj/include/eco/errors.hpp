#ifndef ECO_ERRORS_HPP_
#define ECO_ERRORS_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace eco {

// Base of every error raised by the library. Each subclass names one failure
// category so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class SequenceLengthError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

class DegenerateFeatureError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ParityError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, double lr, const std::string& what)
      : Error(what), epoch_(epoch), lr_(lr) {}
  std::size_t epoch() const { return epoch_; }
  double lr() const { return lr_; }

 private:
  std::size_t epoch_;
  double lr_;
};

class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : Error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

}  // namespace eco

#endif  // ECO_ERRORS_HPP_
