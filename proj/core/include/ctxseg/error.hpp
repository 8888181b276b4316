#pragma once

#include <stdexcept>
#include <string>

namespace ctxseg {

// Every failure raised by the library derives from Error so callers can
// distinguish library diagnostics from std exceptions.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Parameter outside its mathematical domain (non-positive temperature, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class EmptyGraphError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class CompletenessError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxseg
