#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>

namespace dfmvi {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (CSV cells, config values).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input with the wrong shape: ragged rows, mismatched dimensions.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the admissible domain (nonpositive hyperparameters, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure or non-finite intermediate results.
class NumericalError : public Error {
 public:
  using Error::Error;
};

using WarningSink = std::function<void(const std::string&)>;

namespace detail {
inline WarningSink& warning_sink() {
  static WarningSink sink = [](const std::string& msg) { std::clog << "warning: " << msg << '\n'; };
  return sink;
}
}  // namespace detail

/// Replaces the warning handler; returns the previous one.
inline WarningSink set_warning_sink(WarningSink sink) {
  WarningSink old = std::move(detail::warning_sink());
  detail::warning_sink() = std::move(sink);
  return old;
}

inline void warn(const std::string& msg) {
  if (detail::warning_sink()) detail::warning_sink()(msg);
}

}  // namespace dfmvi
