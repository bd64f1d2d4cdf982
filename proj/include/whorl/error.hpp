#pragma once

#include <stdexcept>
#include <string>

namespace whorl {

/// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
struct IoError : Error {
  using Error::Error;
};

/// Input bytes do not follow the declared format. The message carries the
/// line number (text formats) or byte offset (binary formats).
struct ParseError : Error {
  using Error::Error;
};

/// A JSON document is missing a field or has a field of the wrong shape.
struct SchemaError : Error {
  using Error::Error;
};

/// A configuration value violates its documented range.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace whorl
