#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace mematch {

// Base class for all library errors. Subclasses select the CLI exit code:
// ConfigError/IoError -> 1, NumericError -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void concat_into(std::ostringstream&) {}

template <class T, class... Rest>
void concat_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  concat_into(os, rest...);
}

}  // namespace detail

template <class... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  detail::concat_into(os, args...);
  return os.str();
}

}  // namespace mematch
