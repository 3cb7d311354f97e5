#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sumd {

// Invalid model/run configuration (bad shapes, inconsistent fields).
// The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runtime input data violates a precondition (negative NMF input,
// undersized image, unreadable file).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numeric failure: non-finite values, corrupt checkpoint payloads.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* what) {
  if (s.empty()) throw ConfigError(std::string(what) + ": empty shape");
  for (int64_t d : s)
    if (d < 1)
      throw ConfigError(std::string(what) + ": all dimensions must be >= 1, got " + shape_str(s));
}

}  // namespace sumd
