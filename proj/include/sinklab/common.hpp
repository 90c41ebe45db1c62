#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sinklab {

using Shape = std::vector<int64_t>;

// Error taxonomy. The CLI maps ConfigError/InputError to exit 2 and the
// rest to exit 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct StatisticsError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace sinklab
