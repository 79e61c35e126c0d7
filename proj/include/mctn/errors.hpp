#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mctn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Bad numeric content (NaN/Inf) or an out-of-domain value.
struct ValueError : Error {
  using Error::Error;
};

// File or serialization problem.
struct IoError : Error {
  using Error::Error;
};

// Invalid run configuration (unknown variant, missing modality, ...).
struct ConfigError : Error {
  using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <class T, class... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

template <class... Parts>
std::string cat(const Parts&... parts) {
  std::ostringstream os;
  detail::cat_into(os, parts...);
  return os.str();
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

}  // namespace mctn
