#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace leuq {

inline constexpr int kFormatVersion = 1;

// Error taxonomy. Every failure mode maps onto one of these so callers
// (and the CLI exit-code mapping) can distinguish them.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Invalid shapes fed to an operation.
struct ShapeError : Error {
  using Error::Error;
};
// Invalid configuration (extents, divisibility, window arithmetic, flags).
struct ConfigError : Error {
  using Error::Error;
};
// API misuse (non-scalar backward, sigma decode on a deterministic model).
struct ContractError : Error {
  using Error::Error;
};
// NaN/Inf surfaced during computation.
struct NumericError : Error {
  using Error::Error;
};
// Time-step stability violation in the solver.
struct StabilityError : Error {
  using Error::Error;
};
// File format problems: magic, version, checksum, truncation.
struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace leuq
