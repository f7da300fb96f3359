#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace winmamba {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller violated an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad configuration file or option set.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Integer triple used for voxel coordinates, window extents, strides and
// sampling factors alike.
using Triple = std::array<int64_t, 3>;
using Coord = Triple;

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct Aabb {
  Vec3 min;
  Vec3 max;
  bool valid() const { return min.x < max.x && min.y < max.y && min.z < max.z; }
};

inline int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// Deterministic per-name seed derivation: parameter values depend only on
// (seed, name), never on creation order.
uint64_t mix_seed(uint64_t seed, std::string_view name);

std::string triple_str(const Triple& t);

}  // namespace winmamba
