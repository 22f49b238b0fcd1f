#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace zssl {

// Shape/index contract violations (bad dims, out-of-range targets).
struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad files, bad stored values, missing artifacts.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration: unknown keys, bad parameter values, empty scopes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure: NaN/Inf where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense tensor shape, rank 1..4, row-major.
struct Shape {
  std::array<int, 4> d{0, 0, 0, 0};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() == 0 || dims.size() > 4)
      throw DimError("Shape: rank must be 1..4");
    for (int v : dims) {
      if (v <= 0) throw DimError("Shape: dims must be positive");
      d[static_cast<size_t>(rank++)] = v;
    }
  }

  int operator[](int i) const { return d[static_cast<size_t>(i)]; }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= d[static_cast<size_t>(i)];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (d[static_cast<size_t>(i)] != o.d[static_cast<size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
      if (i) s += ",";
      s += std::to_string(d[static_cast<size_t>(i)]);
    }
    return s + "]";
  }
};

}  // namespace zssl
