#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "zssl/tensor.hpp"

namespace zssl::gradcheck {

struct Options {
  float h = 1e-3f;          // central-difference step
  double rel_tol = 1e-3;
  double abs_floor = 1e-5;  // below this magnitude, absolute comparison
  int max_coords_per_param = 0;  // 0 = all coordinates
  std::uint64_t seed = 0;        // coordinate subsampling stream
};

struct Result {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double max_rel_err = 0.0;
  std::vector<double> rels;  // per-coordinate relative errors
  double frac_passed() const {
    return checked ? (double)passed / (double)checked : 1.0;
  }
  // Smallest bound covering the given fraction of coordinates.
  double rel_err_at_coverage(double frac) const;
};

// Central finite differences against backward() gradients. `forward` is the
// oracle: an independent double-precision evaluation of the same function at
// the current (float) parameter values, so the difference quotient is not
// drowned in float32 loss quantization. `compute_grads` must leave each
// param's grad populated via the float32 graph under test.
Result check(const std::vector<TensorRef>& params,
             const std::function<double()>& forward,
             const std::function<void()>& compute_grads,
             const Options& opt = {});

// The full primitive-op suite plus one composed multi-task-style net, as run
// by the check-grad subcommand. Prints one line per case to stdout when
// verbose; results are merged across cases. The default step is small:
// the oracle is double-precision so there is no noise floor to beat, and a
// small step keeps relu-kink crossings (the one O(1) error source) rare.
Result run_suite(std::uint64_t seed, bool verbose, float h = 1e-5f);

}  // namespace zssl::gradcheck
