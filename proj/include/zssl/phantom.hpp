#pragma once

#include <cstdint>
#include <vector>

#include "zssl/anatomask.hpp"
#include "zssl/tensor.hpp"

namespace zssl::phantom {

using anatomask::View;

inline constexpr int kChdClasses = 7;

// One synthetic fetal-cardiac phantom. Unlabeled samples still carry
// mask/chd for oracle evaluation; the trainer must not read them.
struct Sample {
  Tensor image;                    // 1xHxW, values in [0,1]
  std::vector<std::uint8_t> mask;  // HxW class ids, 0..14
  View view = View::FourCH;
  int chd = 0;  // 0..6, 0 = normal
  bool labeled = true;

  int h() const { return image.shape[1]; }
  int w() const { return image.shape[2]; }
};

struct PhantomParams {
  int h = 64, w = 64;
  double speckle_var = 0.01;   // variance of the mean-1 multiplicative noise
  double shadow_prob = 0.35;   // chance of one occlusion band
  double shadow_atten = 0.35;  // intensity multiplier inside the band
};

// Geometry perturbation per CHD class: the first anchor structure scales by
// this factor and the second by (2 - factor), so the anchor size ratio
// identifies the class in every view.
double chd_factor(int chd);

// Piecewise-constant rendering intensity for a mask class (0 = background).
float class_intensity(int cls);

// Deterministic in (seed, view, chd, params); 2-5 ellipse/annulus structures
// drawn from the view's allowed classes, then speckle and shadow on the
// image only.
Sample generate_phantom(std::uint64_t seed, View view, int chd,
                        const PhantomParams& p = {});

}  // namespace zssl::phantom
