#pragma once

#include <array>
#include <string>

#include "zssl/tensor.hpp"

namespace zssl::anatomask {

inline constexpr int kNumSegClasses = 15;
inline constexpr int kNumViews = 4;
// Finite sentinel so softmax over masked logits stays NaN-free while the
// disallowed classes get effectively zero probability.
inline constexpr float kMaskSentinel = -1e9f;

enum class View : int { FourCH = 0, LVOT = 1, RVOT = 2, ThreeVT = 3 };

const char* view_name(View v);
View view_from_name(const std::string& name);
View view_from_index(int idx);

// Anatomically plausible segmentation classes per view.
struct MaskTable {
  std::array<std::array<bool, kNumSegClasses>, kNumViews> allowed{};

  static MaskTable defaults();
  // One comma-separated class list per view, e.g. "0,1,2,4,8".
  static MaskTable from_csv(const std::array<std::string, kNumViews>& lists);

  bool is_allowed(View v, int cls) const {
    return allowed[(std::size_t)(int)v][(std::size_t)cls];
  }
  void validate() const;  // background everywhere, entries in range
};

// Sets disallowed channels of 15xHxW logits to the sentinel; allowed
// channels pass through bit-identical. Idempotent.
Tensor apply_hard_mask(Tensor seg_logits, View view,
                       const MaskTable& table = MaskTable::defaults());

}  // namespace zssl::anatomask
