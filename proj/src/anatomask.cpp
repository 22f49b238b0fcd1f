#include "zssl/anatomask.hpp"

#include <sstream>

namespace zssl::anatomask {

const char* view_name(View v) {
  switch (v) {
    case View::FourCH: return "4CH";
    case View::LVOT: return "LVOT";
    case View::RVOT: return "RVOT";
    case View::ThreeVT: return "3VT";
  }
  throw ConfigError("view_name: bad view");
}

View view_from_name(const std::string& name) {
  for (int i = 0; i < kNumViews; ++i)
    if (name == view_name((View)i)) return (View)i;
  throw ConfigError("unknown view name: " + name);
}

View view_from_index(int idx) {
  if (idx < 0 || idx >= kNumViews)
    throw ConfigError("view index out of range: " + std::to_string(idx));
  return (View)idx;
}

MaskTable MaskTable::defaults() {
  static const std::array<std::array<int, 8>, kNumViews> sets = {{
      {0, 1, 2, 3, 4, 5, 6, 7},       // 4CH
      {0, 1, 2, 4, 8, -1, -1, -1},    // LVOT
      {0, 6, 8, 9, 10, 11, 12, -1},   // RVOT
      {0, 9, 12, 13, 14, -1, -1, -1}  // 3VT
  }};
  MaskTable t;
  for (int v = 0; v < kNumViews; ++v)
    for (int c : sets[(std::size_t)v])
      if (c >= 0) t.allowed[(std::size_t)v][(std::size_t)c] = true;
  return t;
}

MaskTable MaskTable::from_csv(const std::array<std::string, kNumViews>& lists) {
  MaskTable t;
  for (int v = 0; v < kNumViews; ++v) {
    std::istringstream in(lists[(std::size_t)v]);
    std::string item;
    while (std::getline(in, item, ',')) {
      std::size_t pos = 0;
      int cls;
      try {
        cls = std::stoi(item, &pos);
      } catch (const std::exception&) {
        throw ConfigError("mask table: bad class entry '" + item + "'");
      }
      if (pos != item.size() || cls < 0 || cls >= kNumSegClasses)
        throw ConfigError("mask table: bad class entry '" + item + "'");
      t.allowed[(std::size_t)v][(std::size_t)cls] = true;
    }
  }
  t.validate();
  return t;
}

void MaskTable::validate() const {
  for (int v = 0; v < kNumViews; ++v)
    if (!allowed[(std::size_t)v][0])
      throw ConfigError(std::string("mask table: background not allowed for ") +
                        view_name((View)v));
}

Tensor apply_hard_mask(Tensor seg_logits, View view, const MaskTable& table) {
  if (seg_logits.shape.rank != 3 || seg_logits.shape[0] != kNumSegClasses)
    throw DimError("apply_hard_mask: logits must be 15xHxW, got " +
                   seg_logits.shape.str());
  const int hw = seg_logits.shape[1] * seg_logits.shape[2];
  for (int c = 0; c < kNumSegClasses; ++c) {
    if (table.is_allowed(view, c)) continue;
    float* p = seg_logits.data.data() + (std::size_t)c * hw;
    for (int i = 0; i < hw; ++i) p[i] = kMaskSentinel;
  }
  return seg_logits;
}

}  // namespace zssl::anatomask
