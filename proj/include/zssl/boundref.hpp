#pragma once

#include <cstdint>
#include <vector>

#include "zssl/common.hpp"

namespace zssl::boundref {

// Pixel-inclusive bounds of one connected component.
struct Box {
  int cls = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(int x, int y) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
  std::int64_t area() const {
    return static_cast<std::int64_t>(x1 - x0 + 1) * (y1 - y0 + 1);
  }
};

// One box per 4-connected component of each nonzero class, components below
// min_area dropped; ordered by (class, y0, x0).
std::vector<Box> extract_boxes(const std::uint8_t* mask, int h, int w,
                               int min_area = 4);

// |a==c AND b==c| / |a==c OR b==c|; both-empty -> 1.0.
double iou(const std::uint8_t* a, const std::uint8_t* b, std::size_t n,
           int cls);

// Built-in refiner stub: per box, Otsu threshold on intensities, keep the
// largest 4-connected component overlapping the initial one, fill small
// holes, assign the box's class. Pixels outside every box copy init.
std::vector<std::uint8_t> morph_refine(const float* image,
                                       const std::uint8_t* init, int h, int w,
                                       const std::vector<Box>& boxes);

struct GateDecision {
  int cls = 0;
  double iou = 0.0;
  bool adopted = false;
  std::int64_t conflict_pixels = 0;  // lost to a lower class on overlap
};

// Per class, adopt refined's region iff iou(init, refined, c) >= theta
// (theta clamped to [0,1]); background is the complement. Overlapping
// adopted regions resolve to the lowest class index.
std::vector<std::uint8_t> iou_gate(const std::uint8_t* init,
                                   const std::uint8_t* refined, int h, int w,
                                   double theta,
                                   std::vector<GateDecision>* decisions = nullptr);

class Refiner {
 public:
  virtual ~Refiner() = default;
  virtual std::vector<std::uint8_t> refine(const float* image,
                                           const std::uint8_t* init, int h,
                                           int w,
                                           const std::vector<Box>& boxes) const = 0;
};

class MorphRefiner : public Refiner {
 public:
  std::vector<std::uint8_t> refine(const float* image,
                                   const std::uint8_t* init, int h, int w,
                                   const std::vector<Box>& boxes) const override {
    return morph_refine(image, init, h, w, boxes);
  }
};

// Test oracle: returns the stored ground truth inside boxes. Never reachable
// from training configs; the CLI rejects refiner=oracle.
class OracleRefiner : public Refiner {
 public:
  std::vector<std::uint8_t> gt;

  std::vector<std::uint8_t> refine(const float*, const std::uint8_t* init,
                                   int h, int w,
                                   const std::vector<Box>& boxes) const override {
    if (gt.size() != static_cast<std::size_t>(h) * w)
      throw DimError("OracleRefiner: gt dims mismatch");
    std::vector<std::uint8_t> out(init, init + gt.size());
    for (const Box& b : boxes)
      for (int y = b.y0; y <= b.y1; ++y)
        for (int x = b.x0; x <= b.x1; ++x)
          out[static_cast<std::size_t>(y) * w + x] =
              gt[static_cast<std::size_t>(y) * w + x];
    return out;
  }
};

}  // namespace zssl::boundref
