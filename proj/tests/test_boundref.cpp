#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "zssl/boundref.hpp"
#include "zssl/phantom.hpp"

using namespace zssl;
using boundref::Box;

namespace {

struct Canvas {
  int h, w;
  std::vector<std::uint8_t> mask;
  std::vector<float> img;
  Canvas(int hh, int ww, float bg = 0.1f)
      : h(hh), w(ww), mask((std::size_t)hh * ww, 0),
        img((std::size_t)hh * ww, bg) {}
  void rect(int cls, int x0, int y0, int x1, int y1, float intensity = -1) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        mask[(std::size_t)y * w + x] = (std::uint8_t)cls;
        if (intensity >= 0) img[(std::size_t)y * w + x] = intensity;
      }
  }
  void bright(int x0, int y0, int x1, int y1, float v) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) img[(std::size_t)y * w + x] = v;
  }
};

// true when no two distinct foreground classes touch 4-adjacently
bool classes_disjoint(const std::vector<std::uint8_t>& m, int h, int w) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint8_t c = m[(std::size_t)y * w + x];
      if (!c) continue;
      if (x + 1 < w) {
        std::uint8_t r = m[(std::size_t)y * w + x + 1];
        if (r && r != c) return false;
      }
      if (y + 1 < h) {
        std::uint8_t d = m[(std::size_t)(y + 1) * w + x];
        if (d && d != c) return false;
      }
    }
  return true;
}

}  // namespace

TEST_CASE("extract_boxes: one filled rectangle yields exactly its bounds") {
  Canvas c(12, 16);
  c.rect(3, 4, 2, 9, 7);
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].cls == 3);
  CHECK(boxes[0].x0 == 4);
  CHECK(boxes[0].y0 == 2);
  CHECK(boxes[0].x1 == 9);
  CHECK(boxes[0].y1 == 7);
}

TEST_CASE("extract_boxes: empty mask yields no boxes") {
  Canvas c(8, 8);
  CHECK(boundref::extract_boxes(c.mask.data(), c.h, c.w).empty());
}

TEST_CASE("extract_boxes: diagonal-touching squares are two components") {
  Canvas c(10, 10);
  c.rect(5, 1, 1, 3, 3);
  c.rect(5, 4, 4, 6, 6);  // touches only at the (3,3)-(4,4) corner
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  REQUIRE(boxes.size() == 2);
  CHECK(boxes[0].y0 == 1);
  CHECK(boxes[1].y0 == 4);
}

TEST_CASE("extract_boxes: min_area drops specks, order is class asc then y,x") {
  Canvas c(12, 12);
  c.rect(7, 8, 8, 9, 9);   // area 4, kept
  c.rect(2, 1, 6, 4, 9);   // class 2
  c.rect(2, 6, 1, 9, 3);   // class 2, higher up
  c.mask[(std::size_t)0 * 12 + 0] = 9;  // single pixel, dropped
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w, 4);
  REQUIRE(boxes.size() == 3);
  CHECK(boxes[0].cls == 2);
  CHECK(boxes[0].y0 == 1);
  CHECK(boxes[1].cls == 2);
  CHECK(boxes[1].y0 == 6);
  CHECK(boxes[2].cls == 7);
  auto all = boundref::extract_boxes(c.mask.data(), c.h, c.w, 1);
  CHECK(all.size() == 4);
  CHECK_THROWS_AS(boundref::extract_boxes(c.mask.data(), c.h, c.w, 0),
                  ConfigError);
}

TEST_CASE("iou closed forms and symmetry") {
  Canvas a(6, 8), b(6, 8);
  a.rect(1, 0, 0, 1, 1);
  b.rect(1, 0, 0, 1, 1);
  std::size_t n = a.mask.size();
  CHECK(boundref::iou(a.mask.data(), b.mask.data(), n, 1) == 1.0);
  CHECK(boundref::iou(a.mask.data(), b.mask.data(), n, 2) == 1.0);  // both empty

  Canvas d(6, 8);
  d.rect(1, 4, 4, 5, 5);  // disjoint from a
  CHECK(boundref::iou(a.mask.data(), d.mask.data(), n, 1) == 0.0);

  // 2x2 region vs 2x4 region sharing the 2x2: 4 / 8
  Canvas p(6, 8), q(6, 8);
  p.rect(3, 0, 0, 1, 1);
  q.rect(3, 0, 0, 3, 1);
  CHECK(boundref::iou(p.mask.data(), q.mask.data(), n, 3) == 0.5);
  CHECK(boundref::iou(q.mask.data(), p.mask.data(), n, 3) == 0.5);
}

TEST_CASE("morph_refine: empty box list copies init") {
  Canvas c(10, 10);
  c.rect(4, 2, 2, 5, 5, 0.8f);
  auto out = boundref::morph_refine(c.img.data(), c.mask.data(), c.h, c.w, {});
  CHECK(out == c.mask);
}

TEST_CASE("morph_refine: idempotent on clean rectangles and annuli") {
  Canvas c(24, 24);
  c.rect(4, 3, 3, 10, 12, 0.7f);
  // annulus of class 7: ring with a background hole
  for (int y = 4; y <= 18; ++y)
    for (int x = 14; x <= 22; ++x) {
      double dx = (x - 18.0) / 4.5, dy = (y - 11.0) / 7.0;
      double d = dx * dx + dy * dy;
      if (d <= 1.0 && d >= 0.3) {
        c.mask[(std::size_t)y * 24 + x] = 7;
        c.img[(std::size_t)y * 24 + x] = 0.6f;
      }
    }
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  REQUIRE(boxes.size() == 2);
  auto out =
      boundref::morph_refine(c.img.data(), c.mask.data(), c.h, c.w, boxes);
  CHECK(out == c.mask);
}

TEST_CASE("morph_refine: noise-free phantoms refine to themselves") {
  phantom::PhantomParams p;
  p.h = 48;
  p.w = 48;
  p.speckle_var = 0.0;
  p.shadow_prob = 0.0;
  int tested = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    for (int v = 0; v < 4; ++v) {
      auto s = phantom::generate_phantom(seed, anatomask::view_from_index(v),
                                         (int)(seed % 7), p);
      if (!classes_disjoint(s.mask, p.h, p.w)) continue;
      auto boxes = boundref::extract_boxes(s.mask.data(), p.h, p.w);
      auto out = boundref::morph_refine(s.image.data.data(), s.mask.data(),
                                        p.h, p.w, boxes);
      CHECK(out == s.mask);
      ++tested;
    }
  }
  CHECK(tested >= 20);
}

TEST_CASE("morph_refine: snaps a sloppy init mask onto the intensity region") {
  Canvas c(20, 20);
  c.bright(4, 4, 11, 11, 0.8f);       // true structure
  c.rect(5, 6, 6, 14, 14);            // init overshoots down-right
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  auto out =
      boundref::morph_refine(c.img.data(), c.mask.data(), c.h, c.w, boxes);
  // inside the box, class 5 is exactly the bright pixels
  for (int y = 4; y <= 14; ++y)
    for (int x = 4; x <= 14; ++x) {
      bool bright = x >= 4 && x <= 11 && y >= 4 && y <= 11;
      bool inbox = boxes[0].contains(x, y);
      if (!inbox) continue;
      CHECK((out[(std::size_t)y * 20 + x] == 5) == bright);
    }
}

TEST_CASE("morph_refine: fills small pits but not annulus holes") {
  Canvas c(20, 20);
  c.rect(2, 3, 3, 12, 12, 0.75f);
  // a 2x2 dark pit inside the structure; init also missed it
  c.bright(6, 6, 7, 7, 0.1f);
  c.rect(0, 6, 6, 7, 7);
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  auto out =
      boundref::morph_refine(c.img.data(), c.mask.data(), c.h, c.w, boxes);
  for (int y = 3; y <= 12; ++y)
    for (int x = 3; x <= 12; ++x)
      CHECK(out[(std::size_t)y * 20 + x] == 2);  // pit filled
}

TEST_CASE("morph_refine: box over background shrinks to blob or empty") {
  // blob inside the init region: class contracts onto the blob
  Canvas c(20, 20);
  c.rect(2, 2, 2, 10, 10);
  c.bright(4, 4, 6, 6, 0.9f);
  auto boxes = boundref::extract_boxes(c.mask.data(), c.h, c.w);
  auto out =
      boundref::morph_refine(c.img.data(), c.mask.data(), c.h, c.w, boxes);
  std::int64_t count = 0;
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      bool blob = x >= 4 && x <= 6 && y >= 4 && y <= 6;
      std::uint8_t v = out[(std::size_t)y * 20 + x];
      count += v == 2;
      CHECK((v == 2) == blob);
    }
  CHECK(count == 9);

  // noisy pure-background box: the class shrinks onto a spurious speck
  Canvas c2(20, 20);
  Rng noise(123);
  for (float& v : c2.img) v = (float)noise.uniform(0.1, 0.3);
  c2.rect(2, 2, 2, 12, 12);
  auto boxes2 = boundref::extract_boxes(c2.mask.data(), c2.h, c2.w);
  REQUIRE(boxes2.size() == 1);
  auto out2 =
      boundref::morph_refine(c2.img.data(), c2.mask.data(), c2.h, c2.w, boxes2);
  std::int64_t init_area = 0, out_area = 0;
  for (std::uint8_t v : c2.mask) init_area += v == 2;
  for (std::uint8_t v : out2) out_area += v == 2;
  CHECK(out_area < init_area / 2);
}

TEST_CASE("morph_refine: pixels outside all boxes are bit-identical to init") {
  phantom::PhantomParams p;
  p.h = 32;
  p.w = 32;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = phantom::generate_phantom(seed, anatomask::View::RVOT, 1, p);
    auto boxes = boundref::extract_boxes(s.mask.data(), p.h, p.w);
    auto out = boundref::morph_refine(s.image.data.data(), s.mask.data(), p.h,
                                      p.w, boxes);
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x) {
        bool inside = false;
        for (const Box& b : boxes) inside = inside || b.contains(x, y);
        if (!inside)
          CHECK(out[(std::size_t)y * p.w + x] ==
                s.mask[(std::size_t)y * p.w + x]);
      }
  }
}

TEST_CASE("iou_gate: identity, rejection, inclusive threshold") {
  Canvas init(10, 10);
  init.rect(4, 1, 1, 4, 4);
  auto same = boundref::iou_gate(init.mask.data(), init.mask.data(), 10, 10,
                                 0.5);
  CHECK(same == init.mask);

  // disjoint refined region is rejected at theta 0.5, adopted at theta 0
  Canvas ref(10, 10);
  ref.rect(4, 6, 6, 9, 9);
  std::vector<boundref::GateDecision> dec;
  auto keep = boundref::iou_gate(init.mask.data(), ref.mask.data(), 10, 10,
                                 0.5, &dec);
  CHECK(keep == init.mask);
  REQUIRE(dec.size() == 1);
  CHECK(dec[0].cls == 4);
  CHECK(dec[0].iou == 0.0);
  CHECK_FALSE(dec[0].adopted);
  auto adopt = boundref::iou_gate(init.mask.data(), ref.mask.data(), 10, 10,
                                  0.0);
  CHECK(adopt == ref.mask);

  // iou exactly theta adopts (>= is inclusive): 2x2 vs 2x4 -> 0.5
  Canvas a(10, 10), b(10, 10);
  a.rect(3, 0, 0, 1, 1);
  b.rect(3, 0, 0, 3, 1);
  auto sel = boundref::iou_gate(a.mask.data(), b.mask.data(), 10, 10, 0.5,
                                &dec);
  CHECK(sel == b.mask);
  CHECK(dec[0].adopted);
  CHECK(dec[0].iou == 0.5);

  // theta above 1 clamps to 1: only exact matches adopt
  auto strict = boundref::iou_gate(a.mask.data(), b.mask.data(), 10, 10, 2.0);
  CHECK(strict == a.mask);
  auto exact = boundref::iou_gate(a.mask.data(), a.mask.data(), 10, 10, 2.0);
  CHECK(exact == a.mask);
}

TEST_CASE("iou_gate: overlapping regions resolve to the lowest class") {
  // class 2's refinement is rejected (keeps init), class 5's adopted region
  // has grown into init's class-2 area: the overlap goes to class 2.
  Canvas init(8, 8), ref(8, 8);
  init.rect(2, 0, 0, 3, 3);
  init.rect(5, 4, 4, 7, 7);
  ref.rect(2, 0, 0, 1, 1);  // shrunk to iou 4/16 < theta
  ref.rect(5, 2, 2, 7, 7);  // grown to iou 16/36 >= theta
  std::vector<boundref::GateDecision> dec;
  auto sel =
      boundref::iou_gate(init.mask.data(), ref.mask.data(), 8, 8, 0.4, &dec);
  REQUIRE(dec.size() == 2);
  CHECK(dec[0].cls == 2);
  CHECK_FALSE(dec[0].adopted);
  CHECK(dec[1].cls == 5);
  CHECK(dec[1].adopted);
  CHECK(dec[1].conflict_pixels == 4);  // the 2x2 overlap went to class 2
  for (int y = 0; y <= 3; ++y)
    for (int x = 0; x <= 3; ++x)
      CHECK(sel[(std::size_t)y * 8 + x] == 2);
  CHECK(sel[(std::size_t)4 * 8 + 4] == 5);
  CHECK(sel[(std::size_t)2 * 8 + 5] == 5);
}

TEST_CASE("oracle refiner returns gt inside boxes and init outside") {
  phantom::PhantomParams p;
  p.h = 16;
  p.w = 16;
  auto s = phantom::generate_phantom(5, anatomask::View::LVOT, 2, p);
  std::vector<std::uint8_t> init(s.mask.size(), 0);
  init[40] = 1;  // single speck; too small for a box at min_area 4
  for (int i = 100; i < 104; ++i) init[(std::size_t)i] = 2;
  auto boxes = boundref::extract_boxes(init.data(), p.h, p.w);
  REQUIRE(boxes.size() == 1);
  boundref::OracleRefiner oracle;
  oracle.gt = s.mask;
  auto out = oracle.refine(s.image.data.data(), init.data(), p.h, p.w, boxes);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      std::size_t i = (std::size_t)y * p.w + x;
      if (boxes[0].contains(x, y))
        CHECK(out[i] == s.mask[i]);
      else
        CHECK(out[i] == init[i]);
    }
}
