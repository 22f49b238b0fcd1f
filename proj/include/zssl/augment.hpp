#pragma once

#include "zssl/phantom.hpp"
#include "zssl/rng.hpp"

namespace zssl::aug {

using phantom::Sample;

// Geometric parameters shared by the weak view and both strong views so
// pseudo-labels transfer pixelwise.
struct Geometry {
  bool flip = false;
  double angle_deg = 0.0;
  double scale = 1.0;
};

struct Photometric {
  double gain = 1.0;
  double offset = 0.0;
  double gamma = 1.0;
};

Geometry draw_geometry(Rng& rng);      // flip p=0.5, angle +-10deg, scale 0.9-1.1
Photometric draw_photometric(Rng& rng);  // gain 0.7-1.3, offset +-0.1, gamma 0.7-1.4

// Flip + rotation + scaling about the canvas center; bilinear for the image,
// nearest for the mask, out-of-canvas pixels pad with background.
Sample apply_geometry(const Sample& s, const Geometry& g);
// Photometric-only; the mask is untouched. Output clamped to [0,1].
Sample apply_photometric(const Sample& s, const Photometric& p);

Sample weak_augment(const Sample& s, Rng& rng);
// Applied on top of an already geometry-transformed sample.
Sample strong_augment(const Sample& s, Rng& rng);

struct AugmentedPair {
  Sample weak, strong1, strong2;
  Geometry geo;
};

AugmentedPair make_pair(const Sample& s, Rng& weak_rng, Rng& s1_rng,
                        Rng& s2_rng);

// Paste region, half-open [x0,x1) x [y0,y1).
struct MixBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(int x, int y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
};

struct CutMix {
  Sample mixed;
  double lambda = 1.0;  // kept fraction of a, exact pixel count ratio
  MixBox box;
};

// Pastes a box of b into a (image and mask); box area targets (1 - lambda0)
// with lambda0 ~ Beta(1,1). Returned lambda is the realized kept fraction.
CutMix cutmix(const Sample& a, const Sample& b, Rng& rng);
// Deterministic variant used by tests and by cutmix itself.
CutMix cutmix_fixed(const Sample& a, const Sample& b, double lambda0, int cx,
                    int cy);

}  // namespace zssl::aug
