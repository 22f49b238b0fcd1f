#include "zssl/augment.hpp"

#include <cmath>

namespace zssl::aug {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Geometry draw_geometry(Rng& rng) {
  Geometry g;
  g.flip = rng.bernoulli(0.5);
  g.angle_deg = rng.uniform(-10.0, 10.0);
  g.scale = rng.uniform(0.9, 1.1);
  return g;
}

Photometric draw_photometric(Rng& rng) {
  Photometric p;
  p.gain = rng.uniform(0.7, 1.3);
  p.offset = rng.uniform(-0.1, 0.1);
  p.gamma = rng.uniform(0.7, 1.4);
  return p;
}

Sample apply_geometry(const Sample& s, const Geometry& g) {
  if (!g.flip && g.angle_deg == 0.0 && g.scale == 1.0) return s;

  int h = s.h(), w = s.w();
  Sample out = s;
  out.mask.assign(s.mask.size(), 0);
  std::vector<float> img(s.image.data.size(), 0.0f);

  double theta = g.angle_deg * kPi / 180.0;
  double ct = std::cos(theta), st = std::sin(theta);
  double cx = 0.5 * w, cy = 0.5 * h;
  const float* src = s.image.data.data();

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Invert output->input: un-rotate, un-scale, then un-flip.
      double u = x + 0.5 - cx, v = y + 0.5 - cy;
      double us = (ct * u + st * v) / g.scale;
      double vs = (-st * u + ct * v) / g.scale;
      if (g.flip) us = -us;
      double sx = us + cx - 0.5, sy = vs + cy - 0.5;

      // nearest for the mask
      int nx = static_cast<int>(std::floor(sx + 0.5));
      int ny = static_cast<int>(std::floor(sy + 0.5));
      if (nx >= 0 && nx < w && ny >= 0 && ny < h)
        out.mask[static_cast<std::size_t>(y) * w + x] =
            s.mask[static_cast<std::size_t>(ny) * w + nx];

      // bilinear with zero padding for the image
      int x0 = static_cast<int>(std::floor(sx));
      int y0 = static_cast<int>(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      double acc = 0.0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          int xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
          double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          acc += wgt * src[static_cast<std::size_t>(yi) * w + xi];
        }
      }
      img[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
  out.image = Tensor::from({1, h, w}, std::move(img));
  return out;
}

Sample apply_photometric(const Sample& s, const Photometric& p) {
  if (p.gain == 1.0 && p.offset == 0.0 && p.gamma == 1.0) return s;
  Sample out = s;
  for (float& v : out.image.data) {
    double t = v * p.gain + p.offset;
    t = std::clamp(t, 0.0, 1.0);
    v = static_cast<float>(std::pow(t, p.gamma));
  }
  return out;
}

Sample weak_augment(const Sample& s, Rng& rng) {
  return apply_geometry(s, draw_geometry(rng));
}

Sample strong_augment(const Sample& s, Rng& rng) {
  return apply_photometric(s, draw_photometric(rng));
}

AugmentedPair make_pair(const Sample& s, Rng& weak_rng, Rng& s1_rng,
                        Rng& s2_rng) {
  AugmentedPair out;
  out.geo = draw_geometry(weak_rng);
  out.weak = apply_geometry(s, out.geo);
  out.strong1 = strong_augment(out.weak, s1_rng);
  out.strong2 = strong_augment(out.weak, s2_rng);
  return out;
}

CutMix cutmix_fixed(const Sample& a, const Sample& b, double lambda0, int cx,
                    int cy) {
  if (a.h() != b.h() || a.w() != b.w())
    throw DimError("cutmix: samples must share dims");
  int h = a.h(), w = a.w();
  double side = std::sqrt(std::clamp(1.0 - lambda0, 0.0, 1.0));
  int bw = static_cast<int>(std::llround(side * w));
  int bh = static_cast<int>(std::llround(side * h));

  CutMix out;
  out.mixed = a;
  if (bw > 0 && bh > 0) {
    // Clamp the center so the box always fits; the realized area is then
    // exactly bw*bh and lambda is an exact pixel-count ratio.
    int x0 = std::clamp(cx - bw / 2, 0, w - bw);
    int y0 = std::clamp(cy - bh / 2, 0, h - bh);
    out.box = {x0, y0, x0 + bw, y0 + bh};
    for (int y = y0; y < y0 + bh; ++y) {
      for (int x = x0; x < x0 + bw; ++x) {
        std::size_t i = static_cast<std::size_t>(y) * w + x;
        out.mixed.image.data[i] = b.image.data[i];
        out.mixed.mask[i] = b.mask[i];
      }
    }
  }
  out.lambda = 1.0 - static_cast<double>(bw) * bh / (static_cast<double>(h) * w);
  return out;
}

CutMix cutmix(const Sample& a, const Sample& b, Rng& rng) {
  double lambda0 = rng.uniform();
  int cx = rng.uniform_int(a.w());
  int cy = rng.uniform_int(a.h());
  return cutmix_fixed(a, b, lambda0, cx, cy);
}

}  // namespace zssl::aug
