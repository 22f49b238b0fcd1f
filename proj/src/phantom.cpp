#include "zssl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zssl/rng.hpp"

namespace zssl::phantom {

namespace {

struct StructDef {
  int cls;
  double cx, cy, rx, ry;  // normalized to canvas size
  bool annulus;
};

// Per-view structure catalogs. The first two entries are the anchors that
// carry the CHD size-ratio signal and are always rendered; classes are drawn
// only from the view's allowed set. Positions keep structures disjoint under
// the jitter below so clean phantoms have crisp per-class regions.
const std::vector<StructDef>& catalog(View v) {
  static const std::vector<StructDef> four_ch = {
      {1, 0.36, 0.40, 0.17, 0.14, false}, {2, 0.65, 0.40, 0.15, 0.13, false},
      {3, 0.36, 0.70, 0.13, 0.10, false}, {4, 0.65, 0.70, 0.12, 0.10, false},
      {5, 0.50, 0.16, 0.05, 0.09, false}, {6, 0.16, 0.16, 0.08, 0.07, false},
      {7, 0.82, 0.15, 0.08, 0.08, true},
  };
  static const std::vector<StructDef> lvot = {
      {1, 0.38, 0.58, 0.17, 0.14, false},
      {2, 0.70, 0.64, 0.12, 0.10, false},
      {4, 0.66, 0.28, 0.11, 0.09, false},
      {8, 0.30, 0.22, 0.09, 0.12, true},
  };
  static const std::vector<StructDef> rvot = {
      {6, 0.30, 0.62, 0.15, 0.13, false}, {8, 0.64, 0.62, 0.13, 0.11, false},
      {9, 0.22, 0.24, 0.09, 0.08, true},  {10, 0.50, 0.16, 0.08, 0.07, false},
      {11, 0.78, 0.26, 0.08, 0.07, false}, {12, 0.50, 0.40, 0.10, 0.06, false},
  };
  static const std::vector<StructDef> three_vt = {
      {9, 0.26, 0.40, 0.12, 0.10, true},
      {12, 0.54, 0.34, 0.11, 0.09, false},
      {13, 0.80, 0.32, 0.08, 0.07, false},
      {14, 0.54, 0.70, 0.13, 0.08, false},
  };
  switch (v) {
    case View::FourCH: return four_ch;
    case View::LVOT: return lvot;
    case View::RVOT: return rvot;
    case View::ThreeVT: return three_vt;
  }
  throw ConfigError("catalog: bad view");
}

void paint_ellipse(std::vector<std::uint8_t>& mask, int h, int w, int cls,
                   double cx, double cy, double rx, double ry, bool annulus) {
  if (rx <= 0 || ry <= 0) return;
  int y0 = std::max(0, static_cast<int>(std::floor(cy - ry - 1)));
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + ry + 1)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - rx - 1)));
  int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rx + 1)));
  const double inner = 0.55;  // hole radius fraction for annuli
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double dx = (x + 0.5 - cx) / rx;
      double dy = (y + 0.5 - cy) / ry;
      double d = dx * dx + dy * dy;
      if (d > 1.0) continue;
      if (annulus && d < inner * inner) continue;
      mask[static_cast<std::size_t>(y) * w + x] =
          static_cast<std::uint8_t>(cls);
    }
  }
}

}  // namespace

double chd_factor(int chd) {
  static const double f[kChdClasses] = {1.00, 0.55, 0.70, 0.85,
                                        1.15, 1.30, 1.45};
  if (chd < 0 || chd >= kChdClasses)
    throw ConfigError("chd_factor: class out of range");
  return f[chd];
}

float class_intensity(int cls) {
  if (cls < 0 || cls >= anatomask::kNumSegClasses)
    throw ConfigError("class_intensity: class out of range");
  if (cls == 0) return 0.12f;
  return 0.25f + 0.05f * static_cast<float>(cls);
}

Sample generate_phantom(std::uint64_t seed, View view, int chd,
                        const PhantomParams& p) {
  if (chd < 0 || chd >= kChdClasses)
    throw ConfigError("generate_phantom: chd out of range");
  if (p.h < 8 || p.w < 8)
    throw ConfigError("generate_phantom: canvas too small");
  if (p.speckle_var < 0 || p.shadow_prob < 0 || p.shadow_prob > 1)
    throw ConfigError("generate_phantom: bad noise params");

  const auto& cat = catalog(view);
  auto vid = static_cast<std::uint64_t>(static_cast<int>(view));
  auto cid = static_cast<std::uint64_t>(chd);
  Rng geo = Rng::stream(seed, rng_tag::kDataGen, vid, cid, 0);
  Rng spk = Rng::stream(seed, rng_tag::kDataGen, vid, cid, 1);
  Rng shd = Rng::stream(seed, rng_tag::kDataGen, vid, cid, 2);

  // Anchors always render; 0..3 extra structures join them.
  int kmax = std::min<int>(5, static_cast<int>(cat.size()));
  int n = 2 + geo.uniform_int(kmax - 1);
  std::vector<int> rest(cat.size() - 2);
  std::iota(rest.begin(), rest.end(), 2);
  for (std::size_t i = 0; i + 1 < rest.size(); ++i) {
    std::size_t j = i + static_cast<std::size_t>(
                            geo.uniform_int(static_cast<int>(rest.size() - i)));
    std::swap(rest[i], rest[j]);
  }
  std::vector<int> selected = {0, 1};
  for (int i = 0; i < n - 2; ++i) selected.push_back(rest[static_cast<std::size_t>(i)]);
  std::sort(selected.begin(), selected.end());

  Sample s;
  s.view = view;
  s.chd = chd;
  s.mask.assign(static_cast<std::size_t>(p.h) * p.w, 0);

  double f = chd_factor(chd);
  for (int idx : selected) {
    const StructDef& sd = cat[static_cast<std::size_t>(idx)];
    double scale = idx == 0 ? f : (idx == 1 ? 2.0 - f : 1.0);
    double cx = (sd.cx + geo.uniform(-0.03, 0.03)) * p.w;
    double cy = (sd.cy + geo.uniform(-0.03, 0.03)) * p.h;
    double rx = sd.rx * scale * geo.uniform(0.95, 1.05) * p.w;
    double ry = sd.ry * scale * geo.uniform(0.95, 1.05) * p.h;
    paint_ellipse(s.mask, p.h, p.w, sd.cls, cx, cy, rx, ry, sd.annulus);
  }

  std::vector<float> img(s.mask.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = class_intensity(s.mask[i]);

  if (p.speckle_var > 0) {
    double sigma = std::sqrt(p.speckle_var);
    for (float& v : img)
      v = static_cast<float>(v * (1.0 + sigma * spk.normal()));
  }
  if (p.shadow_prob > 0 && shd.bernoulli(p.shadow_prob)) {
    double bw = shd.uniform(0.10, 0.25) * p.w;
    double x0 = shd.uniform(0.0, p.w - bw);
    int ix0 = static_cast<int>(std::floor(x0));
    int ix1 = std::min(p.w, static_cast<int>(std::floor(x0 + bw)));
    auto atten = static_cast<float>(p.shadow_atten);
    for (int y = 0; y < p.h; ++y)
      for (int x = ix0; x < ix1; ++x)
        img[static_cast<std::size_t>(y) * p.w + x] *= atten;
  }
  for (float& v : img) v = std::clamp(v, 0.0f, 1.0f);

  s.image = Tensor::from({1, p.h, p.w}, std::move(img));
  return s;
}

}  // namespace zssl::phantom
