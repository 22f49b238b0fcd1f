#include "zssl/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "zssl/kernels.hpp"

namespace zssl::metrics {

double dice(const std::uint8_t* pred, const std::uint8_t* gt, std::size_t n,
            int cls) {
  std::int64_t np = 0, ng = 0, inter = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool p = pred[i] == cls, g = gt[i] == cls;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * (double)inter / (double)(np + ng);
}

std::vector<std::uint8_t> boundary_pixels(const std::uint8_t* labels, int h,
                                          int w, int cls) {
  std::vector<std::uint8_t> b((std::size_t)h * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (labels[(std::size_t)y * w + x] != cls) continue;
      const bool edge =
          y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
          labels[(std::size_t)(y - 1) * w + x] != cls ||
          labels[(std::size_t)(y + 1) * w + x] != cls ||
          labels[(std::size_t)y * w + x - 1] != cls ||
          labels[(std::size_t)y * w + x + 1] != cls;
      if (edge) b[(std::size_t)y * w + x] = 1;
    }
  return b;
}

namespace {

// Pixels of `from` whose nearest `to` pixel lies within tol, plus |from|.
std::pair<std::int64_t, std::int64_t> boundary_hits(
    const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to,
    int h, int w, double tol, NsdPath path) {
  std::int64_t total = 0;
  for (auto v : from) total += v;
  if (total == 0) return {0, 0};
  std::vector<std::int64_t> dsq(from.size());
  if (path == NsdPath::Fast)
    kernels::edt_sq(to.data(), h, w, dsq.data());
  else
    kernels::edt_sq_bruteforce(to.data(), h, w, dsq.data());
  std::int64_t hits = 0;
  const double tol2 = tol * tol;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from[i] && (double)dsq[i] <= tol2) ++hits;
  return {hits, total};
}

}  // namespace

double nsd(const std::uint8_t* pred, const std::uint8_t* gt, int h, int w,
           int cls, double tol, NsdPath path) {
  if (tol < 0) throw ConfigError("nsd: tolerance must be >= 0");
  auto bp = boundary_pixels(pred, h, w, cls);
  auto bg = boundary_pixels(gt, h, w, cls);
  auto [hp, np] = boundary_hits(bp, bg, h, w, tol, path);
  auto [hg, ng] = boundary_hits(bg, bp, h, w, tol, path);
  if (np + ng == 0) return 1.0;
  return (double)(hp + hg) / (double)(np + ng);
}

double macro_f1(const std::vector<int>& pred, const std::vector<int>& gt,
                int n_classes) {
  if (pred.size() != gt.size())
    throw DimError("macro_f1: size mismatch");
  if (pred.empty()) throw DataError("macro_f1: empty label set");
  std::vector<std::int64_t> tp((std::size_t)n_classes, 0),
      fp((std::size_t)n_classes, 0), fn((std::size_t)n_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= n_classes || g < 0 || g >= n_classes)
      throw DataError("macro_f1: label out of range");
    if (p == g)
      ++tp[(std::size_t)p];
    else {
      ++fp[(std::size_t)p];
      ++fn[(std::size_t)g];
    }
  }
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < n_classes; ++c) {
    const std::int64_t t = tp[(std::size_t)c], f_p = fp[(std::size_t)c],
                       f_n = fn[(std::size_t)c];
    if (t + f_p + f_n == 0) continue;  // absent from both gt and pred
    const double denom = 2.0 * (double)t + (double)f_p + (double)f_n;
    sum += denom > 0 ? 2.0 * (double)t / denom : 0.0;
    ++used;
  }
  return used ? sum / used : 0.0;
}

double overall_score(double f1_pct, double dsc_pct, double nsd_pct) {
  return 0.5 * f1_pct + 0.25 * dsc_pct + 0.25 * nsd_pct;
}

std::array<double, 3> fit_overall_weights(
    const std::vector<std::array<double, 4>>& rows) {
  if (rows.size() < 3) throw DataError("fit_overall_weights: need >= 3 rows");
  // Substitute w2 = 1 - w0 - w1 and solve the 2x2 normal equations.
  double a00 = 0, a01 = 0, a11 = 0, b0 = 0, b1 = 0;
  for (const auto& r : rows) {
    const double c0 = r[0] - r[2], c1 = r[1] - r[2], y = r[3] - r[2];
    a00 += c0 * c0;
    a01 += c0 * c1;
    a11 += c1 * c1;
    b0 += c0 * y;
    b1 += c1 * y;
  }
  const double det = a00 * a11 - a01 * a01;
  if (std::abs(det) < 1e-12)
    throw NumericError("fit_overall_weights: singular system");
  const double w0 = (b0 * a11 - b1 * a01) / det;
  const double w1 = (a00 * b1 - a01 * b0) / det;
  return {w0, w1, 1.0 - w0 - w1};
}

void Evaluator::add_seg(const std::uint8_t* pred, const std::uint8_t* gt,
                        int h, int w) {
  const std::size_t n = (std::size_t)h * w;
  double dsum = 0, nsum = 0;
  int defined = 0;
  for (int c = 1; c < kSegClasses; ++c) {
    bool present = false;
    for (std::size_t i = 0; i < n && !present; ++i)
      present = pred[i] == c || gt[i] == c;
    if (!present) continue;
    if (pooled_) {
      std::int64_t np = 0, ng = 0, inter = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred[i] == c, g = gt[i] == c;
        np += p;
        ng += g;
        inter += p && g;
      }
      pool_inter2_[(std::size_t)c] += 2 * inter;
      pool_sizes_[(std::size_t)c] += np + ng;
      auto bp = boundary_pixels(pred, h, w, c);
      auto bg = boundary_pixels(gt, h, w, c);
      auto [hp, tp] = boundary_hits(bp, bg, h, w, tol_, NsdPath::Fast);
      auto [hg, tg] = boundary_hits(bg, bp, h, w, tol_, NsdPath::Fast);
      pool_nsd_hit_[(std::size_t)c] += hp + hg;
      pool_nsd_total_[(std::size_t)c] += tp + tg;
    } else {
      const double d = dice(pred, gt, n, c);
      const double s = nsd(pred, gt, h, w, c, tol_);
      cls_dice_sum_[(std::size_t)c] += d;
      cls_nsd_sum_[(std::size_t)c] += s;
      ++cls_count_[(std::size_t)c];
      dsum += d;
      nsum += s;
      ++defined;
    }
  }
  if (!pooled_ && defined > 0) {
    img_dice_.push_back(dsum / defined);
    img_nsd_.push_back(nsum / defined);
  }
  ++n_images_;
}

void Evaluator::add_cls(int pred_chd, int gt_chd) {
  if (pred_chd < 0 || pred_chd >= kChdClasses || gt_chd < 0 ||
      gt_chd >= kChdClasses)
    throw DataError("add_cls: CHD label out of range");
  ++confusion_[(std::size_t)gt_chd][(std::size_t)pred_chd];
  cls_pred_.push_back(pred_chd);
  cls_gt_.push_back(gt_chd);
}

EvalReport Evaluator::report() const {
  EvalReport r;
  r.n_images = n_images_;
  r.n_cls_samples = (int)cls_gt_.size();
  r.confusion = confusion_;
  r.class_dice.fill(-1.0);
  r.class_nsd.fill(-1.0);

  if (pooled_) {
    double dsum = 0, nsum = 0;
    int used = 0;
    for (int c = 1; c < kSegClasses; ++c) {
      if (pool_sizes_[(std::size_t)c] == 0 &&
          pool_nsd_total_[(std::size_t)c] == 0)
        continue;
      const double d = pool_sizes_[(std::size_t)c]
                           ? (double)pool_inter2_[(std::size_t)c] /
                                 (double)pool_sizes_[(std::size_t)c]
                           : 1.0;
      const double s = pool_nsd_total_[(std::size_t)c]
                           ? (double)pool_nsd_hit_[(std::size_t)c] /
                                 (double)pool_nsd_total_[(std::size_t)c]
                           : 1.0;
      r.class_dice[(std::size_t)c] = 100.0 * d;
      r.class_nsd[(std::size_t)c] = 100.0 * s;
      dsum += d;
      nsum += s;
      ++used;
    }
    r.dice_mean = used ? 100.0 * dsum / used : 0.0;
    r.nsd_mean = used ? 100.0 * nsum / used : 0.0;
  } else {
    for (int c = 1; c < kSegClasses; ++c)
      if (cls_count_[(std::size_t)c]) {
        r.class_dice[(std::size_t)c] = 100.0 * cls_dice_sum_[(std::size_t)c] /
                                       (double)cls_count_[(std::size_t)c];
        r.class_nsd[(std::size_t)c] = 100.0 * cls_nsd_sum_[(std::size_t)c] /
                                      (double)cls_count_[(std::size_t)c];
      }
    double dsum = 0, nsum = 0;
    for (double v : img_dice_) dsum += v;
    for (double v : img_nsd_) nsum += v;
    r.dice_mean = img_dice_.empty() ? 0.0 : 100.0 * dsum / img_dice_.size();
    r.nsd_mean = img_nsd_.empty() ? 0.0 : 100.0 * nsum / img_nsd_.size();
  }
  r.macro_f1 = cls_gt_.empty() ? 0.0 : 100.0 * macro_f1(cls_pred_, cls_gt_);
  r.overall = overall_score(r.macro_f1, r.dice_mean, r.nsd_mean);
  return r;
}

}  // namespace zssl::metrics
