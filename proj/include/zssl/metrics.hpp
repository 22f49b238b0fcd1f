#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "zssl/common.hpp"

namespace zssl::metrics {

inline constexpr int kSegClasses = 15;  // 0 = background
inline constexpr int kChdClasses = 7;

// 2|P∩G| / (|P|+|G|) for one class over label maps; both-empty -> 1.0.
double dice(const std::uint8_t* pred, const std::uint8_t* gt, std::size_t n,
            int cls);

// Class pixels 4-adjacent to a non-class pixel or the image border.
std::vector<std::uint8_t> boundary_pixels(const std::uint8_t* labels, int h,
                                          int w, int cls);

enum class NsdPath { Fast, Brute };

// Normalized surface distance: fraction of boundary pixels of each mask
// lying within `tol` (Euclidean, pixels) of the other mask's boundary.
// Both-empty -> 1.0; one-empty -> 0.0. The fast path uses the exact integer
// distance transform and matches the brute-force path bit-for-bit.
double nsd(const std::uint8_t* pred, const std::uint8_t* gt, int h, int w,
           int cls, double tol, NsdPath path = NsdPath::Fast);

// Macro-averaged F1 over classes present in gt or pred; 0/0 F1 counts as 0.
double macro_f1(const std::vector<int>& pred, const std::vector<int>& gt,
                int n_classes = kChdClasses);

// Challenge overall score, percent inputs. Weights recovered from the
// leaderboard table; see fit_overall_weights.
double overall_score(double f1_pct, double dsc_pct, double nsd_pct);

// Least-squares fit of (w_f1, w_dsc, w_nsd) over rows of
// (f1, dsc, nsd, overall), constrained to sum to 1 (the natural family for
// a weighted combination; the unconstrained problem is ill-conditioned at
// 2-decimal table precision).
std::array<double, 3> fit_overall_weights(
    const std::vector<std::array<double, 4>>& rows);

struct EvalReport {
  // Percentages. Per-class entries are -1 where the class never occurred.
  std::array<double, kSegClasses> class_dice{};
  std::array<double, kSegClasses> class_nsd{};
  double dice_mean = 0.0;
  double nsd_mean = 0.0;
  double macro_f1 = 0.0;
  double overall = 0.0;
  std::array<std::array<std::int64_t, kChdClasses>, kChdClasses> confusion{};
  int n_images = 0;
  int n_cls_samples = 0;
};

// Accumulates per-sample segmentation masks and CHD predictions into an
// EvalReport. Foreground classes only; a class counts for an image when
// present in pred or gt there. Default aggregation is per-image mean over
// defined classes, then mean over images; pooled mode accumulates global
// per-class counts instead.
class Evaluator {
 public:
  explicit Evaluator(double nsd_tol = 2.0, bool pooled = false)
      : tol_(nsd_tol), pooled_(pooled) {}

  void add_seg(const std::uint8_t* pred, const std::uint8_t* gt, int h, int w);
  void add_cls(int pred_chd, int gt_chd);
  EvalReport report() const;

 private:
  double tol_;
  bool pooled_;
  // per-image mode
  std::vector<double> img_dice_, img_nsd_;
  std::array<double, kSegClasses> cls_dice_sum_{}, cls_nsd_sum_{};
  std::array<std::int64_t, kSegClasses> cls_count_{};
  // pooled mode
  std::array<std::int64_t, kSegClasses> pool_inter2_{}, pool_sizes_{};
  std::array<std::int64_t, kSegClasses> pool_nsd_hit_{}, pool_nsd_total_{};
  // classification
  std::array<std::array<std::int64_t, kChdClasses>, kChdClasses> confusion_{};
  std::vector<int> cls_pred_, cls_gt_;
  int n_images_ = 0;
};

}  // namespace zssl::metrics
