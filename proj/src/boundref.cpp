#include "zssl/boundref.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace zssl::boundref {

namespace {

// Flood fill over pred(i); returns visited pixel indices.
template <typename Pred>
std::vector<std::int64_t> flood(std::int64_t start, int h, int w,
                                std::vector<std::uint8_t>& visited,
                                Pred pred) {
  std::vector<std::int64_t> comp, stack{start};
  visited[static_cast<std::size_t>(start)] = 1;
  while (!stack.empty()) {
    std::int64_t i = stack.back();
    stack.pop_back();
    comp.push_back(i);
    int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
    const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    for (int d = 0; d < 4; ++d) {
      int nx = x + dx[d], ny = y + dy[d];
      if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
      std::int64_t ni = static_cast<std::int64_t>(ny) * w + nx;
      if (visited[static_cast<std::size_t>(ni)] || !pred(ni)) continue;
      visited[static_cast<std::size_t>(ni)] = 1;
      stack.push_back(ni);
    }
  }
  return comp;
}

// Otsu bin threshold over a 256-bin histogram; pixels with bin > t are the
// upper side. Returns -1 when fewer than two bins are occupied.
int otsu_threshold(const std::array<std::int64_t, 256>& hist) {
  std::int64_t total = 0;
  int occupied = 0;
  double sum = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += hist[static_cast<std::size_t>(i)];
    occupied += hist[static_cast<std::size_t>(i)] > 0;
    sum += static_cast<double>(i) * hist[static_cast<std::size_t>(i)];
  }
  if (total == 0 || occupied < 2) return -1;

  double sum_b = 0.0;
  std::int64_t w_b = 0;
  double best = -1.0;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    w_b += hist[static_cast<std::size_t>(t)];
    if (w_b == 0) continue;
    std::int64_t w_f = total - w_b;
    if (w_f == 0) break;
    sum_b += static_cast<double>(t) * hist[static_cast<std::size_t>(t)];
    double m_b = sum_b / w_b;
    double m_f = (sum - sum_b) / w_f;
    double between = static_cast<double>(w_b) * w_f * (m_b - m_f) * (m_b - m_f);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

int intensity_bin(float v) {
  int b = static_cast<int>(v * 256.0f);
  return std::clamp(b, 0, 255);
}

}  // namespace

std::vector<Box> extract_boxes(const std::uint8_t* mask, int h, int w,
                               int min_area) {
  if (min_area < 1) throw ConfigError("extract_boxes: min_area must be >= 1");
  std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> visited(n, 0);
  std::vector<Box> boxes;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
    if (visited[static_cast<std::size_t>(i)] || mask[i] == 0) continue;
    std::uint8_t cls = mask[i];
    auto comp = flood(i, h, w, visited,
                      [&](std::int64_t j) { return mask[j] == cls; });
    if (static_cast<int>(comp.size()) < min_area) continue;
    Box b;
    b.cls = cls;
    b.x0 = w;
    b.y0 = h;
    b.x1 = 0;
    b.y1 = 0;
    for (std::int64_t j : comp) {
      int y = static_cast<int>(j / w), x = static_cast<int>(j % w);
      b.x0 = std::min(b.x0, x);
      b.x1 = std::max(b.x1, x);
      b.y0 = std::min(b.y0, y);
      b.y1 = std::max(b.y1, y);
    }
    boxes.push_back(b);
  }
  std::sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) {
    if (a.cls != b.cls) return a.cls < b.cls;
    if (a.y0 != b.y0) return a.y0 < b.y0;
    return a.x0 < b.x0;
  });
  return boxes;
}

double iou(const std::uint8_t* a, const std::uint8_t* b, std::size_t n,
           int cls) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool ia = a[i] == cls, ib = b[i] == cls;
    inter += ia && ib;
    uni += ia || ib;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> morph_refine(const float* image,
                                       const std::uint8_t* init, int h, int w,
                                       const std::vector<Box>& boxes) {
  std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> out(init, init + n);
  if (boxes.empty()) return out;

  std::array<bool, 256> box_class{};
  for (const Box& b : boxes) box_class[static_cast<std::size_t>(b.cls)] = true;

  // Each box's candidate region is computed from init/image alone, then all
  // boxes erase their own class and paint their regions. This keeps the
  // result independent of how same-class boxes overlap.
  std::vector<std::vector<std::uint8_t>> regions;
  regions.reserve(boxes.size());

  for (const Box& b : boxes) {
    int bw = b.x1 - b.x0 + 1, bh = b.y1 - b.y0 + 1;
    std::int64_t bn = static_cast<std::int64_t>(bw) * bh;
    auto local = [&](int y, int x) {
      return static_cast<std::size_t>(y - b.y0) * bw + (x - b.x0);
    };

    std::array<std::int64_t, 256> hist{};
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x)
        hist[static_cast<std::size_t>(intensity_bin(
            image[static_cast<std::size_t>(y) * w + x]))]++;
    int t = otsu_threshold(hist);

    // Init component pixels of this class inside the box.
    std::vector<std::uint8_t> init_c(static_cast<std::size_t>(bn), 0);
    std::int64_t init_count = 0;
    double init_bin_sum = 0.0;
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        if (init[static_cast<std::size_t>(y) * w + x] != b.cls) continue;
        init_c[local(y, x)] = 1;
        ++init_count;
        init_bin_sum +=
            intensity_bin(image[static_cast<std::size_t>(y) * w + x]);
      }
    }

    std::vector<std::uint8_t> region(static_cast<std::size_t>(bn), 0);
    if (t < 0) {
      // Flat intensity in the box: nothing to separate, keep init.
      region = init_c;
    } else {
      // Foreground is the Otsu side containing the init component's mean
      // intensity; structures brighter than background by default.
      bool upper = init_count == 0 || init_bin_sum / init_count > t;
      std::vector<std::uint8_t> fg(static_cast<std::size_t>(bn), 0);
      for (int y = b.y0; y <= b.y1; ++y)
        for (int x = b.x0; x <= b.x1; ++x) {
          int bin =
              intensity_bin(image[static_cast<std::size_t>(y) * w + x]);
          fg[local(y, x)] = upper ? bin > t : bin <= t;
        }

      // Largest 4-connected fg component overlapping the init component;
      // with no init pixels, the largest component outright.
      std::vector<std::uint8_t> visited(static_cast<std::size_t>(bn), 0);
      std::vector<std::int64_t> best_overlap, best_any;
      for (std::int64_t i = 0; i < bn; ++i) {
        if (visited[static_cast<std::size_t>(i)] ||
            !fg[static_cast<std::size_t>(i)])
          continue;
        auto comp = flood(i, bh, bw, visited, [&](std::int64_t j) {
          return fg[static_cast<std::size_t>(j)] != 0;
        });
        bool overlaps = false;
        for (std::int64_t j : comp)
          if (init_c[static_cast<std::size_t>(j)]) {
            overlaps = true;
            break;
          }
        if (overlaps && comp.size() > best_overlap.size())
          best_overlap = comp;
        if (comp.size() > best_any.size()) best_any = std::move(comp);
      }
      const auto& keep = init_count > 0 ? best_overlap : best_any;
      for (std::int64_t j : keep) region[static_cast<std::size_t>(j)] = 1;

      // Fill enclosed holes smaller than a quarter of the region, which
      // patches speckle pits without pouring into annulus interiors.
      if (!keep.empty()) {
        std::vector<std::uint8_t> outside(static_cast<std::size_t>(bn), 0);
        for (std::int64_t i = 0; i < bn; ++i) {
          int y = static_cast<int>(i / bw), x = static_cast<int>(i % bw);
          bool border = x == 0 || y == 0 || x == bw - 1 || y == bh - 1;
          if (!border || region[static_cast<std::size_t>(i)] ||
              outside[static_cast<std::size_t>(i)])
            continue;
          flood(i, bh, bw, outside, [&](std::int64_t j) {
            return region[static_cast<std::size_t>(j)] == 0;
          });
        }
        std::vector<std::uint8_t> seen(static_cast<std::size_t>(bn), 0);
        for (std::int64_t i = 0; i < bn; ++i) {
          if (region[static_cast<std::size_t>(i)] ||
              outside[static_cast<std::size_t>(i)] ||
              seen[static_cast<std::size_t>(i)])
            continue;
          auto hole = flood(i, bh, bw, seen, [&](std::int64_t j) {
            return region[static_cast<std::size_t>(j)] == 0 &&
                   outside[static_cast<std::size_t>(j)] == 0;
          });
          if (static_cast<std::int64_t>(hole.size()) * 4 <
              static_cast<std::int64_t>(keep.size()))
            for (std::int64_t j : hole)
              region[static_cast<std::size_t>(j)] = 1;
        }
      }
    }

    regions.push_back(std::move(region));
  }

  for (const Box& b : boxes)
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x) {
        std::size_t gi = static_cast<std::size_t>(y) * w + x;
        if (init[gi] == b.cls) out[gi] = 0;
      }
  for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
    const Box& b = boxes[bi];
    int bw = b.x1 - b.x0 + 1;
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x)
        if (regions[bi][static_cast<std::size_t>(y - b.y0) * bw + (x - b.x0)])
          out[static_cast<std::size_t>(y) * w + x] =
              static_cast<std::uint8_t>(b.cls);
  }

  // Inside box regions only {0} plus box classes may remain.
  for (const Box& b : boxes)
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x) {
        std::size_t gi = static_cast<std::size_t>(y) * w + x;
        if (!box_class[out[gi]]) out[gi] = 0;
      }
  return out;
}

std::vector<std::uint8_t> iou_gate(const std::uint8_t* init,
                                   const std::uint8_t* refined, int h, int w,
                                   double theta,
                                   std::vector<GateDecision>* decisions) {
  if (theta < 0.0) theta = 0.0;
  if (theta > 1.0) theta = 1.0;
  std::size_t n = static_cast<std::size_t>(h) * w;

  std::array<bool, 256> present{};
  for (std::size_t i = 0; i < n; ++i) {
    if (init[i]) present[init[i]] = true;
    if (refined[i]) present[refined[i]] = true;
  }

  std::vector<std::uint8_t> selected(n, 0);
  if (decisions) decisions->clear();
  for (int c = 1; c < 256; ++c) {
    if (!present[static_cast<std::size_t>(c)]) continue;
    GateDecision d;
    d.cls = c;
    d.iou = iou(init, refined, n, c);
    d.adopted = d.iou >= theta;
    const std::uint8_t* src = d.adopted ? refined : init;
    for (std::size_t i = 0; i < n; ++i) {
      if (src[i] != c) continue;
      if (selected[i] == 0)
        selected[i] = static_cast<std::uint8_t>(c);
      else
        ++d.conflict_pixels;  // lower class already claimed the pixel
    }
    if (decisions) decisions->push_back(d);
  }
  return selected;
}

}  // namespace zssl::boundref
