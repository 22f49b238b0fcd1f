#include "zssl/kernels.hpp"

#include <algorithm>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace zssl::kernels {

namespace {
int g_threads = 1;
}

void set_threads(int n) { g_threads = std::max(1, n); }
int threads() { return g_threads; }

// ---------------------------------------------------------------------------
// conv2d
//
// Accumulation order per output element: bias, then channels ascending, then
// kernel taps row-major. Both the parallel and the serial variants follow it,
// which makes them bit-identical (each output slot is an independent serial
// sum; float rounding sequence is fixed).
// ---------------------------------------------------------------------------

// k == 3 fast path: one pass per output row, taps accumulated element-wise.
// Per output element the float additions still run bias, channels ascending,
// taps row-major — the same sequence as the tap-by-tap reference — so the
// result is bit-identical while dst is loaded and stored once per (ci, ky)
// instead of once per tap.
static void conv_fwd_one_output_k3(const float* in, int c, int h, int w,
                                   const float* kernel, int cdim_k,
                                   const float* bias, float* out, int o) {
  float* dst = out + (std::size_t)o * h * w;
  const float bv = bias ? bias[o] : 0.0f;
  for (int y = 0; y < h; ++y) {
    float* drow = dst + (std::size_t)y * w;
    for (int x = 0; x < w; ++x) drow[x] = bv;
    for (int ci = 0; ci < c; ++ci) {
      const float* src = in + (std::size_t)ci * h * w;
      const float* kk = kernel + ((std::size_t)o * cdim_k + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        const float* srow = src + (std::size_t)sy * w;
        const float k0 = kk[ky * 3], k1 = kk[ky * 3 + 1], k2 = kk[ky * 3 + 2];
        if (w == 1) {
          drow[0] += k1 * srow[0];
          continue;
        }
        {
          float v = drow[0];
          v += k1 * srow[0];
          v += k2 * srow[1];
          drow[0] = v;
        }
        for (int x = 1; x < w - 1; ++x) {
          float v = drow[x];
          v += k0 * srow[x - 1];
          v += k1 * srow[x];
          v += k2 * srow[x + 1];
          drow[x] = v;
        }
        {
          float v = drow[w - 1];
          v += k0 * srow[w - 2];
          v += k1 * srow[w - 1];
          drow[w - 1] = v;
        }
      }
    }
  }
}

// k == 1: a channel mix; one saxpy per input channel keeps the order.
static void conv_fwd_one_output_k1(const float* in, int c, int h, int w,
                                   const float* kernel, int cdim_k,
                                   const float* bias, float* out, int o) {
  float* dst = out + (std::size_t)o * h * w;
  const float bv = bias ? bias[o] : 0.0f;
  for (int i = 0; i < h * w; ++i) dst[i] = bv;
  for (int ci = 0; ci < c; ++ci) {
    const float kv = kernel[(std::size_t)o * cdim_k + ci];
    const float* src = in + (std::size_t)ci * h * w;
    for (int i = 0; i < h * w; ++i) dst[i] += kv * src[i];
  }
}

static void conv_fwd_one_output(const float* in, int c, int h, int w,
                                const float* kernel, int cdim_k, int k,
                                const float* bias, float* out, int o) {
  if (k == 3) return conv_fwd_one_output_k3(in, c, h, w, kernel, cdim_k, bias, out, o);
  if (k == 1) return conv_fwd_one_output_k1(in, c, h, w, kernel, cdim_k, bias, out, o);
  const int p = (k - 1) / 2;
  float* dst = out + (std::size_t)o * h * w;
  for (int i = 0; i < h * w; ++i) dst[i] = bias ? bias[o] : 0.0f;
  for (int ci = 0; ci < c; ++ci) {
    const float* src = in + (std::size_t)ci * h * w;
    const float* kk = kernel + ((std::size_t)o * cdim_k + ci) * k * k;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float kv = kk[ky * k + kx];
        const int dy = ky - p, dx = kx - p;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          float* drow = dst + (std::size_t)y * w;
          const float* srow = src + (std::size_t)(y + dy) * w + dx;
          for (int x = x0; x < x1; ++x) drow[x] += kv * srow[x];
        }
      }
    }
  }
}

void conv2d_forward(const float* in, int c, int h, int w, const float* kernel,
                    int o, int k, const float* bias, float* out) {
#pragma omp parallel for schedule(static) num_threads(g_threads) if (g_threads > 1)
  for (int oi = 0; oi < o; ++oi)
    conv_fwd_one_output(in, c, h, w, kernel, c, k, bias, out, oi);
}

void conv2d_forward_serial(const float* in, int c, int h, int w,
                           const float* kernel, int o, int k, const float* bias,
                           float* out) {
  const int p = (k - 1) / 2;
  for (int oi = 0; oi < o; ++oi) {
    float* dst = out + (std::size_t)oi * h * w;
    for (int i = 0; i < h * w; ++i) dst[i] = bias ? bias[oi] : 0.0f;
    for (int ci = 0; ci < c; ++ci) {
      const float* src = in + (std::size_t)ci * h * w;
      const float* kk = kernel + ((std::size_t)oi * c + ci) * k * k;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const float kv = kk[ky * k + kx];
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - p;
            if (sy < 0 || sy >= h) continue;
            for (int x = 0; x < w; ++x) {
              const int sx = x + kx - p;
              if (sx < 0 || sx >= w) continue;
              dst[y * w + x] += kv * src[sy * w + sx];
            }
          }
        }
    }
  }
}

// grad wrt input: gin[c,y,x] = sum_{o,ky,kx} kernel[o,c,ky,kx] *
// gout[o, y-(ky-p), x-(kx-p)]. Parallel over c; order (o, ky, kx).
// Element-centric k == 3 path, mirroring conv_fwd_one_output_k3: per output
// element the adds run (oi, ky, kx) ascending, matching the tap-by-tap
// reference bit for bit.
static void conv_bwd_input_one_channel_k3(const float* gout, int o, int h,
                                          int w, const float* kernel, int c,
                                          float* gin, int ci) {
  float* dst = gin + (std::size_t)ci * h * w;
  for (int y = 0; y < h; ++y) {
    float* drow = dst + (std::size_t)y * w;
    for (int x = 0; x < w; ++x) drow[x] = 0.0f;
    for (int oi = 0; oi < o; ++oi) {
      const float* src = gout + (std::size_t)oi * h * w;
      const float* kk = kernel + ((std::size_t)oi * c + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int gy = y - (ky - 1);
        if (gy < 0 || gy >= h) continue;
        const float* grow = src + (std::size_t)gy * w;
        const float k0 = kk[ky * 3], k1 = kk[ky * 3 + 1], k2 = kk[ky * 3 + 2];
        if (w == 1) {
          drow[0] += k1 * grow[0];
          continue;
        }
        {
          float v = drow[0];
          v += k0 * grow[1];
          v += k1 * grow[0];
          drow[0] = v;
        }
        for (int x = 1; x < w - 1; ++x) {
          float v = drow[x];
          v += k0 * grow[x + 1];
          v += k1 * grow[x];
          v += k2 * grow[x - 1];
          drow[x] = v;
        }
        {
          float v = drow[w - 1];
          v += k1 * grow[w - 1];
          v += k2 * grow[w - 2];
          drow[w - 1] = v;
        }
      }
    }
  }
}

static void conv_bwd_input_one_channel_k1(const float* gout, int o, int h,
                                          int w, const float* kernel, int c,
                                          float* gin, int ci) {
  float* dst = gin + (std::size_t)ci * h * w;
  for (int i = 0; i < h * w; ++i) dst[i] = 0.0f;
  for (int oi = 0; oi < o; ++oi) {
    const float kv = kernel[(std::size_t)oi * c + ci];
    const float* src = gout + (std::size_t)oi * h * w;
    for (int i = 0; i < h * w; ++i) dst[i] += kv * src[i];
  }
}

static void conv_bwd_input_one_channel(const float* gout, int o, int h, int w,
                                       const float* kernel, int c, int k,
                                       float* gin, int ci) {
  if (k == 3)
    return conv_bwd_input_one_channel_k3(gout, o, h, w, kernel, c, gin, ci);
  if (k == 1)
    return conv_bwd_input_one_channel_k1(gout, o, h, w, kernel, c, gin, ci);
  const int p = (k - 1) / 2;
  float* dst = gin + (std::size_t)ci * h * w;
  for (int i = 0; i < h * w; ++i) dst[i] = 0.0f;
  for (int oi = 0; oi < o; ++oi) {
    const float* src = gout + (std::size_t)oi * h * w;
    const float* kk = kernel + ((std::size_t)oi * c + ci) * k * k;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float kv = kk[ky * k + kx];
        const int dy = ky - p, dx = kx - p;
        // gout index (y - dy, x - dx) must be in range.
        const int y0 = std::max(0, dy), y1 = std::min(h, h + dy);
        const int x0 = std::max(0, dx), x1 = std::min(w, w + dx);
        for (int y = y0; y < y1; ++y) {
          float* drow = dst + (std::size_t)y * w;
          const float* srow = src + (std::size_t)(y - dy) * w - dx;
          for (int x = x0; x < x1; ++x) drow[x] += kv * srow[x];
        }
      }
    }
  }
}

void conv2d_backward_input(const float* gout, int o, int h, int w,
                           const float* kernel, int c, int k, float* gin) {
#pragma omp parallel for schedule(static) num_threads(g_threads) if (g_threads > 1)
  for (int ci = 0; ci < c; ++ci)
    conv_bwd_input_one_channel(gout, o, h, w, kernel, c, k, gin, ci);
}

void conv2d_backward_input_serial(const float* gout, int o, int h, int w,
                                  const float* kernel, int c, int k,
                                  float* gin) {
  const int p = (k - 1) / 2;
  for (int ci = 0; ci < c; ++ci) {
    float* dst = gin + (std::size_t)ci * h * w;
    for (int i = 0; i < h * w; ++i) dst[i] = 0.0f;
    for (int oi = 0; oi < o; ++oi) {
      const float* src = gout + (std::size_t)oi * h * w;
      const float* kk = kernel + ((std::size_t)oi * c + ci) * k * k;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const float kv = kk[ky * k + kx];
          for (int y = 0; y < h; ++y) {
            const int gy = y - (ky - p);
            if (gy < 0 || gy >= h) continue;
            for (int x = 0; x < w; ++x) {
              const int gx = x - (kx - p);
              if (gx < 0 || gx >= w) continue;
              dst[y * w + x] += kv * src[gy * w + gx];
            }
          }
        }
    }
  }
}

// grad wrt kernel: gkernel[o,c,ky,kx] = sum_{y,x} gout[o,y,x] *
// in[c, y+ky-p, x+kx-p]. One independent double-accumulated reduction per
// kernel element; parallel over (o,c). The reduction runs in kLanes
// interleaved partial sums (lane = valid-column index mod kLanes, rows
// ascending, lanes folded ascending at the end): the order stays fixed, but
// the lanes are independent so the compiler can vectorize. A single chained
// accumulator is ~10x slower and dominates every training step.
inline constexpr int kLanes = 16;

static double conv_bwd_kernel_tap(const float* gout, const float* in, int h,
                                  int w, int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  const int n = x1 - x0;
  const int nb = n - n % kLanes;
  double acc[kLanes] = {};
  for (int y = y0; y < y1; ++y) {
    const float* grow = gout + (std::size_t)y * w + x0;
    const float* irow = in + (std::size_t)(y + dy) * w + dx + x0;
    for (int x = 0; x < nb; x += kLanes)
      for (int j = 0; j < kLanes; ++j)
        acc[j] += (double)grow[x + j] * (double)irow[x + j];
    for (int x = nb; x < n; ++x)
      acc[x - nb] += (double)grow[x] * (double)irow[x];
  }
  double total = 0.0;
  for (int j = 0; j < kLanes; ++j) total += acc[j];
  return total;
}

void conv2d_backward_kernel(const float* gout, int o, int h, int w,
                            const float* in, int c, int k, float* gkernel) {
  const int p = (k - 1) / 2;
#pragma omp parallel for schedule(static) num_threads(g_threads) if (g_threads > 1)
  for (int oc = 0; oc < o * c; ++oc) {
    const int oi = oc / c, ci = oc % c;
    const float* g = gout + (std::size_t)oi * h * w;
    const float* src = in + (std::size_t)ci * h * w;
    float* dst = gkernel + (std::size_t)oc * k * k;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        dst[ky * k + kx] =
            (float)conv_bwd_kernel_tap(g, src, h, w, ky - p, kx - p);
  }
}

void conv2d_backward_kernel_serial(const float* gout, int o, int h, int w,
                                   const float* in, int c, int k,
                                   float* gkernel) {
  // Same kLanes accumulation order as the parallel path, spelled out one
  // scalar at a time: lane = valid-column index within the row mod kLanes.
  const int p = (k - 1) / 2;
  for (int oi = 0; oi < o; ++oi)
    for (int ci = 0; ci < c; ++ci)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double acc[kLanes] = {};
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - p;
            if (sy < 0 || sy >= h) continue;
            int i = 0;
            for (int x = 0; x < w; ++x) {
              const int sx = x + kx - p;
              if (sx < 0 || sx >= w) continue;
              acc[i % kLanes] +=
                  (double)gout[((std::size_t)oi * h + y) * w + x] *
                  (double)in[((std::size_t)ci * h + sy) * w + sx];
              ++i;
            }
          }
          double total = 0.0;
          for (int j = 0; j < kLanes; ++j) total += acc[j];
          gkernel[(((std::size_t)oi * c + ci) * k + ky) * k + kx] =
              (float)total;
        }
}

void conv2d_backward_bias(const float* gout, int o, int h, int w,
                          float* gbias) {
#pragma omp parallel for schedule(static) num_threads(g_threads) if (g_threads > 1)
  for (int oi = 0; oi < o; ++oi) {
    const float* src = gout + (std::size_t)oi * h * w;
    double acc = 0.0;
    for (int i = 0; i < h * w; ++i) acc += (double)src[i];
    gbias[oi] = (float)acc;
  }
}

void conv2d_backward_bias_serial(const float* gout, int o, int h, int w,
                                 float* gbias) {
  for (int oi = 0; oi < o; ++oi) {
    const float* src = gout + (std::size_t)oi * h * w;
    double acc = 0.0;
    for (int i = 0; i < h * w; ++i) acc += (double)src[i];
    gbias[oi] = (float)acc;
  }
}

// ---------------------------------------------------------------------------
// Squared Euclidean distance transform (Meijster). Integer arithmetic only,
// so the result is exact and identical to the brute-force reference.
// ---------------------------------------------------------------------------

namespace {

inline std::int64_t sq(std::int64_t v) { return v * v; }

// Column pass: per pixel, squared distance considering own column only.
void edt_column_pass(const std::uint8_t* feature, int h, int w,
                     std::int64_t* g) {
  for (int x = 0; x < w; ++x) {
    std::int64_t d = kEdtInf;
    for (int y = 0; y < h; ++y) {
      if (feature[y * w + x])
        d = 0;
      else if (d < kEdtInf)
        ++d;
      g[y * w + x] = d;
    }
    d = kEdtInf;
    for (int y = h - 1; y >= 0; --y) {
      if (feature[y * w + x])
        d = 0;
      else if (d < kEdtInf)
        ++d;
      if (d < g[y * w + x]) g[y * w + x] = d;
    }
  }
  for (int i = 0; i < h * w; ++i)
    if (g[i] < kEdtInf) g[i] = sq(g[i]);
}

// Row pass: lower envelope of parabolas x -> (x-i)^2 + g[i]. INF columns
// ride along as huge-but-finite parabolas; int64 has headroom for them.
void edt_row_pass_one(const std::int64_t* grow, int w, std::int64_t* out,
                      int* s, std::int64_t* t) {
  auto f = [&](std::int64_t x, int i) -> std::int64_t {
    return sq(x - i) + grow[i];
  };
  auto floordiv = [](std::int64_t a, std::int64_t b) -> std::int64_t {
    std::int64_t q = a / b;
    if (a % b != 0 && ((a < 0) != (b < 0))) --q;
    return q;
  };
  // Last x where parabola j still beats parabola i (j < i).
  auto sep = [&](int j, int i) -> std::int64_t {
    return floordiv(sq(i) - sq(j) + grow[i] - grow[j],
                    2 * (std::int64_t)(i - j));
  };
  int q = 0;
  s[0] = 0;
  t[0] = 0;
  for (int i = 1; i < w; ++i) {
    while (q >= 0 && f(t[q], s[q]) > f(t[q], i)) --q;
    if (q < 0) {
      q = 0;
      s[0] = i;
      t[0] = 0;
    } else {
      std::int64_t ww = 1 + sep(s[q], i);
      if (ww < w) {
        ++q;
        s[q] = i;
        t[q] = ww;
      }
    }
  }
  for (int x = w - 1; x >= 0; --x) {
    while (q > 0 && x < t[q]) --q;
    out[x] = f(x, s[q]);
    if (out[x] >= kEdtInf) out[x] = kEdtInf;
  }
}

}  // namespace

void edt_sq(const std::uint8_t* feature, int h, int w, std::int64_t* out) {
  std::vector<std::int64_t> g((std::size_t)h * w);
  edt_column_pass(feature, h, w, g.data());
#pragma omp parallel num_threads(g_threads) if (g_threads > 1)
  {
    std::vector<int> s((std::size_t)w);
    std::vector<std::int64_t> t((std::size_t)w);
#pragma omp for schedule(static)
    for (int y = 0; y < h; ++y)
      edt_row_pass_one(g.data() + (std::size_t)y * w, w,
                       out + (std::size_t)y * w, s.data(), t.data());
  }
}

void edt_sq_serial(const std::uint8_t* feature, int h, int w,
                   std::int64_t* out) {
  std::vector<std::int64_t> g((std::size_t)h * w);
  edt_column_pass(feature, h, w, g.data());
  std::vector<int> s((std::size_t)w);
  std::vector<std::int64_t> t((std::size_t)w);
  for (int y = 0; y < h; ++y)
    edt_row_pass_one(g.data() + (std::size_t)y * w, w, out + (std::size_t)y * w,
                     s.data(), t.data());
}

void edt_sq_bruteforce(const std::uint8_t* feature, int h, int w,
                       std::int64_t* out) {
  std::vector<int> fy, fx;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (feature[y * w + x]) {
        fy.push_back(y);
        fx.push_back(x);
      }
  const int n = (int)fy.size();
#pragma omp parallel for schedule(static) num_threads(g_threads) if (g_threads > 1)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::int64_t best = kEdtInf;
      for (int i = 0; i < n; ++i) {
        std::int64_t d = sq(y - fy[i]) + sq(x - fx[i]);
        if (d < best) best = d;
      }
      out[y * w + x] = best;
    }
  }
}

}  // namespace zssl::kernels
