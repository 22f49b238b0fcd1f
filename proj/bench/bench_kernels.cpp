// Compares the OpenMP kernels against their serial references: wall time,
// throughput, and bit-equality of outputs.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "zssl/kernels.hpp"
#include "zssl/rng.hpp"

using namespace zssl;
using clk = std::chrono::steady_clock;

namespace {

double secs(clk::time_point a, clk::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

template <typename F>
double time_best(F&& f, int reps) {
  double best = 1e30;
  for (int i = 0; i < reps; ++i) {
    auto t0 = clk::now();
    f();
    best = std::min(best, secs(t0, clk::now()));
  }
  return best;
}

std::vector<float> randf(std::size_t n, Rng& r) {
  std::vector<float> v(n);
  for (float& x : v) x = (float)r.normal();
  return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 0;  // 0 = library default
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--threads" && i + 1 < argc)
      threads = std::atoi(argv[++i]);
  if (threads > 0) kernels::set_threads(threads);

  Rng rng(1234);
  const int c = 32, o = 32, h = 64, w = 64, k = 3;
  auto in = randf((std::size_t)c * h * w, rng);
  auto kw = randf((std::size_t)o * c * k * k, rng);
  auto bias = randf((std::size_t)o, rng);
  std::vector<float> out_p((std::size_t)o * h * w), out_s(out_p.size());
  std::vector<float> gin_p(in.size()), gin_s(in.size());
  std::vector<float> gk_p(kw.size()), gk_s(kw.size());

  const double flops_fwd = 2.0 * o * c * k * k * h * w;
  std::printf("conv2d %dx%dx%d -> %d, K=%d, threads=%d\n", c, h, w, o, k,
              kernels::threads());

  double tp = time_best(
      [&] {
        kernels::conv2d_forward(in.data(), c, h, w, kw.data(), o, k,
                                bias.data(), out_p.data());
      },
      5);
  double ts = time_best(
      [&] {
        kernels::conv2d_forward_serial(in.data(), c, h, w, kw.data(), o, k,
                                       bias.data(), out_s.data());
      },
      5);
  std::printf("  forward   omp %8.3f ms (%6.2f GF/s)  serial %8.3f ms  "
              "speedup %.2fx  bit_equal %s\n",
              tp * 1e3, flops_fwd / tp * 1e-9, ts * 1e3, ts / tp,
              bit_equal(out_p, out_s) ? "yes" : "NO");

  tp = time_best(
      [&] {
        kernels::conv2d_backward_input(out_p.data(), o, h, w, kw.data(), c, k,
                                       gin_p.data());
      },
      5);
  ts = time_best(
      [&] {
        kernels::conv2d_backward_input_serial(out_p.data(), o, h, w, kw.data(),
                                              c, k, gin_s.data());
      },
      5);
  std::printf("  bwd_input omp %8.3f ms                 serial %8.3f ms  "
              "speedup %.2fx  bit_equal %s\n",
              tp * 1e3, ts * 1e3, ts / tp, bit_equal(gin_p, gin_s) ? "yes" : "NO");

  tp = time_best(
      [&] {
        kernels::conv2d_backward_kernel(out_p.data(), o, h, w, in.data(), c, k,
                                        gk_p.data());
      },
      5);
  ts = time_best(
      [&] {
        kernels::conv2d_backward_kernel_serial(out_p.data(), o, h, w,
                                               in.data(), c, k, gk_s.data());
      },
      5);
  std::printf("  bwd_kernel omp %7.3f ms                 serial %8.3f ms  "
              "speedup %.2fx  bit_equal %s\n",
              tp * 1e3, ts * 1e3, ts / tp, bit_equal(gk_p, gk_s) ? "yes" : "NO");

  const int eh = 512, ew = 512;
  std::vector<std::uint8_t> mask((std::size_t)eh * ew);
  for (auto& m : mask) m = rng.bernoulli(0.02) ? 1 : 0;
  std::vector<std::int64_t> d_p(mask.size()), d_s(mask.size());
  tp = time_best([&] { kernels::edt_sq(mask.data(), eh, ew, d_p.data()); }, 5);
  ts = time_best(
      [&] { kernels::edt_sq_serial(mask.data(), eh, ew, d_s.data()); }, 5);
  bool eq = std::memcmp(d_p.data(), d_s.data(),
                        d_p.size() * sizeof(std::int64_t)) == 0;
  std::printf("edt %dx%d\n  meijster  omp %8.3f ms  serial %8.3f ms  "
              "speedup %.2fx  bit_equal %s\n",
              eh, ew, tp * 1e3, ts * 1e3, ts / tp, eq ? "yes" : "NO");
  return 0;
}
