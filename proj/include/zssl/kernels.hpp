#pragma once

#include <cstdint>
#include <vector>

namespace zssl::kernels {

// Worker threads for the OpenMP kernels below. 1 = serial execution.
// All kernels are bit-deterministic for any thread count: parallelism is
// over independent output slots, each slot's accumulation stays serial.
void set_threads(int n);
int threads();

// 'Same' cross-correlation. in: CxHxW, kernel: OxCxKxK (K odd, pad (K-1)/2),
// bias: O or null. out: OxHxW.
void conv2d_forward(const float* in, int c, int h, int w, const float* kernel,
                    int o, int k, const float* bias, float* out);
void conv2d_backward_input(const float* gout, int o, int h, int w,
                           const float* kernel, int c, int k, float* gin);
void conv2d_backward_kernel(const float* gout, int o, int h, int w,
                            const float* in, int c, int k, float* gkernel);
void conv2d_backward_bias(const float* gout, int o, int h, int w, float* gbias);

// Naive quadruple-loop references, kept for testing and benchmarking.
// Accumulation order matches the parallel kernels exactly, so outputs are
// bit-identical.
void conv2d_forward_serial(const float* in, int c, int h, int w,
                           const float* kernel, int o, int k, const float* bias,
                           float* out);
void conv2d_backward_input_serial(const float* gout, int o, int h, int w,
                                  const float* kernel, int c, int k, float* gin);
void conv2d_backward_kernel_serial(const float* gout, int o, int h, int w,
                                   const float* in, int c, int k,
                                   float* gkernel);
void conv2d_backward_bias_serial(const float* gout, int o, int h, int w,
                                 float* gbias);

// Exact squared Euclidean distance transform on an integer grid.
// feature[i] != 0 marks feature pixels; out[i] = min squared distance to any
// feature pixel (kEdtInf if there are none). Meijster's algorithm, integer
// arithmetic throughout.
inline constexpr std::int64_t kEdtInf = (std::int64_t)1 << 60;
void edt_sq(const std::uint8_t* feature, int h, int w, std::int64_t* out);
void edt_sq_serial(const std::uint8_t* feature, int h, int w,
                   std::int64_t* out);

// Brute-force reference: per pixel, min over all feature pixels.
void edt_sq_bruteforce(const std::uint8_t* feature, int h, int w,
                       std::int64_t* out);

}  // namespace zssl::kernels
