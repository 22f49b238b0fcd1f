#pragma once

#include <string>
#include <vector>

#include "zssl/model.hpp"
#include "zssl/tensor.hpp"

namespace zssl::ckpt {

inline constexpr char kMagic[6] = {'Z', 'S', 'S', 'L', '1', '\0'};
inline constexpr std::uint16_t kVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Binary format: magic, version u16 LE, count u32 LE, then per tensor
// (name length u16 LE, name bytes, ndim u8, dims u32 LE, payload f32 LE),
// trailing CRC32 of everything before it. Round-trips are bit-exact;
// any structural damage or CRC mismatch refuses the load with DataError.
void write_checkpoint(const std::string& path,
                      const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::string& path);

// Both nets in one file under "student." / "teacher." name prefixes.
void save_nets(const std::string& path, const model::MultiTaskNet& student,
               const model::MultiTaskNet& teacher);
void load_nets(const std::string& path, model::MultiTaskNet& student,
               model::MultiTaskNet& teacher);

// Copies `prefix`-stripped tensors into the net's parameters; every net
// parameter must be covered with matching shape.
void load_net(const std::vector<NamedTensor>& tensors,
              const std::string& prefix, model::MultiTaskNet& net);

}  // namespace zssl::ckpt
