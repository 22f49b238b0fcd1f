#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "zssl/tensor.hpp"

namespace zssl::model {

inline constexpr int kSegClasses = 15;
inline constexpr int kChdClasses = 7;
inline constexpr int kViewClasses = 4;
inline constexpr int kDownsample = 4;

// Node handles into the Graph that ran the forward pass.
struct Forward {
  Graph::NodeId seg = -1;     // kSegClasses x H x W
  Graph::NodeId chd = -1;     // kChdClasses
  Graph::NodeId view = -1;    // kViewClasses
  Graph::NodeId seg_fp = -1;  // feature-perturbed decode, when requested

  bool has_fp() const { return seg_fp >= 0; }
};

// Small conv encoder (widths 16/32/64/64, downsample 4) with a bilinear
// upsample seg decoder and two linear heads on the pooled bottleneck.
// Parameters live in a stable name -> tensor registry; freezing, EMA and
// checkpointing all key off those names.
class MultiTaskNet {
 public:
  explicit MultiTaskNet(std::uint64_t seed);

  const std::vector<std::string>& param_names() const { return names_; }
  TensorRef param(const std::string& name) const;

  // fp_rate > 0 with training adds a second decode pass with channel
  // dropout on the bottleneck; eval ignores the request.
  Forward forward(Graph& g, const Tensor& image, bool training,
                  float fp_rate = 0.0f, Rng* fp_rng = nullptr) const;

  // requires_grad true exactly for params matching a prefix ("enc.3"
  // matches enc.3.w/enc.3.b). Unknown prefix throws ConfigError; empty
  // scope freezes everything.
  void set_trainable(const std::vector<std::string>& prefixes);
  std::vector<std::string> trainable_params() const;

  // Reinitializes chd_head only, reproducibly for a given seed.
  void reset_classification_head(std::uint64_t seed);

  void zero_grads();

 private:
  void add_param(const std::string& name, Tensor t);
  Graph::NodeId decode_seg(Graph& g, Graph::NodeId bottleneck) const;

  std::vector<std::string> names_;
  std::unordered_map<std::string, TensorRef> params_;
};

// theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise over the
// shared registry. decay 0 copies the student bit-exactly; decay 1 is a
// no-op. Mismatched registries throw DimError.
void ema_update(MultiTaskNet& teacher, const MultiTaskNet& student,
                float decay);

}  // namespace zssl::model
