#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "zssl/common.hpp"
#include "zssl/rng.hpp"

namespace zssl {

// Dense rank-1..4 float tensor. Immutable shape; grad buffer exists iff
// requires_grad. Stored values must stay finite.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;

  Tensor() = default;

  static Tensor zeros(const Shape& s, bool rg = false);
  static Tensor full(const Shape& s, float v, bool rg = false);
  static Tensor from(const Shape& s, std::vector<float> values, bool rg = false);
  static Tensor scalar(float v, bool rg = false);

  std::int64_t numel() const { return shape.numel(); }
  float item() const;

  void set_requires_grad(bool rg);
  void zero_grad();
  // Throws NumericError if any stored value is NaN/Inf.
  void check_finite(const char* what) const;
};

using TensorRef = std::shared_ptr<Tensor>;

TensorRef make_tensor(Tensor t);

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order by construction; backward walks the tape in reverse.
// Single-threaded per instance.
class Graph {
 public:
  using NodeId = std::int32_t;

  // Wraps an externally owned tensor (parameter or input).
  NodeId leaf(TensorRef t);
  // Convenience: wraps a by-value tensor with requires_grad=false.
  NodeId input(Tensor t);

  const Tensor& val(NodeId id) const;
  TensorRef ref(NodeId id) const;

  // 'Same' cross-correlation plus bias. input CxHxW, kernel OxCxKxK (K odd),
  // bias O; padding must equal (K-1)/2.
  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int padding);
  NodeId relu(NodeId x);
  // 2x2 average pooling; H and W must be even.
  NodeId avg_pool2(NodeId x);
  // Bilinear 2x upsampling (half-pixel centers).
  NodeId upsample_bilinear2(NodeId x);
  // CxHxW -> C mean over the spatial plane.
  NodeId global_avg_pool(NodeId x);
  // x: D, w: KxD, b: K -> K.
  NodeId linear(NodeId x, NodeId w, NodeId b);
  // Channel-wise inverted dropout on CxHxW. Identity when !training or
  // rate == 0; rate must be < 1.
  NodeId channel_dropout(NodeId x, float rate, Rng* rng, bool training);
  // CxHxW -> (H*W)xC row-major per-pixel logit rows.
  NodeId rows_from_chw(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, float s);
  // Exact scalar zero; used for absent loss components.
  NodeId zero();

  // Mean negative log-softmax over unignored rows; exact 0 when everything
  // is ignored. logits NxK (rank 1 treated as 1xK), targets in [0,K).
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> targets,
                               std::vector<std::uint8_t> ignore = {});
  // Mean (1-p_t)^gamma * CE over unignored rows; gamma 0 reduces to CE.
  NodeId focal_loss(NodeId logits, std::vector<int> targets, float gamma,
                    std::vector<std::uint8_t> ignore = {});

  // Populates grad for every requires_grad leaf reachable from `loss`
  // (accumulating); untouched otherwise. loss must be scalar.
  void backward(NodeId loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorRef out;
    std::vector<NodeId> ins;
    bool needs_grad = false;
    std::function<void(Graph&, const Node&)> back;
  };

  NodeId push(TensorRef out, std::vector<NodeId> ins,
              std::function<void(Graph&, const Node&)> back);
  bool any_needs_grad(const std::vector<NodeId>& ins) const;
  Node& node(NodeId id);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
};

}  // namespace zssl
