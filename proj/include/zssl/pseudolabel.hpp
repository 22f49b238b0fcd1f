#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "zssl/anatomask.hpp"
#include "zssl/augment.hpp"
#include "zssl/model.hpp"
#include "zssl/semanchor.hpp"

namespace zssl::pl {

// Detached teacher outputs for one unlabeled sample: everything downstream
// treats these as constants, so no gradient can reach the teacher.
struct Bundle {
  Tensor pw;                       // 15xHxW probabilities, masked when asked
  std::vector<std::uint8_t> hard;  // HxW argmax labels, lowest-index ties
  std::vector<std::uint8_t> conf;  // HxW max-prob >= tau
  std::vector<float> chd_logits;   // 7
  std::vector<float> view_logits;  // 4
  int view_pred = 0;
  int chd_argmax = 0;
  anatomask::View mask_view = anatomask::View::FourCH;
  bool masked = false;
  int h = 0, w = 0;

  std::int64_t conf_count() const;
};

// Teacher eval-mode forward on the weak image. Hard masking (when mask is
// set) uses forced_view if provided, else the teacher's predicted view.
// tau is clamped to [0,1].
Bundle generate_pseudo(
    const model::MultiTaskNet& teacher, const Tensor& weak_image, float tau,
    bool mask = true,
    std::optional<anatomask::View> forced_view = std::nullopt,
    const anatomask::MaskTable& table = anatomask::MaskTable::defaults());

// Pseudo-targets for a CutMix'd pair: b's labels and confidence pasted into
// a's over the same box that mixed the images.
struct MixedTargets {
  std::vector<std::uint8_t> hard, conf;
  int h = 0, w = 0;
};
MixedTargets mix_targets(const Bundle& a, const Bundle& b,
                         const aug::MixBox& box);

// Node handles for the unsupervised seg components; -1 when the matching
// input was absent. Components with zero confident pixels are exact zeros.
struct UnsupLosses {
  Graph::NodeId s1 = -1, s2 = -1, fp = -1, focal = -1, mixed = -1;
};

// CE of each strong/fp prediction against the confident pseudo-labels,
// focal loss on the averaged strong logits, CE of the mixed prediction
// against mix_targets. Channel count must match the bundle's.
UnsupLosses unimatch_losses(Graph& g, const Bundle& bundle,
                            Graph::NodeId seg_s1, Graph::NodeId seg_s2,
                            Graph::NodeId seg_fp = -1, float focal_gamma = 2.0f,
                            Graph::NodeId seg_mixed = -1,
                            const MixedTargets* mixed = nullptr);

struct LossWeights {
  float sup_seg = 1.0f;
  float sup_cls = 0.8f;
  float unsup_seg_s = 0.3f;  // each of s1, s2 and the fp path
  float unsup_focal = 0.4f;
  float unsup_mixed = 0.2f;
  float pl_cls = 1.0f;
  float pl_cls_mixed = 0.3f;
  float pl_cls_focal_mixed = 0.4f;

  float lookup(const std::string& key) const;  // ConfigError on unknown key
  void validate() const;                       // all weights >= 0
};

// Sum of weight * component over the named components; empty list gives an
// exact zero node.
Graph::NodeId total_loss(
    Graph& g,
    const std::vector<std::pair<std::string, Graph::NodeId>>& components,
    const LossWeights& w);

// argmax CHD class from teacher logits; accepted iff the filter verdict is.
struct ChdPseudo {
  int cls = 0;
  bool accepted = false;
};
ChdPseudo pseudo_chd_label(const std::vector<float>& chd_logits,
                           const anchor::Verdict& verdict);

}  // namespace zssl::pl
