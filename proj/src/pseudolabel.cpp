#include "zssl/pseudolabel.hpp"

#include <algorithm>
#include <cmath>

namespace zssl::pl {

namespace {

int argmax_lowest(const std::vector<float>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)])
      best = i;
  return best;
}

}  // namespace

std::int64_t Bundle::conf_count() const {
  std::int64_t n = 0;
  for (std::uint8_t c : conf) n += c;
  return n;
}

Bundle generate_pseudo(const model::MultiTaskNet& teacher,
                       const Tensor& weak_image, float tau, bool mask,
                       std::optional<anatomask::View> forced_view,
                       const anatomask::MaskTable& table) {
  tau = std::clamp(tau, 0.0f, 1.0f);

  Graph g;
  auto out = teacher.forward(g, weak_image, /*training=*/false);

  Bundle b;
  b.chd_logits = g.val(out.chd).data;
  b.view_logits = g.val(out.view).data;
  b.view_pred = argmax_lowest(b.view_logits);
  b.chd_argmax = argmax_lowest(b.chd_logits);
  b.mask_view = forced_view.value_or(anatomask::view_from_index(b.view_pred));
  b.masked = mask;

  Tensor logits = g.val(out.seg);
  if (mask) logits = anatomask::apply_hard_mask(std::move(logits), b.mask_view, table);

  int k = logits.shape[0];
  b.h = logits.shape[1];
  b.w = logits.shape[2];
  std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
  b.pw = Tensor::zeros(logits.shape);
  b.hard.resize(static_cast<std::size_t>(plane));
  b.conf.resize(static_cast<std::size_t>(plane));

  for (std::int64_t p = 0; p < plane; ++p) {
    double zmax = logits.data[static_cast<std::size_t>(p)];
    for (int c = 1; c < k; ++c)
      zmax = std::max(zmax, static_cast<double>(
                                logits.data[static_cast<std::size_t>(c * plane + p)]));
    double denom = 0.0;
    for (int c = 0; c < k; ++c)
      denom += std::exp(logits.data[static_cast<std::size_t>(c * plane + p)] - zmax);

    int best = 0;
    float best_p = -1.0f;
    for (int c = 0; c < k; ++c) {
      float prob = static_cast<float>(
          std::exp(logits.data[static_cast<std::size_t>(c * plane + p)] - zmax) / denom);
      b.pw.data[static_cast<std::size_t>(c * plane + p)] = prob;
      if (prob > best_p) {
        best_p = prob;
        best = c;
      }
    }
    b.hard[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    b.conf[static_cast<std::size_t>(p)] = best_p >= tau ? 1 : 0;
  }
  return b;
}

MixedTargets mix_targets(const Bundle& a, const Bundle& b,
                         const aug::MixBox& box) {
  if (a.h != b.h || a.w != b.w)
    throw DimError("mix_targets: bundle dims differ");
  MixedTargets m;
  m.h = a.h;
  m.w = a.w;
  m.hard = a.hard;
  m.conf = a.conf;
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x) {
      std::size_t i = static_cast<std::size_t>(y) * a.w + x;
      m.hard[i] = b.hard[i];
      m.conf[i] = b.conf[i];
    }
  return m;
}

UnsupLosses unimatch_losses(Graph& g, const Bundle& bundle,
                            Graph::NodeId seg_s1, Graph::NodeId seg_s2,
                            Graph::NodeId seg_fp, float focal_gamma,
                            Graph::NodeId seg_mixed,
                            const MixedTargets* mixed) {
  const Shape want = bundle.pw.shape;
  auto check = [&](Graph::NodeId id, const char* name) {
    if (!(g.val(id).shape == want))
      throw DimError(std::string("unimatch_losses: ") + name +
                     " shape differs from the bundle");
  };
  check(seg_s1, "seg_s1");
  check(seg_s2, "seg_s2");

  std::vector<int> targets(bundle.hard.begin(), bundle.hard.end());
  std::vector<std::uint8_t> ignore(bundle.conf.size());
  for (std::size_t i = 0; i < bundle.conf.size(); ++i)
    ignore[i] = bundle.conf[i] ? 0 : 1;

  UnsupLosses out;
  out.s1 = g.softmax_cross_entropy(g.rows_from_chw(seg_s1), targets, ignore);
  out.s2 = g.softmax_cross_entropy(g.rows_from_chw(seg_s2), targets, ignore);
  if (seg_fp >= 0) {
    check(seg_fp, "seg_fp");
    out.fp = g.softmax_cross_entropy(g.rows_from_chw(seg_fp), targets, ignore);
  }

  Graph::NodeId fused = g.scale(g.add(seg_s1, seg_s2), 0.5f);
  out.focal =
      g.focal_loss(g.rows_from_chw(fused), targets, focal_gamma, ignore);

  if (seg_mixed >= 0) {
    if (!mixed)
      throw ConfigError("unimatch_losses: seg_mixed without mixed targets");
    check(seg_mixed, "seg_mixed");
    if (mixed->h != bundle.h || mixed->w != bundle.w)
      throw DimError("unimatch_losses: mixed target dims differ");
    std::vector<int> mt(mixed->hard.begin(), mixed->hard.end());
    std::vector<std::uint8_t> mi(mixed->conf.size());
    for (std::size_t i = 0; i < mixed->conf.size(); ++i)
      mi[i] = mixed->conf[i] ? 0 : 1;
    out.mixed = g.softmax_cross_entropy(g.rows_from_chw(seg_mixed), mt, mi);
  }
  return out;
}

float LossWeights::lookup(const std::string& key) const {
  if (key == "sup_seg") return sup_seg;
  if (key == "sup_cls") return sup_cls;
  if (key == "unsup_s1" || key == "unsup_s2" || key == "unsup_fp")
    return unsup_seg_s;
  if (key == "unsup_focal") return unsup_focal;
  if (key == "unsup_mixed") return unsup_mixed;
  if (key == "pl_cls") return pl_cls;
  if (key == "pl_cls_mixed") return pl_cls_mixed;
  if (key == "pl_cls_focal_mixed") return pl_cls_focal_mixed;
  throw ConfigError("LossWeights: unknown component " + key);
}

void LossWeights::validate() const {
  for (float v : {sup_seg, sup_cls, unsup_seg_s, unsup_focal, unsup_mixed,
                  pl_cls, pl_cls_mixed, pl_cls_focal_mixed})
    if (!(v >= 0.0f))
      throw ConfigError("LossWeights: weights must be >= 0");
}

Graph::NodeId total_loss(
    Graph& g,
    const std::vector<std::pair<std::string, Graph::NodeId>>& components,
    const LossWeights& w) {
  w.validate();
  Graph::NodeId acc = -1;
  for (const auto& [key, node] : components) {
    Graph::NodeId term = g.scale(node, w.lookup(key));
    acc = acc < 0 ? term : g.add(acc, term);
  }
  return acc < 0 ? g.zero() : acc;
}

ChdPseudo pseudo_chd_label(const std::vector<float>& chd_logits,
                           const anchor::Verdict& verdict) {
  if (chd_logits.size() != static_cast<std::size_t>(model::kChdClasses))
    throw DimError("pseudo_chd_label: expected 7 CHD logits");
  return {argmax_lowest(chd_logits), verdict.accept};
}

}  // namespace zssl::pl
