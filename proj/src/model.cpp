#include "zssl/model.hpp"

#include <cmath>
#include <cstring>

namespace zssl::model {

namespace {

Tensor he_conv(Rng& rng, int out_c, int in_c, int k) {
  Tensor t = Tensor::zeros({out_c, in_c, k, k}, true);
  float std = std::sqrt(2.0f / (static_cast<float>(in_c) * k * k));
  for (float& v : t.data) v = static_cast<float>(rng.normal()) * std;
  return t;
}

Tensor he_linear(Rng& rng, int out_d, int in_d) {
  Tensor t = Tensor::zeros({out_d, in_d}, true);
  float std = std::sqrt(2.0f / static_cast<float>(in_d));
  for (float& v : t.data) v = static_cast<float>(rng.normal()) * std;
  return t;
}

bool prefix_match(const std::string& name, const std::string& prefix) {
  if (name == prefix) return true;
  return name.size() > prefix.size() + 1 &&
         name.compare(0, prefix.size(), prefix) == 0 &&
         name[prefix.size()] == '.';
}

}  // namespace

void MultiTaskNet::add_param(const std::string& name, Tensor t) {
  names_.push_back(name);
  params_[name] = make_tensor(std::move(t));
}

MultiTaskNet::MultiTaskNet(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, rng_tag::kInit);
  add_param("enc.0.w", he_conv(rng, 16, 1, 3));
  add_param("enc.0.b", Tensor::zeros({16}, true));
  add_param("enc.1.w", he_conv(rng, 32, 16, 3));
  add_param("enc.1.b", Tensor::zeros({32}, true));
  add_param("enc.2.w", he_conv(rng, 64, 32, 3));
  add_param("enc.2.b", Tensor::zeros({64}, true));
  add_param("enc.3.w", he_conv(rng, 64, 64, 3));
  add_param("enc.3.b", Tensor::zeros({64}, true));
  add_param("seg_head.0.w", he_conv(rng, 32, 64, 3));
  add_param("seg_head.0.b", Tensor::zeros({32}, true));
  add_param("seg_head.1.w", he_conv(rng, 16, 32, 3));
  add_param("seg_head.1.b", Tensor::zeros({16}, true));
  add_param("seg_head.2.w", he_conv(rng, kSegClasses, 16, 1));
  add_param("seg_head.2.b", Tensor::zeros({kSegClasses}, true));
  add_param("chd_head.w", he_linear(rng, kChdClasses, 64));
  add_param("chd_head.b", Tensor::zeros({kChdClasses}, true));
  add_param("view_head.w", he_linear(rng, kViewClasses, 64));
  add_param("view_head.b", Tensor::zeros({kViewClasses}, true));
}

TensorRef MultiTaskNet::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw ConfigError("MultiTaskNet: unknown parameter " + name);
  return it->second;
}

Graph::NodeId MultiTaskNet::decode_seg(Graph& g, Graph::NodeId b) const {
  auto conv = [&](Graph::NodeId x, const char* w, const char* bias, int pad) {
    return g.conv2d(x, g.leaf(param(w)), g.leaf(param(bias)), pad);
  };
  Graph::NodeId u = g.relu(conv(g.upsample_bilinear2(b), "seg_head.0.w",
                                "seg_head.0.b", 1));
  u = g.relu(conv(g.upsample_bilinear2(u), "seg_head.1.w", "seg_head.1.b", 1));
  return conv(u, "seg_head.2.w", "seg_head.2.b", 0);
}

Forward MultiTaskNet::forward(Graph& g, const Tensor& image, bool training,
                              float fp_rate, Rng* fp_rng) const {
  if (image.shape.rank != 3 || image.shape[0] != 1)
    throw DimError("MultiTaskNet::forward: image must be 1xHxW");
  int h = image.shape[1], w = image.shape[2];
  if (h % kDownsample || w % kDownsample)
    throw DimError("MultiTaskNet::forward: H and W must be multiples of " +
                   std::to_string(kDownsample));

  auto conv = [&](Graph::NodeId x, const char* wn, const char* bn) {
    return g.relu(g.conv2d(x, g.leaf(param(wn)), g.leaf(param(bn)), 1));
  };
  Graph::NodeId x = g.input(image);
  Graph::NodeId h0 = conv(x, "enc.0.w", "enc.0.b");
  Graph::NodeId h1 = conv(g.avg_pool2(h0), "enc.1.w", "enc.1.b");
  Graph::NodeId h2 = conv(g.avg_pool2(h1), "enc.2.w", "enc.2.b");
  Graph::NodeId bott = conv(h2, "enc.3.w", "enc.3.b");

  Forward out;
  out.seg = decode_seg(g, bott);
  Graph::NodeId pooled = g.global_avg_pool(bott);
  out.chd = g.linear(pooled, g.leaf(param("chd_head.w")),
                     g.leaf(param("chd_head.b")));
  out.view = g.linear(pooled, g.leaf(param("view_head.w")),
                      g.leaf(param("view_head.b")));

  if (training && fp_rate > 0.0f) {
    if (!fp_rng)
      throw ConfigError("MultiTaskNet::forward: fp_rate > 0 needs an rng");
    Graph::NodeId bfp = g.channel_dropout(bott, fp_rate, fp_rng, training);
    out.seg_fp = decode_seg(g, bfp);
  }
  return out;
}

void MultiTaskNet::set_trainable(const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes) {
    bool any = false;
    for (const auto& n : names_)
      if (prefix_match(n, p)) {
        any = true;
        break;
      }
    if (!any)
      throw ConfigError("set_trainable: prefix matches no parameter: " + p);
  }
  for (const auto& n : names_) {
    bool on = false;
    for (const auto& p : prefixes)
      if (prefix_match(n, p)) {
        on = true;
        break;
      }
    params_.at(n)->set_requires_grad(on);
  }
}

std::vector<std::string> MultiTaskNet::trainable_params() const {
  std::vector<std::string> out;
  for (const auto& n : names_)
    if (params_.at(n)->requires_grad) out.push_back(n);
  return out;
}

void MultiTaskNet::reset_classification_head(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, rng_tag::kReset);
  TensorRef w = params_.at("chd_head.w");
  float std = std::sqrt(2.0f / static_cast<float>(w->shape[1]));
  for (float& v : w->data) v = static_cast<float>(rng.normal()) * std;
  TensorRef b = params_.at("chd_head.b");
  std::fill(b->data.begin(), b->data.end(), 0.0f);
}

void MultiTaskNet::zero_grads() {
  for (const auto& n : names_) params_.at(n)->zero_grad();
}

void ema_update(MultiTaskNet& teacher, const MultiTaskNet& student,
                float decay) {
  if (decay < 0.0f || decay > 1.0f)
    throw ConfigError("ema_update: decay must be in [0,1]");
  if (teacher.param_names() != student.param_names())
    throw DimError("ema_update: parameter registries differ");
  if (decay == 1.0f) return;

  for (const auto& n : teacher.param_names()) {
    TensorRef t = teacher.param(n);
    TensorRef s = student.param(n);
    if (!(t->shape == s->shape))
      throw DimError("ema_update: shape mismatch for " + n);
    if (decay == 0.0f) {
      std::memcpy(t->data.data(), s->data.data(), t->data.size() * 4);
      continue;
    }
    for (std::size_t i = 0; i < t->data.size(); ++i)
      t->data[i] = decay * t->data[i] + (1.0f - decay) * s->data[i];
  }
}

}  // namespace zssl::model
