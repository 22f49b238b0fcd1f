#include "zssl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "zssl/kernels.hpp"

namespace zssl {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool rg) {
  Tensor t;
  t.shape = s;
  t.data.assign((std::size_t)s.numel(), 0.0f);
  t.set_requires_grad(rg);
  return t;
}

Tensor Tensor::full(const Shape& s, float v, bool rg) {
  if (!std::isfinite(v)) throw NumericError("Tensor::full: non-finite value");
  Tensor t;
  t.shape = s;
  t.data.assign((std::size_t)s.numel(), v);
  t.set_requires_grad(rg);
  return t;
}

Tensor Tensor::from(const Shape& s, std::vector<float> values, bool rg) {
  if ((std::int64_t)values.size() != s.numel())
    throw DimError("Tensor::from: data size " + std::to_string(values.size()) +
                   " does not match shape " + s.str());
  Tensor t;
  t.shape = s;
  t.data = std::move(values);
  t.check_finite("Tensor::from");
  t.set_requires_grad(rg);
  return t;
}

Tensor Tensor::scalar(float v, bool rg) { return full(Shape{1}, v, rg); }

float Tensor::item() const {
  if (numel() != 1) throw DimError("Tensor::item: not a scalar");
  return data[0];
}

void Tensor::set_requires_grad(bool rg) {
  requires_grad = rg;
  if (rg)
    grad.assign(data.size(), 0.0f);
  else {
    grad.clear();
    grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0f);
}

void Tensor::check_finite(const char* what) const {
  for (float v : data)
    if (!std::isfinite(v))
      throw NumericError(std::string(what) + ": non-finite tensor value");
}

TensorRef make_tensor(Tensor t) { return std::make_shared<Tensor>(std::move(t)); }

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Graph::Node& Graph::node(NodeId id) { return nodes_[(std::size_t)id]; }
const Graph::Node& Graph::node(NodeId id) const { return nodes_[(std::size_t)id]; }

bool Graph::any_needs_grad(const std::vector<NodeId>& ins) const {
  for (NodeId i : ins)
    if (node(i).needs_grad) return true;
  return false;
}

Graph::NodeId Graph::push(TensorRef out, std::vector<NodeId> ins,
                          std::function<void(Graph&, const Node&)> back) {
  Node n;
  n.out = std::move(out);
  n.ins = std::move(ins);
  n.needs_grad = any_needs_grad(n.ins);
  if (n.needs_grad && !n.out->requires_grad) n.out->set_requires_grad(true);
  n.back = n.needs_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return (NodeId)(nodes_.size() - 1);
}

Graph::NodeId Graph::leaf(TensorRef t) {
  if (!t) throw DimError("Graph::leaf: null tensor");
  Node n;
  n.out = std::move(t);
  n.needs_grad = n.out->requires_grad;
  nodes_.push_back(std::move(n));
  return (NodeId)(nodes_.size() - 1);
}

Graph::NodeId Graph::input(Tensor t) {
  t.set_requires_grad(false);
  return leaf(make_tensor(std::move(t)));
}

const Tensor& Graph::val(NodeId id) const { return *node(id).out; }
TensorRef Graph::ref(NodeId id) const { return node(id).out; }

void Graph::backward(NodeId loss) {
  const Node& ln = node(loss);
  if (ln.out->numel() != 1)
    throw DimError("Graph::backward: loss must be scalar, got " +
                   ln.out->shape.str());
  if (!ln.needs_grad) return;  // constant loss: nothing reachable

  // Mark reachable nodes, then reset intermediate grads so repeated backward
  // calls accumulate linearly into the leaves.
  std::vector<char> reach(nodes_.size(), 0);
  reach[(std::size_t)loss] = 1;
  for (NodeId id = loss; id >= 0; --id) {
    if (!reach[(std::size_t)id]) continue;
    const Node& n = node(id);
    if (!n.needs_grad) continue;
    for (NodeId i : n.ins) reach[(std::size_t)i] = 1;
    if (!n.ins.empty()) n.out->zero_grad();
  }
  ln.out->grad[0] += 1.0f;
  for (NodeId id = loss; id >= 0; --id) {
    if (!reach[(std::size_t)id]) continue;
    const Node& n = node(id);
    if (n.back) n.back(*this, n);
  }
}

// Accumulates src into dst->grad.
static void add_into_grad(const TensorRef& dst, const float* src) {
  float* g = dst->grad.data();
  const std::size_t n = dst->grad.size();
  for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Graph::NodeId Graph::conv2d(NodeId input, NodeId kernel, NodeId bias,
                            int padding) {
  const Tensor& x = val(input);
  const Tensor& k = val(kernel);
  const Tensor& b = val(bias);
  if (x.shape.rank != 3) throw DimError("conv2d: input must be CxHxW");
  if (k.shape.rank != 4) throw DimError("conv2d: kernel must be OxCxKxK");
  if (b.shape.rank != 1) throw DimError("conv2d: bias must be rank 1");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int o = k.shape[0], kc = k.shape[1], kh = k.shape[2], kw = k.shape[3];
  if (kc != c) throw DimError("conv2d: channel mismatch");
  if (kh != kw || kh % 2 == 0) throw DimError("conv2d: kernel must be odd square");
  if (padding != (kh - 1) / 2)
    throw DimError("conv2d: padding must be (K-1)/2 (shape-preserving)");
  if (b.shape[0] != o) throw DimError("conv2d: bias size mismatch");

  Tensor out = Tensor::zeros(Shape{o, h, w});
  kernels::conv2d_forward(x.data.data(), c, h, w, k.data.data(), o, kh,
                          b.data.data(), out.data.data());

  auto back = [c, h, w, o, kh](Graph& g, const Node& n) {
    const float* gout = n.out->grad.data();
    const Node& xin = g.node(n.ins[0]);
    const Node& kin = g.node(n.ins[1]);
    const Node& bin = g.node(n.ins[2]);
    if (xin.needs_grad) {
      std::vector<float> tmp((std::size_t)c * h * w);
      kernels::conv2d_backward_input(gout, o, h, w, kin.out->data.data(), c, kh,
                                     tmp.data());
      add_into_grad(xin.out, tmp.data());
    }
    if (kin.needs_grad) {
      std::vector<float> tmp((std::size_t)o * c * kh * kh);
      kernels::conv2d_backward_kernel(gout, o, h, w, xin.out->data.data(), c,
                                      kh, tmp.data());
      add_into_grad(kin.out, tmp.data());
    }
    if (bin.needs_grad) {
      std::vector<float> tmp((std::size_t)o);
      kernels::conv2d_backward_bias(gout, o, h, w, tmp.data());
      add_into_grad(bin.out, tmp.data());
    }
  };
  return push(make_tensor(std::move(out)), {input, kernel, bias}, back);
}

Graph::NodeId Graph::relu(NodeId x) {
  const Tensor& in = val(x);
  Tensor out = in;
  out.set_requires_grad(false);
  for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
  auto back = [](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    const float* xv = xin.out->data.data();
    float* gx = xin.out->grad.data();
    for (std::size_t i = 0; i < xin.out->data.size(); ++i)
      if (xv[i] > 0.0f) gx[i] += gout[i];
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::avg_pool2(NodeId x) {
  const Tensor& in = val(x);
  if (in.shape.rank != 3) throw DimError("avg_pool2: input must be CxHxW");
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  if (h % 2 || w % 2) throw DimError("avg_pool2: H and W must be even");
  const int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros(Shape{c, oh, ow});
  for (int ci = 0; ci < c; ++ci) {
    const float* src = in.data.data() + (std::size_t)ci * h * w;
    float* dst = out.data.data() + (std::size_t)ci * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const float* p = src + (std::size_t)(2 * y) * w + 2 * xx;
        dst[y * ow + xx] = 0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  auto back = [c, h, w, oh, ow](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    float* gx = xin.out->grad.data();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const float gv = 0.25f * gout[((std::size_t)ci * oh + y) * ow + xx];
          float* p = gx + ((std::size_t)ci * h + 2 * y) * w + 2 * xx;
          p[0] += gv;
          p[1] += gv;
          p[w] += gv;
          p[w + 1] += gv;
        }
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

namespace {
// Half-pixel-center 2x bilinear taps for one axis.
struct UpTap {
  int i0, i1;
  float w1;  // weight of i1; i0 gets 1-w1
};
std::vector<UpTap> up2_taps(int n_in) {
  std::vector<UpTap> taps((std::size_t)n_in * 2);
  for (int j = 0; j < 2 * n_in; ++j) {
    double s = (j + 0.5) * 0.5 - 0.5;
    int i0 = (int)std::floor(s);
    double f = s - i0;
    if (i0 < 0) {
      i0 = 0;
      f = 0.0;
    }
    int i1 = i0 + 1;
    if (i1 > n_in - 1) {
      i1 = n_in - 1;
      f = 0.0;
    }
    taps[(std::size_t)j] = {i0, i1, (float)f};
  }
  return taps;
}
}  // namespace

Graph::NodeId Graph::upsample_bilinear2(NodeId x) {
  const Tensor& in = val(x);
  if (in.shape.rank != 3) throw DimError("upsample_bilinear2: input must be CxHxW");
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  const int oh = 2 * h, ow = 2 * w;
  auto ty = up2_taps(h), tx = up2_taps(w);
  Tensor out = Tensor::zeros(Shape{c, oh, ow});
  for (int ci = 0; ci < c; ++ci) {
    const float* src = in.data.data() + (std::size_t)ci * h * w;
    float* dst = out.data.data() + (std::size_t)ci * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const UpTap& a = ty[(std::size_t)y];
      for (int xx = 0; xx < ow; ++xx) {
        const UpTap& b = tx[(std::size_t)xx];
        const float v00 = src[a.i0 * w + b.i0], v01 = src[a.i0 * w + b.i1];
        const float v10 = src[a.i1 * w + b.i0], v11 = src[a.i1 * w + b.i1];
        const float top = v00 + b.w1 * (v01 - v00);
        const float bot = v10 + b.w1 * (v11 - v10);
        dst[y * ow + xx] = top + a.w1 * (bot - top);
      }
    }
  }
  auto back = [c, h, w, oh, ow, ty, tx](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    float* gx = xin.out->grad.data();
    for (int ci = 0; ci < c; ++ci) {
      const float* go = gout + (std::size_t)ci * oh * ow;
      float* gi = gx + (std::size_t)ci * h * w;
      for (int y = 0; y < oh; ++y) {
        const UpTap& a = ty[(std::size_t)y];
        for (int xx = 0; xx < ow; ++xx) {
          const UpTap& b = tx[(std::size_t)xx];
          const float gv = go[y * ow + xx];
          const float wy1 = a.w1, wx1 = b.w1;
          gi[a.i0 * w + b.i0] += (1.0f - wy1) * (1.0f - wx1) * gv;
          gi[a.i0 * w + b.i1] += (1.0f - wy1) * wx1 * gv;
          gi[a.i1 * w + b.i0] += wy1 * (1.0f - wx1) * gv;
          gi[a.i1 * w + b.i1] += wy1 * wx1 * gv;
        }
      }
    }
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::global_avg_pool(NodeId x) {
  const Tensor& in = val(x);
  if (in.shape.rank != 3) throw DimError("global_avg_pool: input must be CxHxW");
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  Tensor out = Tensor::zeros(Shape{c});
  for (int ci = 0; ci < c; ++ci) {
    const float* src = in.data.data() + (std::size_t)ci * h * w;
    double acc = 0.0;
    for (int i = 0; i < h * w; ++i) acc += (double)src[i];
    out.data[(std::size_t)ci] = (float)(acc / (h * w));
  }
  auto back = [c, h, w](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float inv = 1.0f / (float)(h * w);
    float* gx = xin.out->grad.data();
    for (int ci = 0; ci < c; ++ci) {
      const float gv = n.out->grad[(std::size_t)ci] * inv;
      float* p = gx + (std::size_t)ci * h * w;
      for (int i = 0; i < h * w; ++i) p[i] += gv;
    }
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::linear(NodeId x, NodeId w, NodeId b) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  const Tensor& bv = val(b);
  if (xv.shape.rank != 1 || wv.shape.rank != 2 || bv.shape.rank != 1)
    throw DimError("linear: expected x:D, w:KxD, b:K");
  const int k = wv.shape[0], d = wv.shape[1];
  if (xv.shape[0] != d || bv.shape[0] != k)
    throw DimError("linear: dimension mismatch");
  Tensor out = Tensor::zeros(Shape{k});
  for (int i = 0; i < k; ++i) {
    double acc = (double)bv.data[(std::size_t)i];
    const float* wr = wv.data.data() + (std::size_t)i * d;
    for (int j = 0; j < d; ++j) acc += (double)wr[j] * (double)xv.data[(std::size_t)j];
    out.data[(std::size_t)i] = (float)acc;
  }
  auto back = [k, d](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    const Node& win = g.node(n.ins[1]);
    const Node& bin = g.node(n.ins[2]);
    const float* gout = n.out->grad.data();
    if (xin.needs_grad) {
      float* gx = xin.out->grad.data();
      const float* wd = win.out->data.data();
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i) acc += (double)gout[i] * (double)wd[(std::size_t)i * d + j];
        gx[j] += (float)acc;
      }
    }
    if (win.needs_grad) {
      float* gw = win.out->grad.data();
      const float* xd = xin.out->data.data();
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < d; ++j) gw[(std::size_t)i * d + j] += gout[i] * xd[j];
    }
    if (bin.needs_grad) {
      float* gb = bin.out->grad.data();
      for (int i = 0; i < k; ++i) gb[i] += gout[i];
    }
  };
  return push(make_tensor(std::move(out)), {x, w, b}, back);
}

Graph::NodeId Graph::channel_dropout(NodeId x, float rate, Rng* rng,
                                     bool training) {
  if (rate < 0.0f || rate >= 1.0f)
    throw ConfigError("channel_dropout: rate must be in [0,1)");
  const Tensor& in = val(x);
  if (in.shape.rank != 3) throw DimError("channel_dropout: input must be CxHxW");
  if (!training || rate == 0.0f) {
    // Identity; keeps eval paths perturbation-free and consumes no rng draws.
    Tensor out = in;
    out.set_requires_grad(false);
    auto back = [](Graph& g, const Node& n) {
      const Node& xin = g.node(n.ins[0]);
      if (xin.needs_grad) add_into_grad(xin.out, n.out->grad.data());
    };
    return push(make_tensor(std::move(out)), {x}, back);
  }
  if (!rng) throw ConfigError("channel_dropout: rng required in training mode");
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  const float keep_scale = 1.0f / (1.0f - rate);
  std::vector<float> chan_scale((std::size_t)c);
  for (int ci = 0; ci < c; ++ci)
    chan_scale[(std::size_t)ci] = rng->uniform() < rate ? 0.0f : keep_scale;
  Tensor out = Tensor::zeros(in.shape);
  for (int ci = 0; ci < c; ++ci) {
    const float s = chan_scale[(std::size_t)ci];
    const float* src = in.data.data() + (std::size_t)ci * h * w;
    float* dst = out.data.data() + (std::size_t)ci * h * w;
    for (int i = 0; i < h * w; ++i) dst[i] = s * src[i];
  }
  auto back = [c, h, w, chan_scale](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    float* gx = xin.out->grad.data();
    for (int ci = 0; ci < c; ++ci) {
      const float s = chan_scale[(std::size_t)ci];
      if (s == 0.0f) continue;
      const float* go = gout + (std::size_t)ci * h * w;
      float* gi = gx + (std::size_t)ci * h * w;
      for (int i = 0; i < h * w; ++i) gi[i] += s * go[i];
    }
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::rows_from_chw(NodeId x) {
  const Tensor& in = val(x);
  if (in.shape.rank != 3) throw DimError("rows_from_chw: input must be CxHxW");
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  Tensor out = Tensor::zeros(Shape{h * w, c});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h * w; ++i)
      out.data[(std::size_t)i * c + ci] = in.data[(std::size_t)ci * h * w + i];
  auto back = [c, h, w](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    float* gx = xin.out->grad.data();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h * w; ++i)
        gx[(std::size_t)ci * h * w + i] += gout[(std::size_t)i * c + ci];
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.shape != bv.shape) throw DimError("add: shape mismatch");
  Tensor out = av;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  auto back = [](Graph& g, const Node& n) {
    for (NodeId in : n.ins) {
      const Node& x = g.node(in);
      if (x.needs_grad) add_into_grad(x.out, n.out->grad.data());
    }
  };
  return push(make_tensor(std::move(out)), {a, b}, back);
}

Graph::NodeId Graph::scale(NodeId x, float s) {
  if (!std::isfinite(s)) throw NumericError("scale: non-finite factor");
  const Tensor& in = val(x);
  Tensor out = in;
  out.set_requires_grad(false);
  for (float& v : out.data) v *= s;
  auto back = [s](Graph& g, const Node& n) {
    const Node& xin = g.node(n.ins[0]);
    if (!xin.needs_grad) return;
    const float* gout = n.out->grad.data();
    float* gx = xin.out->grad.data();
    for (std::size_t i = 0; i < xin.out->grad.size(); ++i) gx[i] += s * gout[i];
  };
  return push(make_tensor(std::move(out)), {x}, back);
}

Graph::NodeId Graph::zero() {
  return push(make_tensor(Tensor::scalar(0.0f)), {}, nullptr);
}

// ---------------------------------------------------------------------------
// Losses. Double accumulation throughout; per-row log-sum-exp with
// max-subtraction.
// ---------------------------------------------------------------------------

namespace {

struct RowView {
  int n, k;
};

RowView logits_rows(const Tensor& t, const char* op) {
  if (t.shape.rank == 1) return {1, t.shape[0]};
  if (t.shape.rank == 2) return {t.shape[0], t.shape[1]};
  throw DimError(std::string(op) + ": logits must be NxK or K");
}

double row_lse(const float* row, int k) {
  double m = row[0];
  for (int j = 1; j < k; ++j) m = std::max(m, (double)row[j]);
  double s = 0.0;
  for (int j = 0; j < k; ++j) s += std::exp((double)row[j] - m);
  return m + std::log(s);
}

}  // namespace

Graph::NodeId Graph::softmax_cross_entropy(NodeId logits,
                                           std::vector<int> targets,
                                           std::vector<std::uint8_t> ignore) {
  // CE == focal with gamma 0; shares one implementation path.
  return focal_loss(logits, std::move(targets), 0.0f, std::move(ignore));
}

Graph::NodeId Graph::focal_loss(NodeId logits, std::vector<int> targets,
                                float gamma, std::vector<std::uint8_t> ignore) {
  if (gamma < 0.0f) throw ConfigError("focal_loss: gamma must be >= 0");
  const Tensor& lg = val(logits);
  const RowView rv = logits_rows(lg, "focal_loss");
  if ((int)targets.size() != rv.n)
    throw DimError("focal_loss: targets size mismatch");
  if (!ignore.empty() && (int)ignore.size() != rv.n)
    throw DimError("focal_loss: ignore mask size mismatch");

  int n_used = 0;
  std::vector<double> lse((std::size_t)rv.n, 0.0);
  double acc = 0.0;
  for (int i = 0; i < rv.n; ++i) {
    if (!ignore.empty() && ignore[(std::size_t)i]) continue;
    const int t = targets[(std::size_t)i];
    if (t < 0 || t >= rv.k)
      throw DimError("focal_loss: target index " + std::to_string(t) +
                     " out of range [0," + std::to_string(rv.k) + ")");
    const float* row = lg.data.data() + (std::size_t)i * rv.k;
    const double l = row_lse(row, rv.k);
    lse[(std::size_t)i] = l;
    const double ce = l - (double)row[t];
    const double pt = std::exp(-ce);
    const double u = std::max(0.0, 1.0 - pt);
    acc += (gamma == 0.0f ? 1.0 : std::pow(u, (double)gamma)) * ce;
    ++n_used;
  }
  const float loss = n_used ? (float)(acc / n_used) : 0.0f;

  const int n = rv.n, k = rv.k;
  auto back = [n, k, n_used, targets = std::move(targets),
               ignore = std::move(ignore), lse = std::move(lse),
               gamma](Graph& g, const Node& nd) {
    const Node& lin = g.node(nd.ins[0]);
    if (!lin.needs_grad || n_used == 0) return;
    const double up = (double)nd.out->grad[0] / n_used;
    const float* ldata = lin.out->data.data();
    float* gl = lin.out->grad.data();
    for (int i = 0; i < n; ++i) {
      if (!ignore.empty() && ignore[(std::size_t)i]) continue;
      const int t = targets[(std::size_t)i];
      const float* row = ldata + (std::size_t)i * k;
      float* grow = gl + (std::size_t)i * k;
      const double l = lse[(std::size_t)i];
      const double ce = l - (double)row[t];
      const double pt = std::exp(-ce);
      const double u = std::max(0.0, 1.0 - pt);
      double factor;
      if (gamma == 0.0f)
        factor = 1.0;
      else {
        factor = std::pow(u, (double)gamma);
        if (u > 0.0)
          factor += (double)gamma * std::pow(u, (double)gamma - 1.0) * pt * ce;
      }
      for (int j = 0; j < k; ++j) {
        const double pj = std::exp((double)row[j] - l);
        const double delta = (j == t) ? 1.0 : 0.0;
        grow[j] += (float)(up * factor * (pj - delta));
      }
    }
  };
  return push(make_tensor(Tensor::scalar(loss)), {logits}, back);
}

}  // namespace zssl
