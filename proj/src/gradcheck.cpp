#include "zssl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "zssl/rng.hpp"

namespace zssl::gradcheck {

Result check(const std::vector<TensorRef>& params,
             const std::function<double()>& forward,
             const std::function<void()>& compute_grads, const Options& opt) {
  compute_grads();
  std::vector<std::vector<float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (!p->requires_grad)
      throw ConfigError("gradcheck: param without requires_grad");
    grads.push_back(p->grad);
  }

  // Denominator floor chosen so rel < rel_tol is equivalent to the
  // |ad-fd| <= max(abs_floor, rel_tol*max(|ad|,|fd|)) pass rule.
  const double denom_floor = opt.abs_floor / opt.rel_tol;
  Result res;
  Rng pick = Rng::stream(opt.seed, rng_tag::kProbe);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const std::size_t n = p.data.size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_param > 0 &&
        n > (std::size_t)opt.max_coords_per_param) {
      coords.reserve((std::size_t)opt.max_coords_per_param);
      for (int i = 0; i < opt.max_coords_per_param; ++i)
        coords.push_back((std::size_t)pick.uniform_int((std::int64_t)n));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    } else {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    }
    for (std::size_t ci : coords) {
      const float x0 = p.data[ci];
      const float xp = x0 + opt.h;
      const float xm = x0 - opt.h;
      p.data[ci] = xp;
      const double fp = forward();
      p.data[ci] = xm;
      const double fm = forward();
      p.data[ci] = x0;
      const double step = (double)xp - (double)xm;
      const double fd = (fp - fm) / step;
      const double ad = (double)grads[pi][ci];
      const double rel =
          std::abs(ad - fd) /
          std::max(std::max(std::abs(ad), std::abs(fd)), denom_floor);
      res.rels.push_back(rel);
      if (rel < opt.rel_tol) res.passed++;
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  res.checked = res.rels.size();
  return res;
}

double Result::rel_err_at_coverage(double frac) const {
  if (rels.empty()) return 0.0;
  std::vector<double> s = rels;
  std::sort(s.begin(), s.end());
  std::size_t idx = (std::size_t)std::ceil(frac * (double)s.size());
  if (idx == 0) return 0.0;
  return s[std::min(idx, s.size()) - 1];
}

// ---------------------------------------------------------------------------
// Double-precision reference forward. The finite-difference oracle evaluates
// this independent implementation so the difference quotient is not drowned
// in float32 loss quantization; the analytic gradients under test still come
// from the float32 graph.
// ---------------------------------------------------------------------------

namespace ref {

struct DT {
  Shape shape{1};
  std::vector<double> data;
};

DT lift(const Tensor& t) {
  DT d;
  d.shape = t.shape;
  d.data.assign(t.data.begin(), t.data.end());
  return d;
}

DT conv2d(const DT& x, const DT& k, const DT& b) {
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int o = k.shape[0], kk = k.shape[2];
  const int r = (kk - 1) / 2;
  DT out;
  out.shape = Shape{o, h, w};
  out.data.assign((std::size_t)o * h * w, 0.0);
  for (int oi = 0; oi < o; ++oi)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = b.data[(std::size_t)oi];
        for (int ci = 0; ci < c; ++ci)
          for (int ky = 0; ky < kk; ++ky) {
            const int sy = y + ky - r;
            if (sy < 0 || sy >= h) continue;
            for (int kx = 0; kx < kk; ++kx) {
              const int sx = xx + kx - r;
              if (sx < 0 || sx >= w) continue;
              acc += x.data[((std::size_t)ci * h + sy) * w + sx] *
                     k.data[(((std::size_t)oi * c + ci) * kk + ky) * kk + kx];
            }
          }
        out.data[((std::size_t)oi * h + y) * w + xx] = acc;
      }
  return out;
}

DT relu(DT x) {
  for (double& v : x.data) v = v > 0.0 ? v : 0.0;
  return x;
}

DT avg_pool2(const DT& x) {
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  DT out;
  out.shape = Shape{c, h / 2, w / 2};
  out.data.assign(x.data.size() / 4, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx) {
        const double* p = x.data.data() + ((std::size_t)ci * h + 2 * y) * w + 2 * xx;
        out.data[((std::size_t)ci * (h / 2) + y) * (w / 2) + xx] =
            0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  return out;
}

DT upsample2(const DT& x) {
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  DT out;
  out.shape = Shape{c, 2 * h, 2 * w};
  out.data.assign(x.data.size() * 4, 0.0);
  auto tap = [](int j, int n, int& i0, int& i1, double& f) {
    double s = (j + 0.5) * 0.5 - 0.5;
    i0 = (int)std::floor(s);
    f = s - i0;
    if (i0 < 0) { i0 = 0; f = 0.0; }
    i1 = i0 + 1;
    if (i1 > n - 1) { i1 = n - 1; f = 0.0; }
  };
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) {
        int y0, y1, x0, x1;
        double fy, fx;
        tap(y, h, y0, y1, fy);
        tap(xx, w, x0, x1, fx);
        auto at = [&](int yy, int xc) {
          return x.data[((std::size_t)ci * h + yy) * w + xc];
        };
        const double top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
        const double bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
        out.data[((std::size_t)ci * 2 * h + y) * 2 * w + xx] =
            top + fy * (bot - top);
      }
  return out;
}

DT gap(const DT& x) {
  const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
  DT out;
  out.shape = Shape{c};
  out.data.assign((std::size_t)c, 0.0);
  for (int ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += x.data[(std::size_t)ci * hw + i];
    out.data[(std::size_t)ci] = acc / hw;
  }
  return out;
}

DT linear(const DT& x, const DT& w, const DT& b) {
  const int k = w.shape[0], d = w.shape[1];
  DT out;
  out.shape = Shape{k};
  out.data.assign((std::size_t)k, 0.0);
  for (int i = 0; i < k; ++i) {
    double acc = b.data[(std::size_t)i];
    for (int j = 0; j < d; ++j)
      acc += w.data[(std::size_t)i * d + j] * x.data[(std::size_t)j];
    out.data[(std::size_t)i] = acc;
  }
  return out;
}

DT scale_channels(DT x, const std::vector<double>& s) {
  const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < hw; ++i) x.data[(std::size_t)ci * hw + i] *= s[(std::size_t)ci];
  return x;
}

DT rows(const DT& x) {
  const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
  DT out;
  out.shape = Shape{hw, c};
  out.data.assign(x.data.size(), 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < hw; ++i)
      out.data[(std::size_t)i * c + ci] = x.data[(std::size_t)ci * hw + i];
  return out;
}

double focal(const DT& logits, const std::vector<int>& tg, double gamma,
             const std::vector<std::uint8_t>& ig) {
  const int n = logits.shape.rank == 1 ? 1 : logits.shape[0];
  const int k = logits.shape.rank == 1 ? logits.shape[0] : logits.shape[1];
  double acc = 0.0;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    if (!ig.empty() && ig[(std::size_t)i]) continue;
    const double* row = logits.data.data() + (std::size_t)i * k;
    double m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double ce = m + std::log(s) - row[tg[(std::size_t)i]];
    const double u = std::max(0.0, 1.0 - std::exp(-ce));
    acc += (gamma == 0.0 ? 1.0 : std::pow(u, gamma)) * ce;
    ++used;
  }
  return used ? acc / used : 0.0;
}

double ce(const DT& logits, const std::vector<int>& tg,
          const std::vector<std::uint8_t>& ig = {}) {
  return focal(logits, tg, 0.0, ig);
}

}  // namespace ref

namespace {

TensorRef randn_param(const Shape& s, Rng& rng, float scale) {
  Tensor t = Tensor::zeros(s, true);
  for (float& v : t.data) v = scale * (float)rng.normal();
  return make_tensor(t);
}

// Uniform magnitude in [lo,hi] with random sign; keeps relu inputs away from
// the kink so finite differences stay one-sided.
TensorRef rand_signed(const Shape& s, Rng& rng, float lo, float hi) {
  Tensor t = Tensor::zeros(s, true);
  for (float& v : t.data) {
    const float m = lo + (hi - lo) * (float)rng.uniform();
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return make_tensor(t);
}

std::vector<int> rand_targets(int n, int k, Rng& rng) {
  std::vector<int> t((std::size_t)n);
  for (int& v : t) v = (int)rng.uniform_int(k);
  return t;
}

// Fixed-weight scalar readout: GAP then 1-output linear for rank-3 inputs.
struct Readout {
  TensorRef w, b;
  Readout(int d, Rng& rng) {
    w = randn_param(Shape{1, d}, rng, 0.6f);
    b = randn_param(Shape{1}, rng, 0.1f);
    w->set_requires_grad(false);
    b->set_requires_grad(false);
  }
  Graph::NodeId vec(Graph& g, Graph::NodeId x) const {
    return g.linear(x, g.leaf(w), g.leaf(b));
  }
  Graph::NodeId chw(Graph& g, Graph::NodeId x) const {
    return vec(g, g.global_avg_pool(x));
  }
  double vec_ref(const ref::DT& x) const {
    return ref::linear(x, ref::lift(*w), ref::lift(*b)).data[0];
  }
  double chw_ref(const ref::DT& x) const { return vec_ref(ref::gap(x)); }
};

struct Case {
  const char* name = nullptr;
  std::vector<TensorRef> params;
  std::function<void()> compute_grads;  // float graph, backward into params
  std::function<double()> oracle;       // double reference forward
  Options opt;
};

Result run_case(const Case& c, bool verbose) {
  Result r = check(c.params, c.oracle, c.compute_grads, c.opt);
  if (verbose)
    std::printf("  %-18s coords %5zu pass %5zu max_rel %.3e\n", c.name,
                r.checked, r.passed, r.max_rel_err);
  return r;
}

}  // namespace

Result run_suite(std::uint64_t seed, bool verbose, float h) {
  std::vector<Case> cases;

  auto add_case = [&cases, seed, h](const char* name,
                                    std::vector<TensorRef> params,
                                    std::function<Graph::NodeId(Graph&)> build,
                                    std::function<double()> oracle) {
    Case c;
    c.name = name;
    c.params = std::move(params);
    c.compute_grads = [build, params = c.params]() {
      for (const auto& p : params) p->zero_grad();
      Graph g;
      g.backward(build(g));
    };
    c.oracle = std::move(oracle);
    c.opt.seed = seed;
    c.opt.h = h;
    cases.push_back(std::move(c));
  };

  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 1);
    auto x = rand_signed(Shape{2, 6, 6}, r, 0.1f, 1.0f);
    auto k = randn_param(Shape{3, 2, 3, 3}, r, 0.4f);
    auto b = randn_param(Shape{3}, r, 0.2f);
    auto ro = std::make_shared<Readout>(3, r);
    add_case("conv2d", {x, k, b},
             [x, k, b, ro](Graph& g) {
               return ro->chw(g, g.conv2d(g.leaf(x), g.leaf(k), g.leaf(b), 1));
             },
             [x, k, b, ro]() {
               return ro->chw_ref(
                   ref::conv2d(ref::lift(*x), ref::lift(*k), ref::lift(*b)));
             });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 2);
    auto x = rand_signed(Shape{3, 4, 4}, r, 0.05f, 1.0f);
    auto ro = std::make_shared<Readout>(3, r);
    add_case("relu", {x},
             [x, ro](Graph& g) { return ro->chw(g, g.relu(g.leaf(x))); },
             [x, ro]() { return ro->chw_ref(ref::relu(ref::lift(*x))); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 3);
    auto x = randn_param(Shape{2, 6, 6}, r, 0.7f);
    auto ro = std::make_shared<Readout>(2, r);
    add_case("avg_pool2", {x},
             [x, ro](Graph& g) { return ro->chw(g, g.avg_pool2(g.leaf(x))); },
             [x, ro]() { return ro->chw_ref(ref::avg_pool2(ref::lift(*x))); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 4);
    auto x = randn_param(Shape{2, 3, 4}, r, 0.7f);
    auto ro = std::make_shared<Readout>(2, r);
    add_case("upsample2", {x},
             [x, ro](Graph& g) {
               return ro->chw(g, g.upsample_bilinear2(g.leaf(x)));
             },
             [x, ro]() { return ro->chw_ref(ref::upsample2(ref::lift(*x))); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 5);
    auto x = randn_param(Shape{3, 5, 5}, r, 0.7f);
    auto ro = std::make_shared<Readout>(3, r);
    add_case("global_avg_pool", {x},
             [x, ro](Graph& g) {
               return ro->vec(g, g.global_avg_pool(g.leaf(x)));
             },
             [x, ro]() { return ro->vec_ref(ref::gap(ref::lift(*x))); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 6);
    auto x = randn_param(Shape{6}, r, 0.7f);
    auto w = randn_param(Shape{4, 6}, r, 0.4f);
    auto b = randn_param(Shape{4}, r, 0.2f);
    auto ro = std::make_shared<Readout>(4, r);
    add_case("linear", {x, w, b},
             [x, w, b, ro](Graph& g) {
               return ro->vec(g, g.linear(g.leaf(x), g.leaf(w), g.leaf(b)));
             },
             [x, w, b, ro]() {
               return ro->vec_ref(
                   ref::linear(ref::lift(*x), ref::lift(*w), ref::lift(*b)));
             });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 7);
    auto x = randn_param(Shape{8, 4, 4}, r, 0.7f);
    auto ro = std::make_shared<Readout>(8, r);
    // One fixed mask shared by the graph op and the oracle.
    Rng mr = Rng::stream(seed, rng_tag::kDropout, 99);
    const float rate = 0.5f;
    std::vector<double> mask(8);
    for (double& m : mask)
      m = mr.uniform() < rate ? 0.0 : 1.0 / (1.0 - rate);
    add_case("channel_dropout", {x},
             [x, ro, seed](Graph& g) {
               Rng dr = Rng::stream(seed, rng_tag::kDropout, 99);
               return ro->chw(g, g.channel_dropout(g.leaf(x), 0.5f, &dr, true));
             },
             [x, ro, mask]() {
               return ro->chw_ref(ref::scale_channels(ref::lift(*x), mask));
             });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 8);
    auto x = randn_param(Shape{3, 4, 4}, r, 0.7f);
    auto tg = rand_targets(16, 3, r);
    add_case("rows_from_chw", {x},
             [x, tg](Graph& g) {
               return g.softmax_cross_entropy(g.rows_from_chw(g.leaf(x)), tg);
             },
             [x, tg]() { return ref::ce(ref::rows(ref::lift(*x)), tg); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 9);
    auto a = randn_param(Shape{2, 3, 3}, r, 0.7f);
    auto b = randn_param(Shape{2, 3, 3}, r, 0.7f);
    auto ro = std::make_shared<Readout>(2, r);
    add_case("add_scale", {a, b},
             [a, b, ro](Graph& g) {
               return ro->chw(
                   g, g.scale(g.add(g.leaf(a), g.scale(g.leaf(b), 0.7f)), 1.3f));
             },
             [a, b, ro]() {
               ref::DT x = ref::lift(*a);
               const ref::DT y = ref::lift(*b);
               for (std::size_t i = 0; i < x.data.size(); ++i)
                 x.data[i] = 1.3 * (x.data[i] + 0.7 * y.data[i]);
               return ro->chw_ref(x);
             });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 10);
    auto x = randn_param(Shape{5, 7}, r, 0.8f);
    auto tg = rand_targets(5, 7, r);
    std::vector<std::uint8_t> ig(5, 0);
    ig[2] = 1;
    add_case("cross_entropy", {x},
             [x, tg, ig](Graph& g) {
               return g.softmax_cross_entropy(g.leaf(x), tg, ig);
             },
             [x, tg, ig]() { return ref::ce(ref::lift(*x), tg, ig); });
  }
  {
    Rng r = Rng::stream(seed, rng_tag::kProbe, 11);
    auto x = randn_param(Shape{5, 7}, r, 0.8f);
    auto tg = rand_targets(5, 7, r);
    add_case("focal", {x},
             [x, tg](Graph& g) { return g.focal_loss(g.leaf(x), tg, 2.0f); },
             [x, tg]() { return ref::focal(ref::lift(*x), tg, 2.0, {}); });
  }
  {
    // Composed multi-task style net: shared trunk, seg CE + cls CE + focal.
    Rng r = Rng::stream(seed, rng_tag::kProbe, 12);
    auto img = rand_signed(Shape{1, 8, 8}, r, 0.1f, 1.0f);
    auto k1 = randn_param(Shape{4, 1, 3, 3}, r, 0.5f);
    auto b1 = randn_param(Shape{4}, r, 0.2f);
    auto k2 = randn_param(Shape{6, 4, 3, 3}, r, 0.3f);
    auto b2 = randn_param(Shape{6}, r, 0.2f);
    auto ks = randn_param(Shape{5, 6, 1, 1}, r, 0.5f);
    auto bs = randn_param(Shape{5}, r, 0.1f);
    auto wc = randn_param(Shape{3, 6}, r, 0.5f);
    auto bc = randn_param(Shape{3}, r, 0.1f);
    auto seg_t = rand_targets(16, 5, r);
    auto cls_t = rand_targets(1, 3, r);
    add_case("composed_net", {img, k1, b1, k2, b2, ks, bs, wc, bc},
             [=](Graph& g) {
               auto h1 = g.avg_pool2(
                   g.relu(g.conv2d(g.leaf(img), g.leaf(k1), g.leaf(b1), 1)));
               auto h2 = g.relu(g.conv2d(h1, g.leaf(k2), g.leaf(b2), 1));
               auto seg = g.conv2d(h2, g.leaf(ks), g.leaf(bs), 0);
               auto rows = g.rows_from_chw(seg);
               auto l_seg = g.softmax_cross_entropy(rows, seg_t);
               auto l_foc = g.focal_loss(rows, seg_t, 2.0f);
               auto cls = g.linear(g.global_avg_pool(h2), g.leaf(wc),
                                   g.leaf(bc));
               auto l_cls = g.softmax_cross_entropy(cls, cls_t);
               return g.add(l_seg, g.add(g.scale(l_cls, 0.8f),
                                         g.scale(l_foc, 0.4f)));
             },
             [=]() {
               auto h1 = ref::avg_pool2(ref::relu(ref::conv2d(
                   ref::lift(*img), ref::lift(*k1), ref::lift(*b1))));
               auto h2 = ref::relu(
                   ref::conv2d(h1, ref::lift(*k2), ref::lift(*b2)));
               auto rows = ref::rows(
                   ref::conv2d(h2, ref::lift(*ks), ref::lift(*bs)));
               auto cls = ref::linear(ref::gap(h2), ref::lift(*wc),
                                      ref::lift(*bc));
               return ref::ce(rows, seg_t) + 0.8 * ref::ce(cls, cls_t) +
                      0.4 * ref::focal(rows, seg_t, 2.0, {});
             });
  }

  Result total;
  for (const Case& c : cases) {
    Result r = run_case(c, verbose);
    total.passed += r.passed;
    total.max_rel_err = std::max(total.max_rel_err, r.max_rel_err);
    total.rels.insert(total.rels.end(), r.rels.begin(), r.rels.end());
  }
  total.checked = total.rels.size();
  return total;
}

}  // namespace zssl::gradcheck
