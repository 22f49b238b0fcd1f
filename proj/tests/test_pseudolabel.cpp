#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "zssl/phantom.hpp"
#include "zssl/pseudolabel.hpp"

using namespace zssl;
using namespace zssl::pl;

namespace {

Tensor rand_image(std::uint64_t seed, int h = 32, int w = 32) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({1, h, w});
  for (float& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

model::MultiTaskNet zero_net() {
  model::MultiTaskNet net(0);
  for (const auto& n : net.param_names()) {
    auto& d = net.param(n)->data;
    std::fill(d.begin(), d.end(), 0.0f);
  }
  return net;
}

// Independent double-precision CE / focal over confident pixels.
double loss_oracle(const std::vector<float>& chw, int k, int h, int w,
                   const std::vector<std::uint8_t>& hard,
                   const std::vector<std::uint8_t>& conf, double gamma) {
  int plane = h * w;
  double sum = 0.0;
  int n = 0;
  for (int p = 0; p < plane; ++p) {
    if (!conf[static_cast<std::size_t>(p)]) continue;
    double zmax = -1e300;
    for (int c = 0; c < k; ++c)
      zmax = std::max(zmax, static_cast<double>(chw[static_cast<std::size_t>(c * plane + p)]));
    double den = 0.0;
    for (int c = 0; c < k; ++c)
      den += std::exp(chw[static_cast<std::size_t>(c * plane + p)] - zmax);
    double pt = std::exp(chw[static_cast<std::size_t>(
                             hard[static_cast<std::size_t>(p)] * plane + p)] -
                         zmax) /
                den;
    double ce = -std::log(pt);
    sum += gamma < 0.0 ? ce : std::pow(1.0 - pt, gamma) * ce;
    n++;
  }
  return n ? sum / n : 0.0;
}

Bundle hand_bundle(int k, int h, int w, std::vector<std::uint8_t> hard,
                   std::vector<std::uint8_t> conf) {
  Bundle b;
  b.pw = Tensor::zeros({k, h, w});
  b.hard = std::move(hard);
  b.conf = std::move(conf);
  b.h = h;
  b.w = w;
  return b;
}

}  // namespace

TEST_CASE("generate_pseudo: probabilities, argmax, confidence") {
  model::MultiTaskNet teacher(3);
  Tensor img = rand_image(1);
  auto b = generate_pseudo(teacher, img, 0.4f, true,
                           anatomask::View::FourCH);

  CHECK(b.pw.shape == Shape{15, 32, 32});
  CHECK(b.h == 32);
  CHECK(b.w == 32);
  CHECK(b.chd_logits.size() == 7);
  CHECK(b.view_logits.size() == 4);
  CHECK(b.mask_view == anatomask::View::FourCH);

  auto table = anatomask::MaskTable::defaults();
  int plane = 32 * 32;
  for (int p = 0; p < plane; ++p) {
    double sum = 0.0;
    float maxp = -1.0f;
    int arg = -1;
    for (int c = 0; c < 15; ++c) {
      float v = b.pw.data[static_cast<std::size_t>(c * plane + p)];
      sum += v;
      if (v > maxp) {
        maxp = v;
        arg = c;
      }
      if (!table.is_allowed(anatomask::View::FourCH, c))
        CHECK(v < 1e-12f);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(b.hard[static_cast<std::size_t>(p)] == arg);
    CHECK(b.conf[static_cast<std::size_t>(p)] == (maxp >= 0.4f ? 1 : 0));
    CHECK(table.is_allowed(anatomask::View::FourCH, arg));
  }
}

TEST_CASE("generate_pseudo: tau boundaries and monotonicity") {
  model::MultiTaskNet teacher(9);
  Tensor img = rand_image(2);

  auto b0 = generate_pseudo(teacher, img, 0.0f);
  CHECK(b0.conf_count() == 32 * 32);

  // tau above 1 behaves as tau = 1: confident only at saturated pixels.
  auto b1 = generate_pseudo(teacher, img, 1.5f);
  std::int64_t saturated = 0;
  int plane = 32 * 32;
  for (int p = 0; p < plane; ++p) {
    float maxp = 0.0f;
    for (int c = 0; c < 15; ++c)
      maxp = std::max(maxp, b1.pw.data[static_cast<std::size_t>(c * plane + p)]);
    if (maxp >= 1.0f) saturated++;
  }
  CHECK(b1.conf_count() == saturated);

  std::int64_t prev = plane + 1;
  for (float tau = 0.0f; tau <= 1.0f; tau += 0.1f) {
    auto b = generate_pseudo(teacher, img, tau);
    CHECK(b.conf_count() <= prev);
    prev = b.conf_count();
  }
}

TEST_CASE("generate_pseudo: uniform logits pick the lowest allowed class") {
  auto net = zero_net();
  Tensor img = rand_image(5);
  auto b = generate_pseudo(net, img, 0.19f, true, anatomask::View::LVOT);

  // All logits are zero, so allowed classes tie; argmax must resolve to the
  // lowest allowed index (0) and probabilities are uniform over the set.
  int allowed = 5;  // LVOT: {0,1,2,4,8}
  int plane = 32 * 32;
  for (int p = 0; p < plane; ++p) {
    CHECK(b.hard[static_cast<std::size_t>(p)] == 0);
    CHECK(b.conf[static_cast<std::size_t>(p)] == 1);
    CHECK(b.pw.data[static_cast<std::size_t>(p)] ==
          doctest::Approx(1.0 / allowed).epsilon(1e-6));
  }
  CHECK(generate_pseudo(net, img, 0.21f, true, anatomask::View::LVOT)
            .conf_count() == 0);
}

TEST_CASE("generate_pseudo: predicted-view masking and masked-class guarantee") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    model::MultiTaskNet teacher(seed);
    auto table = anatomask::MaskTable::defaults();
    for (int v = 0; v < 4; ++v) {
      auto s = phantom::generate_phantom(seed * 10 + v,
                                         anatomask::view_from_index(v), 1,
                                         phantom::PhantomParams{});
      auto bp = generate_pseudo(teacher, s.image, 0.5f);
      CHECK(bp.view_pred ==
            static_cast<int>(bp.mask_view));
      for (std::uint8_t cls : bp.hard)
        CHECK(table.is_allowed(bp.mask_view, cls));

      auto bf = generate_pseudo(teacher, s.image, 0.5f, true,
                                anatomask::view_from_index(v));
      CHECK(bf.mask_view == anatomask::view_from_index(v));
      for (std::uint8_t cls : bf.hard)
        CHECK(table.is_allowed(bf.mask_view, cls));
    }
  }
}

TEST_CASE("unimatch_losses: hand-built 2x2 three-class oracle") {
  auto b = hand_bundle(3, 2, 2, {0, 1, 2, 1}, {1, 1, 0, 1});

  std::vector<float> s1 = {2.0f, 0.5f, 1.0f, 0.0f,    // class 0 plane
                           0.0f, 1.5f, -1.0f, 0.0f,   // class 1 plane
                           -1.0f, 0.0f, 0.5f, 3.0f};  // class 2 plane
  std::vector<float> s2 = {1.0f, -0.5f, 0.0f, 0.2f,
                           0.3f, 2.0f, 1.0f, -0.4f,
                           0.0f, 0.1f, -2.0f, 1.0f};
  std::vector<float> fp = {0.0f, 0.0f, 0.0f, 0.0f,
                           1.0f, 1.0f, 1.0f, 1.0f,
                           2.0f, 2.0f, 2.0f, 2.0f};

  Graph g;
  auto n1 = g.input(Tensor::from({3, 2, 2}, s1));
  auto n2 = g.input(Tensor::from({3, 2, 2}, s2));
  auto nf = g.input(Tensor::from({3, 2, 2}, fp));
  auto out = unimatch_losses(g, b, n1, n2, nf, 2.0f);

  CHECK(g.val(out.s1).item() ==
        doctest::Approx(loss_oracle(s1, 3, 2, 2, b.hard, b.conf, -1.0))
            .epsilon(1e-5));
  CHECK(g.val(out.s2).item() ==
        doctest::Approx(loss_oracle(s2, 3, 2, 2, b.hard, b.conf, -1.0))
            .epsilon(1e-5));
  CHECK(g.val(out.fp).item() ==
        doctest::Approx(loss_oracle(fp, 3, 2, 2, b.hard, b.conf, -1.0))
            .epsilon(1e-5));

  std::vector<float> fused(12);
  for (int i = 0; i < 12; ++i)
    fused[static_cast<std::size_t>(i)] =
        0.5f * (s1[static_cast<std::size_t>(i)] + s2[static_cast<std::size_t>(i)]);
  CHECK(g.val(out.focal).item() ==
        doctest::Approx(loss_oracle(fused, 3, 2, 2, b.hard, b.conf, 2.0))
            .epsilon(1e-5));
  CHECK(out.mixed == -1);
}

TEST_CASE("unimatch_losses: mixed term against composed targets") {
  auto a = hand_bundle(3, 2, 2, {0, 0, 0, 0}, {1, 1, 1, 1});
  auto b = hand_bundle(3, 2, 2, {2, 2, 2, 2}, {1, 0, 1, 0});

  aug::MixBox box{1, 0, 2, 2};  // right column from b
  auto mt = mix_targets(a, b, box);
  CHECK(mt.hard == std::vector<std::uint8_t>{0, 2, 0, 2});
  CHECK(mt.conf == std::vector<std::uint8_t>{1, 0, 1, 0});

  std::vector<float> sm = {1.0f, 0.0f, 2.0f, -1.0f,
                           0.0f, 0.5f, 0.0f, 0.5f,
                           -1.0f, 2.0f, 1.0f, 3.0f};
  Graph g;
  auto dummy = g.input(Tensor::zeros({3, 2, 2}));
  auto nm = g.input(Tensor::from({3, 2, 2}, sm));
  auto out = unimatch_losses(g, a, dummy, dummy, -1, 2.0f, nm, &mt);
  CHECK(out.fp == -1);
  CHECK(g.val(out.mixed).item() ==
        doctest::Approx(loss_oracle(sm, 3, 2, 2, mt.hard, mt.conf, -1.0))
            .epsilon(1e-5));

  CHECK_THROWS_AS(unimatch_losses(g, a, dummy, dummy, -1, 2.0f, nm, nullptr),
                  ConfigError);
  auto wrong = g.input(Tensor::zeros({3, 4, 4}));
  CHECK_THROWS_AS(unimatch_losses(g, a, wrong, dummy, -1, 2.0f), DimError);

  auto c = hand_bundle(3, 4, 4, std::vector<std::uint8_t>(16, 0),
                       std::vector<std::uint8_t>(16, 1));
  CHECK_THROWS_AS(mix_targets(a, c, box), DimError);
}

TEST_CASE("unimatch_losses: saturation and zero-confidence edge cases") {
  auto b = hand_bundle(3, 2, 2, {0, 1, 2, 1}, {1, 1, 1, 1});

  // Student logits hugely favor the pseudo class at every pixel.
  std::vector<float> onehot(12, 0.0f);
  int plane = 4;
  for (int p = 0; p < plane; ++p)
    onehot[static_cast<std::size_t>(b.hard[static_cast<std::size_t>(p)] * plane + p)] = 30.0f;

  Graph g;
  auto n = g.input(Tensor::from({3, 2, 2}, onehot));
  auto out = unimatch_losses(g, b, n, n, n, 2.0f);
  CHECK(g.val(out.s1).item() < 1e-4f);
  CHECK(g.val(out.s2).item() < 1e-4f);
  CHECK(g.val(out.fp).item() < 1e-4f);
  CHECK(g.val(out.focal).item() < 1e-4f);

  // No confident pixels: every component is exactly zero.
  auto none = hand_bundle(3, 2, 2, {0, 1, 2, 1}, {0, 0, 0, 0});
  auto mt = mix_targets(none, none, aug::MixBox{0, 0, 1, 1});
  auto out0 = unimatch_losses(g, none, n, n, n, 2.0f, n, &mt);
  CHECK(g.val(out0.s1).item() == 0.0f);
  CHECK(g.val(out0.s2).item() == 0.0f);
  CHECK(g.val(out0.fp).item() == 0.0f);
  CHECK(g.val(out0.focal).item() == 0.0f);
  CHECK(g.val(out0.mixed).item() == 0.0f);
}

TEST_CASE("total_loss: paper weight table") {
  LossWeights w;
  Graph g;
  auto one = g.input(Tensor::scalar(1.0f));
  auto two = g.input(Tensor::scalar(2.0f));

  CHECK(g.val(total_loss(g, {{"sup_seg", two}}, w)).item() ==
        doctest::Approx(2.0));
  CHECK(g.val(total_loss(g, {{"sup_seg", one}, {"sup_cls", one}}, w)).item() ==
        doctest::Approx(1.8).epsilon(1e-6));

  std::vector<std::pair<std::string, Graph::NodeId>> all = {
      {"sup_seg", one},     {"sup_cls", one},       {"unsup_s1", one},
      {"unsup_s2", one},    {"unsup_focal", one},   {"unsup_mixed", one},
      {"pl_cls", one},      {"pl_cls_mixed", one},  {"pl_cls_focal_mixed", one}};
  CHECK(g.val(total_loss(g, all, w)).item() ==
        doctest::Approx(4.7).epsilon(1e-6));

  all.emplace_back("unsup_fp", one);
  CHECK(g.val(total_loss(g, all, w)).item() ==
        doctest::Approx(5.0).epsilon(1e-6));

  CHECK(g.val(total_loss(g, {}, w)).item() == 0.0f);
  CHECK_THROWS_AS(total_loss(g, {{"bogus", one}}, w), ConfigError);

  LossWeights bad;
  bad.unsup_focal = -0.1f;
  CHECK_THROWS_AS(total_loss(g, {{"sup_seg", one}}, bad), ConfigError);
  CHECK_THROWS_AS(bad.lookup("nope"), ConfigError);
}

TEST_CASE("total_loss: gradient is the weighted sum of component gradients") {
  LossWeights w;
  auto p = make_tensor(Tensor::from({2}, {0.3f, -0.7f}, true));

  auto grad_of = [&](std::vector<std::pair<std::string, int>> keys) {
    p->zero_grad();
    Graph g;
    auto leaf = g.leaf(p);
    std::vector<std::pair<std::string, Graph::NodeId>> comps;
    for (auto& [key, target] : keys)
      comps.emplace_back(key, g.softmax_cross_entropy(leaf, {target}));
    g.backward(total_loss(g, comps, w));
    return p->grad;
  };

  auto combined = grad_of({{"sup_seg", 0}, {"sup_cls", 1}});
  auto seg_only = grad_of({{"sup_seg", 0}});
  auto cls_only = grad_of({{"sup_cls", 1}});
  REQUIRE(combined.size() == 2);
  for (int i = 0; i < 2; ++i)
    CHECK(combined[static_cast<std::size_t>(i)] ==
          doctest::Approx(seg_only[static_cast<std::size_t>(i)] +
                          cls_only[static_cast<std::size_t>(i)])
              .epsilon(1e-6));
}

TEST_CASE("pseudo_chd_label: verdict gating and tie-break") {
  anchor::Verdict acc;
  acc.accept = true;
  anchor::Verdict rej;
  rej.accept = false;
  rej.reason = anchor::Reject::BelowThreshold;

  std::vector<float> logits = {0.1f, 0.9f, 0.3f, 0.0f, 0.0f, 0.0f, 0.0f};
  auto a = pseudo_chd_label(logits, acc);
  CHECK(a.cls == 1);
  CHECK(a.accepted);
  auto r = pseudo_chd_label(logits, rej);
  CHECK(r.cls == 1);
  CHECK(!r.accepted);

  std::vector<float> flat(7, 0.5f);
  CHECK(pseudo_chd_label(flat, acc).cls == 0);
  CHECK_THROWS_AS(pseudo_chd_label({1.0f, 2.0f}, acc), DimError);
}

TEST_CASE("bundle tensors are detached from any graph") {
  // generate_pseudo runs the teacher on a private graph; the returned
  // tensors are plain values, so student backward passes cannot reach the
  // teacher.
  model::MultiTaskNet teacher(11), student(12);
  Tensor img = rand_image(8);
  auto b = generate_pseudo(teacher, img, 0.0f);

  Graph g;
  auto out = student.forward(g, img, true);
  auto losses = unimatch_losses(g, b, out.seg, out.seg);
  g.backward(total_loss(g, {{"unsup_s1", losses.s1}}, LossWeights{}));

  // The teacher was never part of the student's graph, so its grad buffers
  // stay untouched (all zero).
  for (const auto& n : teacher.param_names())
    for (float v : teacher.param(n)->grad) CHECK(v == 0.0f);
  double mag = 0.0;
  for (float v : student.param("enc.0.w")->grad) mag += std::abs(v);
  CHECK(mag > 0.0);
}
