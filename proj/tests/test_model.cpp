#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "zssl/model.hpp"
#include "zssl/phantom.hpp"

using namespace zssl;
using namespace zssl::model;

namespace {

Tensor rand_image(std::uint64_t seed, int h = 64, int w = 64) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({1, h, w});
  for (float& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

bool same_data(const TensorRef& a, const TensorRef& b) {
  return a->data.size() == b->data.size() &&
         std::memcmp(a->data.data(), b->data.data(), a->data.size() * 4) == 0;
}

}  // namespace

TEST_CASE("forward: output shapes and training-flag invariance") {
  MultiTaskNet net(1);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{32, 48}, std::pair{16, 16}}) {
    Tensor img = rand_image(7, h, w);
    Graph g;
    auto out = net.forward(g, img, true);
    CHECK(g.val(out.seg).shape == Shape{kSegClasses, h, w});
    CHECK(g.val(out.chd).shape == Shape{kChdClasses});
    CHECK(g.val(out.view).shape == Shape{kViewClasses});
    CHECK(!out.has_fp());

    Graph ge;
    auto oe = net.forward(ge, img, false);
    CHECK(ge.val(oe.seg).shape == g.val(out.seg).shape);
    CHECK(std::memcmp(ge.val(oe.seg).data.data(), g.val(out.seg).data.data(),
                      ge.val(oe.seg).data.size() * 4) == 0);
  }

  Graph g;
  CHECK_THROWS_AS(net.forward(g, rand_image(1, 30, 64), true), DimError);
  CHECK_THROWS_AS(net.forward(g, rand_image(1, 64, 30), true), DimError);
  CHECK_THROWS_AS(net.forward(g, Tensor::zeros({2, 16, 16}), true), DimError);
  CHECK_THROWS_AS(net.forward(g, Tensor::zeros({16, 16}), true), DimError);
}

TEST_CASE("forward: deterministic construction and evaluation") {
  MultiTaskNet a(42), b(42), c(43);
  CHECK(a.param_names() == b.param_names());
  for (const auto& n : a.param_names())
    CHECK(same_data(a.param(n), b.param(n)));
  CHECK(!same_data(a.param("enc.0.w"), c.param("enc.0.w")));

  Tensor img = rand_image(3);
  Graph g1, g2;
  auto o1 = a.forward(g1, img, true);
  auto o2 = b.forward(g2, img, true);
  CHECK(std::memcmp(g1.val(o1.seg).data.data(), g2.val(o2.seg).data.data(),
                    g1.val(o1.seg).data.size() * 4) == 0);
  CHECK(std::memcmp(g1.val(o1.chd).data.data(), g2.val(o2.chd).data.data(),
                    kChdClasses * 4) == 0);
}

TEST_CASE("forward: feature perturbation path") {
  MultiTaskNet net(5);
  Tensor img = rand_image(11);

  // fp_rate 0: no fp output, main outputs unchanged vs plain forward.
  Graph g0, gp;
  auto plain = net.forward(gp, img, true);
  auto o0 = net.forward(g0, img, true, 0.0f);
  CHECK(!o0.has_fp());
  CHECK(std::memcmp(g0.val(o0.seg).data.data(), gp.val(plain.seg).data.data(),
                    g0.val(o0.seg).data.size() * 4) == 0);

  // eval ignores the request.
  Rng r1 = Rng::stream(9, rng_tag::kDropout);
  Graph ge;
  auto oe = net.forward(ge, img, false, 0.5f, &r1);
  CHECK(!oe.has_fp());

  // training + rate 0.5: fp present, differs from the main decode, and the
  // main outputs are untouched by the extra pass.
  Rng r2 = Rng::stream(9, rng_tag::kDropout);
  Graph gt;
  auto ot = net.forward(gt, img, true, 0.5f, &r2);
  REQUIRE(ot.has_fp());
  CHECK(gt.val(ot.seg_fp).shape == gt.val(ot.seg).shape);
  CHECK(std::memcmp(gt.val(ot.seg).data.data(), gp.val(plain.seg).data.data(),
                    gt.val(ot.seg).data.size() * 4) == 0);
  CHECK(std::memcmp(gt.val(ot.seg_fp).data.data(),
                    gt.val(ot.seg).data.data(),
                    gt.val(ot.seg).data.size() * 4) != 0);

  // Same dropout stream reproduces the fp decode bit-for-bit.
  Rng r3 = Rng::stream(9, rng_tag::kDropout);
  Graph gt2;
  auto ot2 = net.forward(gt2, img, true, 0.5f, &r3);
  CHECK(std::memcmp(gt2.val(ot2.seg_fp).data.data(),
                    gt.val(ot.seg_fp).data.data(),
                    gt.val(ot.seg_fp).data.size() * 4) == 0);

  Graph gx;
  CHECK_THROWS_AS(net.forward(gx, img, true, 0.5f, nullptr), ConfigError);
}

TEST_CASE("forward: every head is connected to the encoder") {
  MultiTaskNet net(8);
  Tensor img = rand_image(2, 16, 16);
  Rng fp_rng(4);
  Graph g;
  auto out = net.forward(g, img, true, 0.5f, &fp_rng);
  auto seg_rows = g.rows_from_chw(out.seg);
  std::vector<int> pix(16 * 16, 3);
  Graph::NodeId loss =
      g.add(g.add(g.softmax_cross_entropy(seg_rows, pix),
                  g.softmax_cross_entropy(out.chd, {2})),
            g.add(g.softmax_cross_entropy(out.view, {1}),
                  g.softmax_cross_entropy(g.rows_from_chw(out.seg_fp), pix)));
  g.backward(loss);

  for (const auto& n : net.param_names()) {
    auto p = net.param(n);
    REQUIRE(p->grad.size() == p->data.size());
    double mag = 0.0;
    for (float v : p->grad) mag += std::abs(v);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("set_trainable: scopes, errors, trainable listing") {
  MultiTaskNet net(3);

  std::vector<std::string> all = {"enc", "seg_head", "chd_head", "view_head"};
  net.set_trainable(all);
  CHECK(net.trainable_params().size() == net.param_names().size());

  net.set_trainable({"enc.3", "chd_head"});
  CHECK(net.trainable_params() ==
        std::vector<std::string>{"enc.3.w", "enc.3.b", "chd_head.w",
                                 "chd_head.b"});
  CHECK(!net.param("enc.2.w")->requires_grad);
  CHECK(!net.param("seg_head.0.w")->requires_grad);
  CHECK(!net.param("view_head.w")->requires_grad);

  net.set_trainable({});
  CHECK(net.trainable_params().empty());

  CHECK_THROWS_AS(net.set_trainable({"enc.4"}), ConfigError);
  CHECK_THROWS_AS(net.set_trainable({"bogus"}), ConfigError);
  CHECK_THROWS_AS(net.set_trainable({"enc.3", ""}), ConfigError);
}

TEST_CASE("set_trainable: frozen params receive no gradient") {
  MultiTaskNet net(3);
  net.set_trainable({"chd_head", "view_head", "enc.3"});

  Tensor img = rand_image(5, 16, 16);
  Graph g;
  auto out = net.forward(g, img, true);
  Graph::NodeId loss = g.add(
      g.softmax_cross_entropy(g.rows_from_chw(out.seg), std::vector<int>(256, 1)),
      g.add(g.softmax_cross_entropy(out.chd, {0}),
            g.softmax_cross_entropy(out.view, {2})));
  g.backward(loss);

  CHECK(net.param("enc.0.w")->grad.empty());
  CHECK(net.param("seg_head.2.w")->grad.empty());
  REQUIRE(net.param("enc.3.w")->grad.size() ==
          net.param("enc.3.w")->data.size());
  double mag = 0.0;
  for (float v : net.param("chd_head.w")->grad) mag += std::abs(v);
  CHECK(mag > 0.0);
}

TEST_CASE("reset_classification_head: only the chd head changes") {
  MultiTaskNet net(12), twin(12);
  net.reset_classification_head(77);

  CHECK(!same_data(net.param("chd_head.w"), twin.param("chd_head.w")));
  CHECK(same_data(net.param("chd_head.b"), twin.param("chd_head.b")));
  for (const auto& n : net.param_names())
    if (n.rfind("chd_head", 0) != 0)
      CHECK(same_data(net.param(n), twin.param(n)));

  // Reproducible for a given seed, different across seeds.
  twin.reset_classification_head(77);
  CHECK(same_data(net.param("chd_head.w"), twin.param("chd_head.w")));
  MultiTaskNet other(12);
  other.reset_classification_head(78);
  CHECK(!same_data(net.param("chd_head.w"), other.param("chd_head.w")));
}

TEST_CASE("reset_classification_head: matches the init distribution") {
  // Pool draws across several reset seeds to get > 1e3 samples.
  std::vector<float> draws;
  MultiTaskNet net(0);
  for (std::uint64_t s = 0; s < 4; ++s) {
    net.reset_classification_head(s);
    const auto& w = net.param("chd_head.w")->data;
    draws.insert(draws.end(), w.begin(), w.end());
  }
  REQUIRE(draws.size() >= 1000);
  double mean = 0.0;
  for (float v : draws) mean += v;
  mean /= static_cast<double>(draws.size());
  double var = 0.0;
  for (float v : draws) var += (v - mean) * (v - mean);
  var /= static_cast<double>(draws.size());
  double expect = std::sqrt(2.0 / 64.0);
  CHECK(std::abs(mean) < 0.1 * expect);
  CHECK(std::sqrt(var) > 0.8 * expect);
  CHECK(std::sqrt(var) < 1.2 * expect);
}

TEST_CASE("ema_update: edge cases exact, interior closed form") {
  MultiTaskNet t(1), s(2);

  // decay 1: teacher untouched.
  MultiTaskNet t1(1);
  ema_update(t1, s, 1.0f);
  for (const auto& n : t1.param_names())
    CHECK(same_data(t1.param(n), t.param(n)));

  // decay 0: teacher becomes the student, bit-exactly.
  MultiTaskNet t0(1);
  ema_update(t0, s, 0.0f);
  for (const auto& n : t0.param_names())
    CHECK(same_data(t0.param(n), s.param(n)));

  // decay 0.9 with theta_t = 1, theta_s = 0.
  MultiTaskNet ta(1), sb(1);
  for (const auto& n : ta.param_names()) {
    auto& a = ta.param(n)->data;
    std::fill(a.begin(), a.end(), 1.0f);
    auto& b = sb.param(n)->data;
    std::fill(b.begin(), b.end(), 0.0f);
  }
  ema_update(ta, sb, 0.9f);
  for (const auto& n : ta.param_names())
    for (float v : ta.param(n)->data)
      CHECK(v == doctest::Approx(0.9).epsilon(1e-7));

  CHECK_THROWS_AS(ema_update(t, s, -0.1f), ConfigError);
  CHECK_THROWS_AS(ema_update(t, s, 1.5f), ConfigError);
}

TEST_CASE("ema_update: contraction on random nets") {
  MultiTaskNet t(10), s(20);
  std::vector<std::vector<float>> before;
  for (const auto& n : t.param_names()) before.push_back(t.param(n)->data);

  float decay = 0.99f;
  ema_update(t, s, decay);
  std::size_t i = 0;
  for (const auto& n : t.param_names()) {
    const auto& tv = t.param(n)->data;
    const auto& sv = s.param(n)->data;
    for (std::size_t k = 0; k < tv.size(); ++k) {
      double lhs = std::abs(static_cast<double>(tv[k]) - sv[k]);
      double rhs = decay * std::abs(static_cast<double>(before[i][k]) - sv[k]);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
    }
    ++i;
  }
}

TEST_CASE("forward runs on a phantom image end to end") {
  auto s = phantom::generate_phantom(4, anatomask::View::LVOT, 2,
                                     phantom::PhantomParams{});
  MultiTaskNet net(6);
  Graph g;
  auto out = net.forward(g, s.image, false);
  g.val(out.seg).check_finite("seg");
  g.val(out.chd).check_finite("chd");
  g.val(out.view).check_finite("view");
}
