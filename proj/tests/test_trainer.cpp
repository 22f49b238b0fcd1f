#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "zssl/checkpoint.hpp"
#include "zssl/trainer.hpp"

using namespace zssl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const char* name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

cfg::TrainConfig mini_config() {
  cfg::TrainConfig c;
  c.seed = 11;
  c.batch_size = 4;
  c.epochs = 2;
  c.phase2_epochs = 1;
  c.tau = 0.6f;
  c.ema_decay = 0.5f;
  c.probe_epochs = 60;
  c.probe_lr = 1.0f;
  return c;
}

train::DataBundle mini_data(int hw = 16, std::uint64_t seed = 5) {
  data::SplitCounts sc;
  sc.labeled_train = 12;
  sc.unlabeled_train = 12;
  sc.val = 6;
  sc.test = 6;
  auto m = data::generate_dataset(sc, seed, "mem");
  phantom::PhantomParams p;
  p.h = p.w = hw;
  return train::synth_data(m, p);
}

bool same_param(const model::MultiTaskNet& a, const model::MultiTaskNet& b,
                const std::string& name) {
  const auto& x = a.param(name)->data;
  const auto& y = b.param(name)->data;
  return x.size() == y.size() &&
         std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("poly_lr closed forms and bounds") {
  CHECK(train::poly_lr(1e-3f, 0, 100, 0.9f) == doctest::Approx(1e-3));
  CHECK(train::poly_lr(1e-3f, 100, 100, 0.9f) == doctest::Approx(0.0));
  CHECK(train::poly_lr(1e-3f, 50, 100, 1.0f) == doctest::Approx(5e-4));
  CHECK(train::poly_lr(2.0f, 25, 100, 2.0f) == doctest::Approx(2.0 * 0.5625));
  CHECK_THROWS_AS(train::poly_lr(1e-3f, -1, 100, 0.9f), ConfigError);
  CHECK_THROWS_AS(train::poly_lr(1e-3f, 101, 100, 0.9f), ConfigError);
  CHECK_THROWS_AS(train::poly_lr(1e-3f, 0, 0, 0.9f), ConfigError);
}

TEST_CASE("adamw closed forms") {
  SUBCASE("zero grad, zero decay leaves the parameter alone") {
    train::AdamW opt;
    Tensor t = Tensor::full({3}, 1.5f, true);
    opt.step("p", t, 0.1f, 0.0f);
    opt.step("p", t, 0.1f, 0.0f);
    for (float v : t.data) CHECK(v == 1.5f);
  }
  SUBCASE("zero grad, wd=0.01, lr=0.1 decays 1 to 0.999") {
    train::AdamW opt;
    Tensor t = Tensor::full({1}, 1.0f, true);
    opt.step("p", t, 0.1f, 0.01f);
    CHECK(t.data[0] == doctest::Approx(0.999).epsilon(1e-7));
  }
  SUBCASE("bias correction makes the first unit-grad step -lr") {
    train::AdamW opt;
    Tensor t = Tensor::zeros({1}, true);
    t.grad[0] = 1.0f;
    opt.step("p", t, 0.001f, 0.0f);
    CHECK(std::abs(t.data[0] + 0.001) < 1e-6);
  }
  SUBCASE("size mismatches are rejected") {
    train::AdamW opt;
    Tensor t = Tensor::zeros({4}, true);
    opt.step("p", t, 0.1f, 0.0f);
    Tensor other = Tensor::zeros({3}, true);
    CHECK_THROWS_AS(opt.step("p", other, 0.1f, 0.0f), DimError);
    Tensor nograd = Tensor::zeros({4}, false);
    CHECK_THROWS_AS(opt.step("q", nograd, 0.1f, 0.0f), DimError);
  }
  SUBCASE("drop clears state so the step counter restarts") {
    train::AdamW opt;
    Tensor a = Tensor::zeros({1}, true);
    a.grad[0] = 1.0f;
    opt.step("p", a, 0.001f, 0.0f);
    opt.step("p", a, 0.001f, 0.0f);
    CHECK(opt.has_state("p"));
    opt.drop("p");
    CHECK_FALSE(opt.has_state("p"));

    // a fresh t=1 step again moves exactly -lr from the current value
    float before = a.data[0];
    opt.step("p", a, 0.001f, 0.0f);
    CHECK(std::abs(a.data[0] - (before - 0.001f)) < 1e-6);
  }
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v(20);
  for (int i = 0; i < 20; ++i) v[i] = i;
  auto a = v, b = v, c = v;
  auto r1 = Rng::stream(7, rng_tag::kShuffle, 1);
  auto r2 = Rng::stream(7, rng_tag::kShuffle, 1);
  auto r3 = Rng::stream(8, rng_tag::kShuffle, 1);
  train::shuffle(a, r1);
  train::shuffle(b, r2);
  train::shuffle(c, r3);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == v);
  CHECK(a != v);  // 20! makes identity astronomically unlikely
}

TEST_CASE("synth_data parallels the manifest and load_data round-trips") {
  auto d = mini_data();
  REQUIRE(d.samples.size() == d.manifest.entries.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(d.samples[i].view == d.manifest.entries[i].view);
    CHECK(d.samples[i].chd == d.manifest.entries[i].chd);
    CHECK(d.samples[i].labeled == d.manifest.entries[i].labeled);
  }

  fs::path root = fresh_dir("zssl_trainer_data");
  auto m = d.manifest;
  m.root = root.string();
  phantom::PhantomParams p;
  p.h = p.w = 16;
  data::write_dataset(m, p);
  auto loaded = train::load_data(root.string());
  REQUIRE(loaded.samples.size() == d.samples.size());
  CHECK(loaded.manifest.entries.size() == m.entries.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    // images round-trip through 16-bit PGM, so only quantization error remains
    REQUIRE(loaded.samples[i].image.data.size() == d.samples[i].image.data.size());
    double worst = 0;
    for (std::size_t k = 0; k < d.samples[i].image.data.size(); ++k)
      worst = std::max(worst, std::abs(static_cast<double>(
                                  loaded.samples[i].image.data[k] -
                                  d.samples[i].image.data[k])));
    CHECK(worst < 1e-4);
    CHECK(loaded.samples[i].mask == d.samples[i].mask);
  }
  fs::remove_all(root);
}

TEST_CASE("stage 1 is deterministic, censused, and reloadable") {
  auto d = mini_data();
  auto c = mini_config();
  anchor::StubEmbedder emb(c.seed, c.embed_dim);

  fs::path run = fresh_dir("zssl_stage1_run");
  auto s1 = train::run_stage1(c, d, emb, run.string());
  auto s2 = train::run_stage1(c, d, emb, "");

  // census: prototypes exactly for the CHD classes present in the labeled split
  std::array<bool, anchor::kChdClasses> present{};
  for (int i : d.manifest.train_labeled())
    present[static_cast<std::size_t>(d.manifest.entries[static_cast<std::size_t>(i)].chd)] = true;
  for (int k = 0; k < anchor::kChdClasses; ++k)
    CHECK(s1.bank.present(k) == present[static_cast<std::size_t>(k)]);

  for (int k = 0; k < anchor::kChdClasses; ++k)
    CHECK(s1.bank.proto[static_cast<std::size_t>(k)] == s2.bank.proto[static_cast<std::size_t>(k)]);
  CHECK(s1.probe.w == s2.probe.w);
  CHECK(s1.probe.b == s2.probe.b);
  CHECK(s1.probe_train_acc == s2.probe_train_acc);
  CHECK(s1.probe_train_acc > 0.15);  // linear probe beats 1-of-7 chance

  auto back = train::load_stage1(run.string());
  CHECK(back.probe.w == s1.probe.w);
  CHECK(back.probe.b == s1.probe.b);
  for (int k = 0; k < anchor::kChdClasses; ++k)
    CHECK(back.bank.proto[static_cast<std::size_t>(k)] == s1.bank.proto[static_cast<std::size_t>(k)]);

  fs::path missing = fresh_dir("zssl_stage1_missing");
  CHECK_THROWS_AS(train::load_stage1(missing.string()), DataError);
  CHECK_THROWS_WITH_AS(train::load_stage1(missing.string()),
                       doctest::Contains("prototypes.bin"), DataError);
  fs::remove_all(run);
  fs::remove_all(missing);

  // a bundle whose labeled training split was stripped out
  auto empty = mini_data();
  train::DataBundle no_labeled;
  no_labeled.manifest.root = empty.manifest.root;
  no_labeled.manifest.seed = empty.manifest.seed;
  for (std::size_t i = 0; i < empty.manifest.entries.size(); ++i) {
    const auto& e = empty.manifest.entries[i];
    if (e.split == "train" && e.labeled) continue;
    no_labeled.manifest.entries.push_back(e);
    no_labeled.samples.push_back(empty.samples[i]);
  }
  CHECK_THROWS_AS(train::run_stage1(c, no_labeled, emb, ""), ConfigError);
}

TEST_CASE("supervised-only phase 1 improves val dice over the initial net") {
  data::SplitCounts sc;
  sc.labeled_train = 32;
  sc.unlabeled_train = 0;
  sc.val = 12;
  sc.test = 4;
  phantom::PhantomParams p;
  p.h = p.w = 32;
  auto d = train::synth_data(data::generate_dataset(sc, 9, "mem"), p);

  auto c = mini_config();
  c.batch_size = 8;
  c.epochs = 28;
  c.lr_backbone = 1e-3f;  // random encoder features starve the seg head at the default
  c.ema_decay = 0.0f;     // teacher == student, so eval sees the trained net
  c.sam_refine = false;
  c.dino_filter = false;

  model::MultiTaskNet init(c.seed);
  auto rep0 = train::evaluate(init, d, "val");

  auto res = train::run_phase1(c, d, nullptr, nullptr);
  REQUIRE(res.rows.size() == 28);
  const auto& last = res.rows.back();
  MESSAGE("init dice ", rep0.dice_mean, " -> final ", last.dice_mean);
  CHECK(last.dice_mean > rep0.dice_mean);
  CHECK(last.loss_total < res.rows.front().loss_total);

  // supervised-only: unsup and pl columns must be exactly zero
  for (const auto& r : res.rows) {
    CHECK(r.loss_unsup == 0.0);
    CHECK(r.loss_pl_cls == 0.0);
    CHECK(r.loss_total == doctest::Approx(r.loss_sup_seg + r.loss_sup_cls).epsilon(1e-12));
  }

  // step log audits the poly schedule exactly
  const std::int64_t spe = 32 / 8;
  REQUIRE(res.step_log.size() == static_cast<std::size_t>(spe * 28));
  for (const auto& sl : res.step_log) {
    CHECK(sl.lr_backbone == train::poly_lr(c.lr_backbone, sl.step, spe * 28, c.poly_power));
    CHECK(sl.lr_heads == train::poly_lr(c.lr_heads, sl.step, spe * 28, c.poly_power));
  }
}

TEST_CASE("ema edge decays: 0 tracks the student, 1 never moves the teacher") {
  auto d = mini_data();
  auto c = mini_config();
  c.epochs = 1;
  c.sam_refine = false;
  c.dino_filter = false;

  c.ema_decay = 0.0f;
  auto track = train::run_phase1(c, d, nullptr, nullptr);
  for (const auto& n : track.student->param_names())
    CHECK(same_param(*track.student, *track.teacher, n));

  c.ema_decay = 1.0f;
  auto frozen = train::run_phase1(c, d, nullptr, nullptr);
  model::MultiTaskNet init(c.seed);
  bool student_moved = false;
  for (const auto& n : frozen.student->param_names()) {
    CHECK(same_param(*frozen.teacher, init, n));
    if (!same_param(*frozen.student, init, n)) student_moved = true;
  }
  CHECK(student_moved);
}

TEST_CASE("non-finite loss aborts naming phase, step and batch ids") {
  auto d = mini_data();
  auto c = mini_config();
  c.epochs = 1;
  c.sam_refine = false;
  c.dino_filter = false;
  for (auto& s : d.samples)
    s.image.data[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(train::run_phase1(c, d, nullptr, nullptr),
                       doctest::Contains("phase 1 epoch 1 step 0"),
                       NumericError);
  try {
    train::run_phase1(c, d, nullptr, nullptr);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("batch [") != std::string::npos);
  }
}

TEST_CASE("phase 1 rejects filter without stage-1 outputs; oracle refiner rejected") {
  auto d = mini_data();
  auto c = mini_config();
  c.dino_filter = true;
  CHECK_THROWS_AS(train::run_phase1(c, d, nullptr, nullptr), ConfigError);

  c.refiner = "oracle";
  CHECK_THROWS_WITH_AS(train::make_refiner(c), doctest::Contains("oracle"),
                       ConfigError);
  c.refiner = "stub";
  CHECK(train::make_refiner(c) != nullptr);
  c.embedder = "stub";
  CHECK(train::make_embedder(c)->dim() == c.embed_dim);
}

TEST_CASE("full mini run is deterministic and mask-legal") {
  auto d = mini_data();
  auto c = mini_config();
  c.fp_rate = 0.5f;

  anchor::StubEmbedder emb(c.seed, c.embed_dim);
  auto s1 = train::run_stage1(c, d, emb, "");

  fs::path runA = fresh_dir("zssl_run_a"), runB = fresh_dir("zssl_run_b");
  auto a = train::run_phase1(c, d, &s1, &emb, runA.string());
  auto b = train::run_phase1(c, d, &s1, &emb, runB.string());

  // criterion-3 shape: interventions on, zero illegal pixels anywhere
  CHECK(a.illegal_pseudo == 0);
  CHECK(a.illegal_eval == 0);

  for (const auto& n : a.student->param_names()) {
    CHECK(same_param(*a.student, *b.student, n));
    CHECK(same_param(*a.teacher, *b.teacher, n));
  }
  REQUIRE(a.rows.size() == b.rows.size());

  for (const char* f : {train::kCkptLast, train::kCkptBest,
                        train::kRefineAudit, train::kFilterAudit}) {
    CAPTURE(f);
    CHECK(slurp(runA / f) == slurp(runB / f));
  }

  // audit CSVs carry real rows beyond their headers
  const std::string refine_csv = slurp(runA / train::kRefineAudit);
  const std::string filter_csv = slurp(runA / train::kFilterAudit);
  CHECK(std::count(refine_csv.begin(), refine_csv.end(), '\n') > 1);
  CHECK(std::count(filter_csv.begin(), filter_csv.end(), '\n') > 1);

  fs::path csvA = runA / "m.csv", csvB = runB / "m.csv";
  train::write_metrics_csv(csvA.string(), a.rows);
  train::write_metrics_csv(csvB.string(), b.rows);
  const std::string metrics_a = slurp(csvA);
  CHECK(metrics_a == slurp(csvB));

  auto head = metrics_a.substr(0, metrics_a.find('\n'));
  CHECK(head ==
        "epoch,phase,loss_total,loss_sup_seg,loss_sup_cls,loss_unsup,"
        "loss_pl_cls,dice_mean,nsd_mean,macro_f1,overall,lr_backbone,lr_heads");

  fs::remove_all(runA);
  fs::remove_all(runB);
}

TEST_CASE("phase 2 freezes everything but enc.3 and the reseeded chd head") {
  auto d = mini_data();
  auto c = mini_config();
  c.sam_refine = false;
  c.dino_filter = false;
  c.epochs = 2;
  c.phase2_epochs = 2;
  c.phase2_lr_cls_head = 5e-3f;

  auto p1 = train::run_phase1(c, d, nullptr, nullptr);
  fs::path run = fresh_dir("zssl_phase2_run");
  auto p2 = train::run_phase2(c, d, *p1.teacher, nullptr, nullptr, run.string());

  for (const auto& n : p2.net->param_names()) {
    bool frozen = !(n.rfind("enc.3", 0) == 0 || n.rfind("chd_head", 0) == 0);
    if (frozen) {
      CAPTURE(n);
      CHECK(same_param(*p2.net, *p1.teacher, n));
    }
  }
  CHECK_FALSE(same_param(*p2.net, *p1.teacher, "chd_head.w"));

  // the recorded init matches an independently seeded re-init
  auto init_ts = ckpt::read_checkpoint((run / train::kCkptPhase2Init).string());
  model::MultiTaskNet ref(999);
  ref.reset_classification_head(c.seed);
  bool found = false;
  for (const auto& nt : init_ts)
    if (nt.name == "model.chd_head.w") {
      found = true;
      CHECK(nt.tensor.data == ref.param("chd_head.w")->data);
      CHECK(nt.tensor.data != p1.teacher->param("chd_head.w")->data);
    }
  CHECK(found);

  // grouped LRs audited stepwise: the last-layer rate stays below the head's
  REQUIRE(!p2.step_log.empty());
  const std::int64_t total = static_cast<std::int64_t>(p2.step_log.size());
  for (const auto& sl : p2.step_log) {
    CHECK(sl.lr_backbone == train::poly_lr(c.phase2_lr_last_layer, sl.step, total, c.poly_power));
    CHECK(sl.lr_heads == train::poly_lr(c.phase2_lr_cls_head, sl.step, total, c.poly_power));
    CHECK(sl.lr_backbone < sl.lr_heads);
  }
  for (const auto& r : p2.rows) {
    CHECK(r.phase == 2);
    CHECK(r.loss_sup_seg == 0.0);
    CHECK(r.loss_unsup == 0.0);
  }
  CHECK(fs::exists(run / train::kCkptPhase2));
  fs::remove_all(run);
}

TEST_CASE("metrics csv appends without duplicating the header") {
  fs::path dir = fresh_dir("zssl_csv");
  fs::path p = dir / "metrics.csv";
  train::EpochRow r;
  r.epoch = 1;
  r.loss_total = 1.25;
  train::write_metrics_csv(p.string(), {r});
  r.epoch = 2;
  r.phase = 2;
  train::write_metrics_csv(p.string(), {r}, true);
  auto text = slurp(p);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("epoch,phase") == 0);
  CHECK(text.find("epoch,phase", 10) == std::string::npos);
  fs::remove_all(dir);
}
