#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "zssl/config.hpp"

using namespace zssl;
using cfg::TrainConfig;

namespace {

bool same(const TrainConfig& a, const TrainConfig& b) {
  return cfg::config_to_json(a) == cfg::config_to_json(b);
}

}  // namespace

TEST_CASE("defaults validate and round-trip through JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());

  std::string text = cfg::config_to_json(c);
  TrainConfig back = cfg::config_from_json(text);
  CHECK(same(c, back));

  CHECK(back.seed == 7);
  CHECK(back.batch_size == 8);
  CHECK(back.epochs == 30);
  CHECK(back.phase2_epochs == 5);
  CHECK(back.tau == doctest::Approx(0.95f));
  CHECK(back.embedder == "stub");
  CHECK(back.sam_refine);
  CHECK_FALSE(back.phase2_dino_filter);
}

TEST_CASE("loss_weights carries the w_* fields") {
  TrainConfig c;
  c.w_sup_cls = 0.25f;
  c.w_pl_cls_focal_mixed = 0.0f;
  auto w = c.loss_weights();
  CHECK(w.sup_seg == doctest::Approx(1.0f));
  CHECK(w.sup_cls == doctest::Approx(0.25f));
  CHECK(w.unsup_seg_s == doctest::Approx(0.3f));
  CHECK(w.pl_cls_focal_mixed == doctest::Approx(0.0f));
}

TEST_CASE("unknown and malformed keys are rejected by name") {
  CHECK_THROWS_WITH_AS(cfg::config_from_json("{\"bogus\": 1}"),
                       doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg::config_from_json("{\"taus\": 0.9}"),
                       doctest::Contains("taus"), ConfigError);
  // nested values violate the flat contract
  CHECK_THROWS_AS(cfg::config_from_json("{\"tau\": {\"v\": 1}}"), ConfigError);
  CHECK_THROWS_AS(cfg::config_from_json("{\"tau\": null}"), ConfigError);
  // type mismatches
  CHECK_THROWS_WITH_AS(cfg::config_from_json("{\"epochs\": 1.5}"),
                       doctest::Contains("epochs"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg::config_from_json("{\"embedder\": 3}"),
                       doctest::Contains("embedder"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg::config_from_json("{\"sam_refine\": \"yes\"}"),
                       doctest::Contains("sam_refine"), ConfigError);
  // broken JSON is a data problem, not a config problem
  CHECK_THROWS_AS(cfg::config_from_json("{\"tau\": "), DataError);
  CHECK_THROWS_AS(cfg::config_from_json("[1,2]"), DataError);
}

TEST_CASE("partial JSON keeps defaults for unmentioned keys") {
  TrainConfig c = cfg::config_from_json("{\"epochs\": 3, \"tau\": 0.5}");
  CHECK(c.epochs == 3);
  CHECK(c.tau == doctest::Approx(0.5f));
  CHECK(c.batch_size == 8);
  CHECK(c.refiner == "stub");
}

TEST_CASE("apply_override parses every value type") {
  TrainConfig c;
  cfg::apply_override(c, "epochs=12");
  cfg::apply_override(c, "tau=0.25");
  cfg::apply_override(c, "sam_refine=false");
  cfg::apply_override(c, "dino_filter=0");
  cfg::apply_override(c, "phase2_dino_filter=1");
  cfg::apply_override(c, "embedder=cache:embeds.bin");
  cfg::apply_override(c, "seed=123456789012345");
  CHECK(c.epochs == 12);
  CHECK(c.tau == doctest::Approx(0.25f));
  CHECK_FALSE(c.sam_refine);
  CHECK_FALSE(c.dino_filter);
  CHECK(c.phase2_dino_filter);
  CHECK(c.embedder == "cache:embeds.bin");
  CHECK(c.seed == 123456789012345ull);

  CHECK_THROWS_WITH_AS(cfg::apply_override(c, "bogus=1"),
                       doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_AS(cfg::apply_override(c, "epochs"), ConfigError);
  CHECK_THROWS_AS(cfg::apply_override(c, "=3"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg::apply_override(c, "epochs=ten"),
                       doctest::Contains("epochs"), ConfigError);
  CHECK_THROWS_AS(cfg::apply_override(c, "tau=0.5x"), ConfigError);
  CHECK_THROWS_AS(cfg::apply_override(c, "sam_refine=maybe"), ConfigError);
  // value may itself contain '='
  cfg::apply_override(c, "run_dir=runs/a=b");
  CHECK(c.run_dir == "runs/a=b");
}

TEST_CASE("validate flags each violated invariant") {
  auto broken = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.batch_size = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.epochs = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(
      broken([](TrainConfig& c) { c.phase2_epochs = -1; }).validate(),
      ConfigError);
  CHECK_THROWS_AS(
      broken([](TrainConfig& c) { c.lr_backbone = 0.0f; }).validate(),
      ConfigError);
  CHECK_THROWS_AS(
      broken([](TrainConfig& c) { c.lr_heads = -1e-3f; }).validate(),
      ConfigError);
  // the phase-2 discriminative-LR contract
  CHECK_THROWS_AS(broken([](TrainConfig& c) {
                    c.phase2_lr_last_layer = 1e-3f;
                    c.phase2_lr_cls_head = 1e-3f;
                  }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) {
                    c.phase2_lr_last_layer = 2e-3f;
                    c.phase2_lr_cls_head = 1e-3f;
                  }).validate(),
                  ConfigError);
  CHECK_NOTHROW(broken([](TrainConfig& c) {
                  c.phase2_lr_last_layer = 1e-4f;
                  c.phase2_lr_cls_head = 1e-3f;
                }).validate());
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.tau = 1.5f; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.tau = -0.1f; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.ema_decay = 1.01f; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.fp_rate = 1.0f; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.poly_power = 0.0f; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(
      broken([](TrainConfig& c) { c.w_unsup_focal = -0.1f; }).validate(),
      ConfigError);
  CHECK_THROWS_AS(
      broken([](TrainConfig& c) { c.embedder = "dino"; }).validate(),
      ConfigError);
  CHECK_NOTHROW(
      broken([](TrainConfig& c) { c.embedder = "cache:x.bin"; }).validate());
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.refiner = "sam"; }).validate(),
                  ConfigError);
  CHECK_NOTHROW(
      broken([](TrainConfig& c) { c.refiner = "oracle"; }).validate());
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.embed_dim = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(broken([](TrainConfig& c) { c.threads = 0; }).validate(),
                  ConfigError);
}

TEST_CASE("file round trip and load errors") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "zssl_cfg_test";
  fs::create_directories(dir);
  fs::path p = dir / "config.json";

  TrainConfig c;
  c.epochs = 4;
  c.run_dir = "runs/exp1";
  cfg::save_config(c, p.string());
  TrainConfig back = cfg::load_config(p.string());
  CHECK(same(c, back));

  CHECK_THROWS_AS(cfg::load_config((dir / "missing.json").string()), DataError);

  std::ofstream(p) << "{ not json";
  CHECK_THROWS_AS(cfg::load_config(p.string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("SSL_RUN_DIR re-roots relative run directories") {
  TrainConfig c;
  c.run_dir = "runs/exp";

  unsetenv("SSL_RUN_DIR");
  CHECK(cfg::resolved_run_dir(c) == "runs/exp");

  setenv("SSL_RUN_DIR", "/tmp/zssl_scratch", 1);
  CHECK(cfg::resolved_run_dir(c) == "/tmp/zssl_scratch/runs/exp");

  c.run_dir = "/abs/run";
  CHECK(cfg::resolved_run_dir(c) == "/abs/run");

  setenv("SSL_RUN_DIR", "", 1);
  c.run_dir = "runs/exp";
  CHECK(cfg::resolved_run_dir(c) == "runs/exp");
  unsetenv("SSL_RUN_DIR");
}
