#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zssl/pseudolabel.hpp"

namespace zssl::cfg {

// Every hyperparameter of the run, serialized as flat JSON (one level, no
// nesting) so sweeps are plain --set key=value overrides.
struct TrainConfig {
  std::uint64_t seed = 7;
  std::string data_root = "data";
  std::string run_dir = "runs/run";

  int batch_size = 8;
  float weight_decay = 0.01f;
  float lr_backbone = 1e-4f;
  float lr_heads = 1e-3f;
  int epochs = 30;
  float poly_power = 0.9f;
  float ema_decay = 0.99f;
  float tau = 0.95f;
  float theta_cos = 0.7f;
  float theta_iou = 0.5f;
  float fp_rate = 0.5f;
  float focal_gamma = 2.0f;

  float w_sup_seg = 1.0f;
  float w_sup_cls = 0.8f;
  float w_unsup_s = 0.3f;
  float w_unsup_focal = 0.4f;
  float w_unsup_mixed = 0.2f;
  float w_pl_cls = 1.0f;
  float w_pl_cls_mixed = 0.3f;
  float w_pl_cls_focal_mixed = 0.4f;

  float phase2_lr_last_layer = 1e-5f;
  float phase2_lr_cls_head = 1e-3f;
  int phase2_epochs = 5;
  bool phase2_dino_filter = false;

  bool sam_refine = true;
  bool dino_filter = true;
  bool mask_guidance = true;

  std::string embedder = "stub";  // "stub" | "cache:<path>"
  std::string refiner = "stub";   // "stub" | "oracle"
  int embed_dim = 64;
  int min_box_area = 4;
  int probe_epochs = 200;
  float probe_lr = 0.5f;
  int threads = 1;

  pl::LossWeights loss_weights() const;
  void validate() const;  // ConfigError on any violated invariant
};

// Flat-JSON round trip; unknown keys are rejected with the offending name.
TrainConfig config_from_json(const std::string& json_text);
TrainConfig load_config(const std::string& path);
std::string config_to_json(const TrainConfig& c);
void save_config(const TrainConfig& c, const std::string& path);

// "key=value" override, applied after file parsing.
void apply_override(TrainConfig& c, const std::string& kv);

// Run directory after the SSL_RUN_DIR environment override: a set env var
// re-roots relative run_dir values under it; absolute paths win.
std::string resolved_run_dir(const TrainConfig& c);

}  // namespace zssl::cfg
