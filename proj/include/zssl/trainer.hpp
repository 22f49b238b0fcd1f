#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "zssl/boundref.hpp"
#include "zssl/config.hpp"
#include "zssl/dataset.hpp"
#include "zssl/metrics.hpp"
#include "zssl/model.hpp"
#include "zssl/semanchor.hpp"

namespace zssl::train {

// Run-directory artifact names.
inline constexpr const char* kConfigJson = "config.json";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kPrototypesBin = "prototypes.bin";
inline constexpr const char* kProbeCkpt = "probe.ckpt";
inline constexpr const char* kStage1Json = "stage1.json";
inline constexpr const char* kCkptBest = "ckpt_best.bin";
inline constexpr const char* kCkptLast = "ckpt_last.bin";
inline constexpr const char* kCkptPhase2Init = "ckpt_phase2_init.bin";
inline constexpr const char* kCkptPhase2 = "ckpt_phase2.bin";
inline constexpr const char* kRefineAudit = "refine_audit.csv";
inline constexpr const char* kFilterAudit = "filter_audit.csv";

// base_lr * (1 - step/total)^power; step outside [0, total] throws.
float poly_lr(float base_lr, std::int64_t step, std::int64_t total_steps,
              float power);

// AdamW with decoupled weight decay: theta <- theta - lr*wd*theta first,
// then the bias-corrected moment update from param.grad. Moment buffers are
// created lazily per parameter name and dropped explicitly on freeze.
class AdamW {
 public:
  explicit AdamW(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

  void step(const std::string& name, Tensor& param, float lr,
            float weight_decay);
  void drop(const std::string& name);
  bool has_state(const std::string& name) const;

 private:
  struct Moments {
    std::vector<float> m, v;
    std::int64_t t = 0;
  };
  float beta1_, beta2_, eps_;
  std::unordered_map<std::string, Moments> state_;
};

// Fisher-Yates; std::shuffle is implementation-defined and would break
// cross-platform run reproducibility.
void shuffle(std::vector<int>& v, Rng& rng);

// Manifest plus the sample for each entry, index-parallel.
struct DataBundle {
  data::DatasetManifest manifest;
  std::vector<phantom::Sample> samples;
};

DataBundle load_data(const std::string& root);
DataBundle synth_data(const data::DatasetManifest& m,
                      const phantom::PhantomParams& p = {});

// Eval-mode forward per sample; seg logits are hard-masked by the predicted
// view before the argmax, so predictions cannot contain view-disallowed
// classes. illegal (when given) accumulates any offending pixels anyway.
metrics::EvalReport evaluate(const model::MultiTaskNet& net,
                             const DataBundle& data, const std::string& split,
                             std::int64_t* illegal = nullptr);

// One metrics.csv line. Loss columns are the weighted contributions averaged
// over the epoch's steps, so loss_total = sup_seg + sup_cls + unsup + pl_cls.
// The lr columns echo what the optimizer applied at the epoch's last step.
struct EpochRow {
  int epoch = 0;
  int phase = 1;
  double loss_total = 0, loss_sup_seg = 0, loss_sup_cls = 0, loss_unsup = 0,
         loss_pl_cls = 0;
  double dice_mean = 0, nsd_mean = 0, macro_f1 = 0, overall = 0;
  double lr_backbone = 0, lr_heads = 0;
};

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochRow>& rows, bool append = false);

// Per-step record of the learning rates actually applied.
struct StepAudit {
  std::int64_t step = 0;
  float lr_backbone = 0, lr_heads = 0;
};

using EpochCallback = std::function<void(const EpochRow&)>;

// Stage 1: frozen-embedder probe + class prototypes from the labeled split.
struct Stage1Out {
  anchor::PrototypeBank bank;
  anchor::ProbeHead probe;
  double probe_train_acc = 0.0;
};

Stage1Out run_stage1(const cfg::TrainConfig& c, const DataBundle& data,
                     const anchor::Embedder& emb,
                     const std::string& run_dir = "");
Stage1Out load_stage1(const std::string& run_dir);

// Stage 2: joint student/EMA-teacher training with the unlabeled pipeline
// pseudo -> mask -> refine -> gate -> filter. Teacher weights move only
// through ema_update; validation runs the teacher every epoch.
struct Phase1Result {
  std::unique_ptr<model::MultiTaskNet> student, teacher;
  std::vector<EpochRow> rows;
  std::vector<StepAudit> step_log;
  std::int64_t illegal_pseudo = 0;  // applied pseudo-label pixels outside the view's set
  std::int64_t illegal_eval = 0;    // same, over eval predictions
  int best_epoch = 0;
  double best_overall = -1.0;
};

Phase1Result run_phase1(const cfg::TrainConfig& c, const DataBundle& data,
                        const Stage1Out* stage1, const anchor::Embedder* emb,
                        const std::string& run_dir = "",
                        const EpochCallback& on_epoch = {});

// Stage 3: loads the phase-1 teacher as the model, freezes everything but
// the last encoder block and the CHD head, reseeds the head, and fine-tunes
// classification only with grouped LRs. Refinement and mask guidance are
// forcibly off; the prototype filter follows phase2_dino_filter.
struct Phase2Result {
  std::unique_ptr<model::MultiTaskNet> net;
  std::vector<EpochRow> rows;
  std::vector<StepAudit> step_log;
  std::int64_t illegal_eval = 0;
};

Phase2Result run_phase2(const cfg::TrainConfig& c, const DataBundle& data,
                        const model::MultiTaskNet& phase1_teacher,
                        const Stage1Out* stage1, const anchor::Embedder* emb,
                        const std::string& run_dir = "",
                        const EpochCallback& on_epoch = {});

std::unique_ptr<anchor::Embedder> make_embedder(const cfg::TrainConfig& c);
// Training-safe factory: the oracle refiner is rejected here.
std::unique_ptr<boundref::Refiner> make_refiner(const cfg::TrainConfig& c);

// Full train-subcommand orchestration: stages any subset of {1,2,3}; later
// stages load earlier artifacts from the run directory when their stage did
// not run in-process, failing with the missing artifact's path.
void run_training(const cfg::TrainConfig& c, const std::vector<int>& stages,
                  bool verbose = false);

}  // namespace zssl::train
