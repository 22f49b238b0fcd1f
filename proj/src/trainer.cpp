#include "zssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "zssl/anatomask.hpp"
#include "zssl/augment.hpp"
#include "zssl/checkpoint.hpp"
#include "zssl/pseudolabel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace zssl::train {

namespace fs = std::filesystem;

float poly_lr(float base_lr, std::int64_t step, std::int64_t total_steps,
              float power) {
  if (total_steps <= 0) throw ConfigError("poly_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw ConfigError("poly_lr: step outside [0, total_steps]");
  double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(base_lr * std::pow(frac, power));
}

AdamW::AdamW(float beta1, float beta2, float eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const std::string& name, Tensor& param, float lr,
                 float weight_decay) {
  const std::size_t n = param.data.size();
  if (param.grad.size() != n)
    throw DimError("AdamW: " + name + ": grad/param size mismatch");
  Moments& mo = state_[name];
  if (mo.m.empty()) {
    mo.m.assign(n, 0.0f);
    mo.v.assign(n, 0.0f);
  } else if (mo.m.size() != n) {
    throw DimError("AdamW: " + name + ": state shaped for another parameter");
  }
  mo.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(mo.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(mo.t));
  for (std::size_t i = 0; i < n; ++i) {
    // decoupled decay, independent of the gradient path
    param.data[i] -= lr * weight_decay * param.data[i];
    const float g = param.grad[i];
    mo.m[i] = beta1_ * mo.m[i] + (1.0f - beta1_) * g;
    mo.v[i] = beta2_ * mo.v[i] + (1.0f - beta2_) * g * g;
    const double mhat = mo.m[i] / bc1;
    const double vhat = mo.v[i] / bc2;
    param.data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
  }
}

void AdamW::drop(const std::string& name) { state_.erase(name); }

bool AdamW::has_state(const std::string& name) const {
  return state_.count(name) != 0;
}

void shuffle(std::vector<int>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
    std::swap(v[i], v[rng.uniform_int(i + 1)]);
}

DataBundle load_data(const std::string& root) {
  DataBundle d;
  d.manifest = data::read_dataset(root);
  d.samples.reserve(d.manifest.entries.size());
  for (const auto& e : d.manifest.entries)
    d.samples.push_back(data::load_sample(root, e));
  return d;
}

DataBundle synth_data(const data::DatasetManifest& m,
                      const phantom::PhantomParams& p) {
  DataBundle d;
  d.manifest = m;
  d.samples.reserve(m.entries.size());
  for (int i = 0; i < static_cast<int>(m.entries.size()); ++i)
    d.samples.push_back(data::synth_sample(m, i, p));
  return d;
}

metrics::EvalReport evaluate(const model::MultiTaskNet& net,
                             const DataBundle& data, const std::string& split,
                             std::int64_t* illegal) {
  auto idxs = data.manifest.split_indices(split);
  if (idxs.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
  const auto table = anatomask::MaskTable::defaults();
  metrics::Evaluator ev;
  for (int i : idxs) {
    const phantom::Sample& s = data.samples[static_cast<std::size_t>(i)];
    pl::Bundle b = pl::generate_pseudo(net, s.image, 0.0f, /*mask=*/true);
    ev.add_seg(b.hard.data(), s.mask.data(), b.h, b.w);
    ev.add_cls(b.chd_argmax, s.chd);
    if (illegal)
      for (std::uint8_t px : b.hard)
        if (!table.is_allowed(b.mask_view, px)) ++*illegal;
  }
  return ev.report();
}

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochRow>& rows, bool append) {
  const bool header = !append || !fs::exists(path);
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  if (header)
    f << "epoch,phase,loss_total,loss_sup_seg,loss_sup_cls,loss_unsup,"
         "loss_pl_cls,dice_mean,nsd_mean,macro_f1,overall,lr_backbone,"
         "lr_heads\n";
  char buf[512];
  for (const EpochRow& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.8f,"
                  "%.8f\n",
                  r.epoch, r.phase, r.loss_total, r.loss_sup_seg,
                  r.loss_sup_cls, r.loss_unsup, r.loss_pl_cls, r.dice_mean,
                  r.nsd_mean, r.macro_f1, r.overall, r.lr_backbone,
                  r.lr_heads);
    f << buf;
  }
  if (!f) throw DataError(path + ": write failed");
}

namespace {

Graph::NodeId sum_of(Graph& g, const std::vector<Graph::NodeId>& v) {
  if (v.empty()) return g.zero();
  Graph::NodeId s = v[0];
  for (std::size_t i = 1; i < v.size(); ++i) s = g.add(s, v[i]);
  return s;
}

Graph::NodeId mean_of(Graph& g, const std::vector<Graph::NodeId>& v) {
  if (v.empty()) return g.zero();
  return g.scale(sum_of(g, v), 1.0f / static_cast<float>(v.size()));
}

void copy_params(model::MultiTaskNet& dst, const model::MultiTaskNet& src) {
  for (const auto& n : src.param_names()) dst.param(n)->data = src.param(n)->data;
}

void save_model_ckpt(const std::string& path, const model::MultiTaskNet& net) {
  std::vector<ckpt::NamedTensor> ts;
  for (const auto& n : net.param_names())
    ts.push_back({"model." + n, *net.param(n)});
  ckpt::write_checkpoint(path, ts);
}

bool is_backbone(const std::string& name) {
  return name.rfind("enc.", 0) == 0;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) {
    if (!out.empty()) out += " ";
    out += id;
  }
  return out;
}

void require_dir(const std::string& run_dir) {
  if (!run_dir.empty()) fs::create_directories(run_dir);
}

constexpr std::uint64_t kPhase1 = 1, kPhase2 = 2;

struct EpochAccum {
  double sup_seg = 0, sup_cls = 0, unsup = 0, pl_cls = 0;
  int steps = 0;

  EpochRow finish(int epoch, int phase, const metrics::EvalReport& rep,
                  float lr_bb, float lr_hd) const {
    EpochRow r;
    r.epoch = epoch;
    r.phase = phase;
    const double n = steps > 0 ? steps : 1;
    r.loss_sup_seg = sup_seg / n;
    r.loss_sup_cls = sup_cls / n;
    r.loss_unsup = unsup / n;
    r.loss_pl_cls = pl_cls / n;
    r.loss_total = r.loss_sup_seg + r.loss_sup_cls + r.loss_unsup + r.loss_pl_cls;
    r.dice_mean = rep.dice_mean;
    r.nsd_mean = rep.nsd_mean;
    r.macro_f1 = rep.macro_f1;
    r.overall = rep.overall;
    r.lr_backbone = lr_bb;
    r.lr_heads = lr_hd;
    return r;
  }
};

double weighted(const pl::LossWeights& w,
                const std::vector<std::pair<std::string, Graph::NodeId>>& comps,
                Graph& g, const char* key) {
  double s = 0;
  for (const auto& [k, id] : comps)
    if (k == key) s += w.lookup(k) * g.val(id).item();
  return s;
}

}  // namespace

Stage1Out run_stage1(const cfg::TrainConfig& c, const DataBundle& data,
                     const anchor::Embedder& emb, const std::string& run_dir) {
  const auto L = data.manifest.train_labeled();
  if (L.empty()) throw ConfigError("stage 1: labeled training split is empty");

  std::vector<std::vector<float>> embs;
  std::vector<int> labels;
  embs.reserve(L.size());
  for (int i : L) {
    const auto& e = data.manifest.entries[static_cast<std::size_t>(i)];
    embs.push_back(emb.embed(data.samples[static_cast<std::size_t>(i)].image, e.id));
    labels.push_back(e.chd);
  }

  Stage1Out out;
  out.bank = anchor::build_prototypes(embs, labels);
  out.probe = anchor::train_probe(embs, labels, c.probe_epochs,
                                  static_cast<double>(c.probe_lr), c.seed);
  int hit = 0;
  for (std::size_t i = 0; i < embs.size(); ++i)
    if (out.probe.predict(embs[i]) == labels[i]) ++hit;
  out.probe_train_acc = static_cast<double>(hit) / static_cast<double>(embs.size());

  if (!run_dir.empty()) {
    require_dir(run_dir);
    std::vector<std::string> ids;
    std::vector<std::vector<float>> protos;
    for (int k = 0; k < anchor::kChdClasses; ++k)
      if (out.bank.present(k)) {
        ids.push_back(std::to_string(k));
        protos.push_back(out.bank.proto[static_cast<std::size_t>(k)]);
      }
    anchor::write_embedding_cache((fs::path(run_dir) / kPrototypesBin).string(),
                                  ids, protos);

    std::vector<ckpt::NamedTensor> ts;
    ts.push_back({"probe.w", Tensor::from({anchor::kChdClasses, out.probe.in_dim},
                                          out.probe.w)});
    ts.push_back({"probe.b", Tensor::from({anchor::kChdClasses}, out.probe.b)});
    ckpt::write_checkpoint((fs::path(run_dir) / kProbeCkpt).string(), ts);

    nlohmann::ordered_json j;
    j["dim"] = out.bank.dim;
    j["counts"] = out.bank.count;
    j["degenerate"] = out.bank.degenerate;
    j["probe_train_acc"] = out.probe_train_acc;
    std::ofstream f(fs::path(run_dir) / kStage1Json);
    f << j.dump(2) << "\n";
    if (!f) throw DataError("stage 1: cannot write " + std::string(kStage1Json));
  }
  return out;
}

Stage1Out load_stage1(const std::string& run_dir) {
  const std::string protop = (fs::path(run_dir) / kPrototypesBin).string();
  const std::string probep = (fs::path(run_dir) / kProbeCkpt).string();
  if (!fs::exists(protop))
    throw DataError("missing stage-1 artifact: " + protop + "; run stage 1 first");
  if (!fs::exists(probep))
    throw DataError("missing stage-1 artifact: " + probep + "; run stage 1 first");

  Stage1Out out;
  auto cache = anchor::read_embedding_cache(protop);
  for (auto& [id, vec] : cache) {
    int k = -1;
    try {
      k = std::stoi(id);
    } catch (const std::exception&) {
      throw DataError(protop + ": prototype id '" + id + "' is not a class");
    }
    if (k < 0 || k >= anchor::kChdClasses)
      throw DataError(protop + ": prototype class " + id + " out of range");
    out.bank.dim = static_cast<int>(vec.size());
    out.bank.proto[static_cast<std::size_t>(k)] = std::move(vec);
  }

  auto ts = ckpt::read_checkpoint(probep);
  for (auto& nt : ts) {
    if (nt.name == "probe.w") {
      out.probe.in_dim = nt.tensor.shape.d[1];
      out.probe.w.assign(nt.tensor.data.begin(), nt.tensor.data.end());
    } else if (nt.name == "probe.b") {
      out.probe.b.assign(nt.tensor.data.begin(), nt.tensor.data.end());
    }
  }
  if (out.probe.w.empty() || out.probe.b.empty())
    throw DataError(probep + ": probe tensors missing");

  std::ifstream f(fs::path(run_dir) / kStage1Json);
  if (f) {
    try {
      auto j = nlohmann::json::parse(f);
      out.probe_train_acc = j.value("probe_train_acc", 0.0);
      if (j.contains("counts"))
        for (int k = 0; k < anchor::kChdClasses; ++k)
          out.bank.count[static_cast<std::size_t>(k)] = j["counts"][static_cast<std::size_t>(k)];
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string(kStage1Json) + ": " + e.what());
    }
  }
  return out;
}

namespace {

// Shared per-sample unlabeled state computed before any student forward.
struct UnsupItem {
  int idx = 0;
  aug::AugmentedPair pair;
  pl::Bundle bundle;
  pl::ChdPseudo chd;
};

struct AuditSinks {
  std::ostringstream refine, filter;
  bool active = false;
};

UnsupItem prepare_unsup(const cfg::TrainConfig& c, const DataBundle& data,
                        const model::MultiTaskNet& teacher,
                        const boundref::Refiner* refiner,
                        const Stage1Out* stage1, const anchor::Embedder* emb,
                        std::uint64_t phase, int epoch, std::int64_t step,
                        int idx, bool use_filter, bool mask_guidance,
                        bool sam_refine,
                        const anatomask::MaskTable& table,
                        std::int64_t* illegal, AuditSinks* audit) {
  UnsupItem u;
  u.idx = idx;
  const auto& entry = data.manifest.entries[static_cast<std::size_t>(idx)];
  const phantom::Sample& s = data.samples[static_cast<std::size_t>(idx)];

  auto wr = Rng::stream(c.seed, rng_tag::kWeakAug, phase, (std::uint64_t)epoch,
                        (std::uint64_t)idx);
  auto r1 = Rng::stream(c.seed, rng_tag::kStrongAug, phase, (std::uint64_t)epoch,
                        (std::uint64_t)idx, 1);
  auto r2 = Rng::stream(c.seed, rng_tag::kStrongAug, phase, (std::uint64_t)epoch,
                        (std::uint64_t)idx, 2);
  u.pair = aug::make_pair(s, wr, r1, r2);

  u.bundle = pl::generate_pseudo(teacher, u.pair.weak.image, c.tau, mask_guidance);

  if (sam_refine && refiner) {
    auto boxes = boundref::extract_boxes(u.bundle.hard.data(), u.bundle.h,
                                         u.bundle.w, c.min_box_area);
    auto refined = refiner->refine(u.pair.weak.image.data.data(),
                                   u.bundle.hard.data(), u.bundle.h,
                                   u.bundle.w, boxes);
    std::vector<boundref::GateDecision> decisions;
    auto gated = boundref::iou_gate(u.bundle.hard.data(), refined.data(),
                                    u.bundle.h, u.bundle.w, c.theta_iou,
                                    &decisions);
    if (audit && audit->active) {
      char buf[192];
      for (const auto& d : decisions) {
        std::snprintf(buf, sizeof(buf), "%d,%lld,%s,%d,%.6f,%d,%lld\n", epoch,
                      static_cast<long long>(step), entry.id.c_str(), d.cls,
                      d.iou, d.adopted ? 1 : 0,
                      static_cast<long long>(d.conflict_pixels));
        audit->refine << buf;
      }
    }
    u.bundle.hard = std::move(gated);
  }

  if (illegal)
    for (std::uint8_t px : u.bundle.hard)
      if (!table.is_allowed(u.bundle.mask_view, px)) ++*illegal;

  u.chd = {u.bundle.chd_argmax, true};
  if (use_filter) {
    if (!stage1 || !emb)
      throw ConfigError("prototype filtering requires stage-1 artifacts");
    auto e = emb->embed(s.image, entry.id);
    auto v = anchor::filter_pseudo(e, u.bundle.chd_argmax, stage1->bank,
                                   static_cast<double>(c.theta_cos), true);
    u.chd = pl::pseudo_chd_label(u.bundle.chd_logits, v);
    if (audit && audit->active) {
      char buf[192];
      std::snprintf(buf, sizeof(buf), "%d,%lld,%s,%d,%.6f,%d,%d,%s\n", epoch,
                    static_cast<long long>(step), entry.id.c_str(),
                    u.bundle.chd_argmax, v.cos, v.argmax_class,
                    v.accept ? 1 : 0, anchor::reject_name(v.reason));
      audit->filter << buf;
    }
  }
  return u;
}

[[noreturn]] void rethrow_with_step(const NumericError& e, std::uint64_t phase,
                                    int epoch, std::int64_t step,
                                    const std::vector<std::string>& ids) {
  std::ostringstream os;
  os << "phase " << phase << " epoch " << epoch << " step " << step << ": "
     << e.what() << ", batch [" << join_ids(ids) << "]";
  throw NumericError(os.str());
}

}  // namespace

Phase1Result run_phase1(const cfg::TrainConfig& c, const DataBundle& data,
                        const Stage1Out* stage1, const anchor::Embedder* emb,
                        const std::string& run_dir,
                        const EpochCallback& on_epoch) {
  c.validate();
  if (c.dino_filter && (!stage1 || !emb))
    throw ConfigError("phase 1: dino_filter needs stage-1 outputs and an embedder");

  const auto L = data.manifest.train_labeled();
  const auto U = data.manifest.train_unlabeled();
  if (L.empty()) throw ConfigError("phase 1: labeled training split is empty");
  const int B = c.batch_size;
  const bool have_unsup = !U.empty();
  const std::int64_t steps_per_epoch =
      have_unsup ? static_cast<std::int64_t>(U.size()) / B
                 : static_cast<std::int64_t>(L.size()) / B;
  if (steps_per_epoch == 0)
    throw ConfigError("phase 1: batch_size exceeds the training split");
  const std::int64_t total_steps = steps_per_epoch * c.epochs;

  std::unique_ptr<boundref::Refiner> refiner;
  if (c.sam_refine) refiner = make_refiner(c);

  Phase1Result res;
  res.student = std::make_unique<model::MultiTaskNet>(c.seed);
  res.teacher = std::make_unique<model::MultiTaskNet>(c.seed);
  res.teacher->set_trainable({});  // only ema_update may write it

  const auto table = anatomask::MaskTable::defaults();
  const auto w = c.loss_weights();
  AdamW opt;
  AuditSinks audit;
  audit.active = !run_dir.empty();
  if (audit.active) {
    require_dir(run_dir);
    audit.refine << "epoch,step,id,cls,iou,adopted,conflict_pixels\n";
    audit.filter << "epoch,step,id,pseudo_cls,cos,argmax_cls,accepted,reason\n";
  }

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    std::vector<int> Ls = L, Us = U;
    auto lr_rng = Rng::stream(c.seed, rng_tag::kShuffle, kPhase1,
                              (std::uint64_t)epoch, 0);
    shuffle(Ls, lr_rng);
    auto ur_rng = Rng::stream(c.seed, rng_tag::kShuffle, kPhase1,
                              (std::uint64_t)epoch, 1);
    shuffle(Us, ur_rng);

    EpochAccum acc;
    float lr_bb = 0, lr_hd = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t gstep = (epoch - 1) * steps_per_epoch + s;
      lr_bb = poly_lr(c.lr_backbone, gstep, total_steps, c.poly_power);
      lr_hd = poly_lr(c.lr_heads, gstep, total_steps, c.poly_power);
      res.step_log.push_back({gstep, lr_bb, lr_hd});

      std::vector<std::string> batch_ids;
      try {
      Graph g;
      std::vector<std::pair<std::string, Graph::NodeId>> comps;

      // labeled half: full multi-task supervision on the weak view
      std::vector<Graph::NodeId> segv, clsv;
      for (int k = 0; k < B; ++k) {
        const int li = Ls[static_cast<std::size_t>((s * B + k) % static_cast<std::int64_t>(Ls.size()))];
        const auto& entry = data.manifest.entries[static_cast<std::size_t>(li)];
        batch_ids.push_back(entry.id);
        auto wr = Rng::stream(c.seed, rng_tag::kWeakAug, kPhase1,
                              (std::uint64_t)epoch, (std::uint64_t)li);
        phantom::Sample ws = aug::weak_augment(data.samples[static_cast<std::size_t>(li)], wr);
        auto f = res.student->forward(g, ws.image, true);
        std::vector<int> tg(ws.mask.begin(), ws.mask.end());
        segv.push_back(g.softmax_cross_entropy(g.rows_from_chw(f.seg), std::move(tg)));
        auto chd_ce = g.softmax_cross_entropy(f.chd, {entry.chd});
        auto view_ce = g.softmax_cross_entropy(f.view, {static_cast<int>(entry.view)});
        clsv.push_back(g.add(chd_ce, view_ce));
      }
      comps.emplace_back("sup_seg", mean_of(g, segv));
      comps.emplace_back("sup_cls", mean_of(g, clsv));

      if (have_unsup) {
        std::vector<UnsupItem> items;
        items.reserve(static_cast<std::size_t>(B));
        for (int k = 0; k < B; ++k) {
          const int ui = Us[static_cast<std::size_t>(s * B + k)];
          batch_ids.push_back(data.manifest.entries[static_cast<std::size_t>(ui)].id);
          items.push_back(prepare_unsup(c, data, *res.teacher, refiner.get(),
                                        stage1, emb, kPhase1, epoch, s, ui,
                                        c.dino_filter, c.mask_guidance,
                                        c.sam_refine, table,
                                        &res.illegal_pseudo, &audit));
        }

        std::vector<Graph::NodeId> s1v, s2v, fpv, focv, mixv, plv, plmv, plfv;
        for (int k = 0; k < B; ++k) {
          UnsupItem& a = items[static_cast<std::size_t>(k)];
          UnsupItem& b = items[static_cast<std::size_t>((k + 1) % B)];

          auto fpr = Rng::stream(c.seed, rng_tag::kDropout, kPhase1,
                                 (std::uint64_t)epoch, (std::uint64_t)a.idx);
          auto fweak = res.student->forward(g, a.pair.weak.image, true,
                                            c.fp_rate, &fpr);
          auto f1 = res.student->forward(g, a.pair.strong1.image, true);
          auto f2 = res.student->forward(g, a.pair.strong2.image, true);

          auto cmr = Rng::stream(c.seed, rng_tag::kCutMix, kPhase1,
                                 (std::uint64_t)epoch, (std::uint64_t)a.idx);
          aug::CutMix cm = aug::cutmix(a.pair.strong1, b.pair.strong1, cmr);
          pl::MixedTargets mt = pl::mix_targets(a.bundle, b.bundle, cm.box);
          auto fm = res.student->forward(g, cm.mixed.image, true);

          pl::UnsupLosses ul = pl::unimatch_losses(
              g, a.bundle, f1.seg, f2.seg,
              c.fp_rate > 0.0f ? fweak.seg_fp : -1, c.focal_gamma, fm.seg, &mt);
          s1v.push_back(ul.s1);
          s2v.push_back(ul.s2);
          if (ul.fp >= 0) fpv.push_back(ul.fp);
          focv.push_back(ul.focal);
          mixv.push_back(ul.mixed);

          if (a.chd.accepted)
            plv.push_back(g.softmax_cross_entropy(f1.chd, {a.chd.cls}));

          // lambda-weighted CHD targets on the mixed image
          Graph::NodeId pm = g.zero(), pf = g.zero();
          if (a.chd.accepted) {
            pm = g.add(pm, g.scale(g.softmax_cross_entropy(fm.chd, {a.chd.cls}),
                                   static_cast<float>(cm.lambda)));
            pf = g.add(pf, g.scale(g.focal_loss(fm.chd, {a.chd.cls}, c.focal_gamma),
                                   static_cast<float>(cm.lambda)));
          }
          if (b.chd.accepted) {
            pm = g.add(pm, g.scale(g.softmax_cross_entropy(fm.chd, {b.chd.cls}),
                                   static_cast<float>(1.0 - cm.lambda)));
            pf = g.add(pf, g.scale(g.focal_loss(fm.chd, {b.chd.cls}, c.focal_gamma),
                                   static_cast<float>(1.0 - cm.lambda)));
          }
          plmv.push_back(pm);
          plfv.push_back(pf);
        }
        comps.emplace_back("unsup_s1", mean_of(g, s1v));
        comps.emplace_back("unsup_s2", mean_of(g, s2v));
        if (!fpv.empty()) comps.emplace_back("unsup_fp", mean_of(g, fpv));
        comps.emplace_back("unsup_focal", mean_of(g, focv));
        comps.emplace_back("unsup_mixed", mean_of(g, mixv));
        comps.emplace_back("pl_cls", mean_of(g, plv));
        comps.emplace_back("pl_cls_mixed", mean_of(g, plmv));
        comps.emplace_back("pl_cls_focal_mixed", mean_of(g, plfv));
      }

      Graph::NodeId total = pl::total_loss(g, comps, w);
      if (!std::isfinite(static_cast<double>(g.val(total).item())))
        throw NumericError("non-finite loss");

      acc.sup_seg += weighted(w, comps, g, "sup_seg");
      acc.sup_cls += weighted(w, comps, g, "sup_cls");
      for (const char* key : {"unsup_s1", "unsup_s2", "unsup_fp", "unsup_focal", "unsup_mixed"})
        acc.unsup += weighted(w, comps, g, key);
      for (const char* key : {"pl_cls", "pl_cls_mixed", "pl_cls_focal_mixed"})
        acc.pl_cls += weighted(w, comps, g, key);
      acc.steps += 1;

      res.student->zero_grads();
      g.backward(total);
      for (const auto& name : res.student->trainable_params())
        opt.step(name, *res.student->param(name),
                 is_backbone(name) ? lr_bb : lr_hd, c.weight_decay);
      model::ema_update(*res.teacher, *res.student, c.ema_decay);
      } catch (const NumericError& e) {
        rethrow_with_step(e, kPhase1, epoch, s, batch_ids);
      }
    }

    auto rep = evaluate(*res.teacher, data, "val", &res.illegal_eval);
    EpochRow row = acc.finish(epoch, 1, rep, lr_bb, lr_hd);
    res.rows.push_back(row);
    if (on_epoch) on_epoch(row);

    if (rep.overall > res.best_overall) {
      res.best_overall = rep.overall;
      res.best_epoch = epoch;
      if (!run_dir.empty())
        ckpt::save_nets((fs::path(run_dir) / kCkptBest).string(), *res.student,
                        *res.teacher);
    }
  }

  if (!run_dir.empty()) {
    ckpt::save_nets((fs::path(run_dir) / kCkptLast).string(), *res.student,
                    *res.teacher);
    std::ofstream rf(fs::path(run_dir) / kRefineAudit);
    rf << audit.refine.str();
    std::ofstream ff(fs::path(run_dir) / kFilterAudit);
    ff << audit.filter.str();
    if (!rf || !ff) throw DataError("phase 1: cannot write audit CSVs");
  }
  return res;
}

Phase2Result run_phase2(const cfg::TrainConfig& c, const DataBundle& data,
                        const model::MultiTaskNet& phase1_teacher,
                        const Stage1Out* stage1, const anchor::Embedder* emb,
                        const std::string& run_dir,
                        const EpochCallback& on_epoch) {
  c.validate();
  const bool use_filter = c.phase2_dino_filter;
  if (use_filter && (!stage1 || !emb))
    throw ConfigError("phase 2: dino_filter needs stage-1 outputs and an embedder");

  Phase2Result res;
  res.net = std::make_unique<model::MultiTaskNet>(c.seed);
  copy_params(*res.net, phase1_teacher);
  res.net->set_trainable({"enc.3", "chd_head"});
  res.net->reset_classification_head(c.seed);

  AdamW opt;
  for (const auto& n : res.net->param_names()) opt.drop(n);  // freeze contract

  if (!run_dir.empty()) {
    require_dir(run_dir);
    save_model_ckpt((fs::path(run_dir) / kCkptPhase2Init).string(), *res.net);
  }

  const auto L = data.manifest.train_labeled();
  const auto U = data.manifest.train_unlabeled();
  if (L.empty()) throw ConfigError("phase 2: labeled training split is empty");
  const int B = c.batch_size;
  const bool have_unsup = !U.empty();
  const std::int64_t steps_per_epoch =
      have_unsup ? static_cast<std::int64_t>(U.size()) / B
                 : static_cast<std::int64_t>(L.size()) / B;
  if (steps_per_epoch == 0)
    throw ConfigError("phase 2: batch_size exceeds the training split");
  const std::int64_t total_steps = steps_per_epoch * c.phase2_epochs;

  const auto table = anatomask::MaskTable::defaults();
  const auto w = c.loss_weights();

  for (int epoch = 1; epoch <= c.phase2_epochs; ++epoch) {
    std::vector<int> Ls = L, Us = U;
    auto lr_rng = Rng::stream(c.seed, rng_tag::kShuffle, kPhase2,
                              (std::uint64_t)epoch, 0);
    shuffle(Ls, lr_rng);
    auto ur_rng = Rng::stream(c.seed, rng_tag::kShuffle, kPhase2,
                              (std::uint64_t)epoch, 1);
    shuffle(Us, ur_rng);

    EpochAccum acc;
    float lr_last = 0, lr_head = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t gstep = (epoch - 1) * steps_per_epoch + s;
      lr_last = poly_lr(c.phase2_lr_last_layer, gstep, total_steps, c.poly_power);
      lr_head = poly_lr(c.phase2_lr_cls_head, gstep, total_steps, c.poly_power);
      res.step_log.push_back({gstep, lr_last, lr_head});

      std::vector<std::string> batch_ids;
      try {
      Graph g;
      std::vector<std::pair<std::string, Graph::NodeId>> comps;

      // labeled half: CHD supervision only; every other head is frozen and
      // must not pull the unfrozen bottleneck
      std::vector<Graph::NodeId> clsv;
      for (int k = 0; k < B; ++k) {
        const int li = Ls[static_cast<std::size_t>((s * B + k) % static_cast<std::int64_t>(Ls.size()))];
        const auto& entry = data.manifest.entries[static_cast<std::size_t>(li)];
        batch_ids.push_back(entry.id);
        auto wr = Rng::stream(c.seed, rng_tag::kWeakAug, kPhase2,
                              (std::uint64_t)epoch, (std::uint64_t)li);
        phantom::Sample ws = aug::weak_augment(data.samples[static_cast<std::size_t>(li)], wr);
        auto f = res.net->forward(g, ws.image, true);
        clsv.push_back(g.softmax_cross_entropy(f.chd, {entry.chd}));
      }
      comps.emplace_back("sup_cls", mean_of(g, clsv));

      if (have_unsup) {
        // self-generated CHD pseudo-labels; refinement and mask guidance are
        // disabled in this phase by design
        std::vector<UnsupItem> items;
        items.reserve(static_cast<std::size_t>(B));
        for (int k = 0; k < B; ++k) {
          const int ui = Us[static_cast<std::size_t>(s * B + k)];
          batch_ids.push_back(data.manifest.entries[static_cast<std::size_t>(ui)].id);
          items.push_back(prepare_unsup(c, data, *res.net, nullptr, stage1,
                                        emb, kPhase2, epoch, s, ui, use_filter,
                                        /*mask_guidance=*/false,
                                        /*sam_refine=*/false, table, nullptr,
                                        nullptr));
        }

        std::vector<Graph::NodeId> plv, plmv, plfv;
        for (int k = 0; k < B; ++k) {
          UnsupItem& a = items[static_cast<std::size_t>(k)];
          UnsupItem& b = items[static_cast<std::size_t>((k + 1) % B)];

          auto f1 = res.net->forward(g, a.pair.strong1.image, true);
          if (a.chd.accepted)
            plv.push_back(g.softmax_cross_entropy(f1.chd, {a.chd.cls}));

          auto cmr = Rng::stream(c.seed, rng_tag::kCutMix, kPhase2,
                                 (std::uint64_t)epoch, (std::uint64_t)a.idx);
          aug::CutMix cm = aug::cutmix(a.pair.strong1, b.pair.strong1, cmr);
          auto fm = res.net->forward(g, cm.mixed.image, true);

          Graph::NodeId pm = g.zero(), pf = g.zero();
          if (a.chd.accepted) {
            pm = g.add(pm, g.scale(g.softmax_cross_entropy(fm.chd, {a.chd.cls}),
                                   static_cast<float>(cm.lambda)));
            pf = g.add(pf, g.scale(g.focal_loss(fm.chd, {a.chd.cls}, c.focal_gamma),
                                   static_cast<float>(cm.lambda)));
          }
          if (b.chd.accepted) {
            pm = g.add(pm, g.scale(g.softmax_cross_entropy(fm.chd, {b.chd.cls}),
                                   static_cast<float>(1.0 - cm.lambda)));
            pf = g.add(pf, g.scale(g.focal_loss(fm.chd, {b.chd.cls}, c.focal_gamma),
                                   static_cast<float>(1.0 - cm.lambda)));
          }
          plmv.push_back(pm);
          plfv.push_back(pf);
        }
        comps.emplace_back("pl_cls", mean_of(g, plv));
        comps.emplace_back("pl_cls_mixed", mean_of(g, plmv));
        comps.emplace_back("pl_cls_focal_mixed", mean_of(g, plfv));
      }

      Graph::NodeId total = pl::total_loss(g, comps, w);
      if (!std::isfinite(static_cast<double>(g.val(total).item())))
        throw NumericError("non-finite loss");

      acc.sup_cls += weighted(w, comps, g, "sup_cls");
      for (const char* key : {"pl_cls", "pl_cls_mixed", "pl_cls_focal_mixed"})
        acc.pl_cls += weighted(w, comps, g, key);
      acc.steps += 1;

      res.net->zero_grads();
      g.backward(total);
      for (const auto& name : res.net->trainable_params())
        opt.step(name, *res.net->param(name),
                 is_backbone(name) ? lr_last : lr_head, c.weight_decay);
      } catch (const NumericError& e) {
        rethrow_with_step(e, kPhase2, epoch, s, batch_ids);
      }
    }

    auto rep = evaluate(*res.net, data, "val", &res.illegal_eval);
    EpochRow row = acc.finish(epoch, 2, rep, lr_last, lr_head);
    res.rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }

  if (!run_dir.empty())
    save_model_ckpt((fs::path(run_dir) / kCkptPhase2).string(), *res.net);
  return res;
}

std::unique_ptr<anchor::Embedder> make_embedder(const cfg::TrainConfig& c) {
  if (c.embedder == "stub")
    return std::make_unique<anchor::StubEmbedder>(c.seed, c.embed_dim);
  if (c.embedder.rfind("cache:", 0) == 0)
    return std::make_unique<anchor::CacheEmbedder>(c.embedder.substr(6));
  throw ConfigError("unknown embedder: " + c.embedder);
}

std::unique_ptr<boundref::Refiner> make_refiner(const cfg::TrainConfig& c) {
  if (c.refiner == "stub") return std::make_unique<boundref::MorphRefiner>();
  if (c.refiner == "oracle")
    throw ConfigError("the oracle refiner is a test utility; training rejects it");
  throw ConfigError("unknown refiner: " + c.refiner);
}

void run_training(const cfg::TrainConfig& c, const std::vector<int>& stages,
                  bool verbose) {
  c.validate();
  if (c.refiner == "oracle")  // fail before any artifact lands in run_dir
    throw ConfigError("the oracle refiner is a test utility; training rejects it");
  for (int s : stages)
    if (s < 1 || s > 3) throw ConfigError("stages must be within 1..3");
  auto wants = [&](int s) {
    for (int x : stages)
      if (x == s) return true;
    return false;
  };

#ifdef _OPENMP
  omp_set_num_threads(c.threads);
#endif

  const std::string run_dir = cfg::resolved_run_dir(c);
  require_dir(run_dir);
  cfg::save_config(c, (fs::path(run_dir) / kConfigJson).string());

  DataBundle data = load_data(c.data_root);
  auto emb = make_embedder(c);

  EpochCallback printer;
  if (verbose)
    printer = [](const EpochRow& r) {
      std::printf(
          "phase %d epoch %3d  loss %.4f  dice %.2f  nsd %.2f  f1 %.2f  "
          "overall %.2f\n",
          r.phase, r.epoch, r.loss_total, r.dice_mean, r.nsd_mean, r.macro_f1,
          r.overall);
      std::fflush(stdout);
    };

  Stage1Out s1;
  bool have_s1 = false;
  if (wants(1)) {
    s1 = run_stage1(c, data, *emb, run_dir);
    have_s1 = true;
    if (verbose)
      std::printf("stage 1: probe train acc %.3f, %d prototype classes\n",
                  s1.probe_train_acc,
                  static_cast<int>(std::count_if(
                      s1.bank.proto.begin(), s1.bank.proto.end(),
                      [](const std::vector<float>& p) { return !p.empty(); })));
  }

  auto ensure_s1 = [&]() {
    if (!have_s1) {
      s1 = load_stage1(run_dir);
      have_s1 = true;
    }
  };

  std::vector<EpochRow> rows;
  bool ran_p1 = false;
  std::unique_ptr<model::MultiTaskNet> p1_teacher;
  if (wants(2)) {
    if (c.dino_filter) ensure_s1();
    Phase1Result p1 = run_phase1(c, data, have_s1 ? &s1 : nullptr, emb.get(),
                                 run_dir, printer);
    rows = p1.rows;
    p1_teacher = std::move(p1.teacher);
    ran_p1 = true;
  }

  if (wants(3)) {
    if (c.phase2_dino_filter) ensure_s1();
    if (!p1_teacher) {
      const std::string best = (fs::path(run_dir) / kCkptBest).string();
      if (!fs::exists(best))
        throw DataError("missing phase-1 checkpoint: " + best +
                        "; run stage 2 first");
      auto student = std::make_unique<model::MultiTaskNet>(c.seed);
      p1_teacher = std::make_unique<model::MultiTaskNet>(c.seed);
      ckpt::load_nets(best, *student, *p1_teacher);
    }
    Phase2Result p2 = run_phase2(c, data, *p1_teacher,
                                 have_s1 ? &s1 : nullptr, emb.get(), run_dir,
                                 printer);
    for (const auto& r : p2.rows) rows.push_back(r);
  }

  if (ran_p1) {
    write_metrics_csv((fs::path(run_dir) / kMetricsCsv).string(), rows, false);
  } else if (!rows.empty()) {
    const std::string mp = (fs::path(run_dir) / kMetricsCsv).string();
    write_metrics_csv(mp, rows, fs::exists(mp));
  }
}

}  // namespace zssl::train
