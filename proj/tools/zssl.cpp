#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "zssl/boundref.hpp"
#include "zssl/checkpoint.hpp"
#include "zssl/config.hpp"
#include "zssl/dataset.hpp"
#include "zssl/gradcheck.hpp"
#include "zssl/metrics.hpp"
#include "zssl/semanchor.hpp"
#include "zssl/trainer.hpp"

namespace fs = std::filesystem;
using namespace zssl;

namespace {

std::vector<int> parse_stages(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &pos);
    } catch (...) {
      pos = std::string::npos;
    }
    if (pos != tok.size() || v < 1 || v > 3)
      throw ConfigError("bad --stages value '" + s +
                        "': want a comma list drawn from 1,2,3");
    out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw ConfigError("--stages selects no stage");
  return out;
}

nlohmann::ordered_json report_json(const metrics::EvalReport& r) {
  nlohmann::ordered_json j;
  j["n_images"] = r.n_images;
  j["n_cls_samples"] = r.n_cls_samples;
  j["dice_mean"] = r.dice_mean;
  j["nsd_mean"] = r.nsd_mean;
  j["macro_f1"] = r.macro_f1;
  j["overall"] = r.overall;
  j["class_dice"] = r.class_dice;  // index = seg class, -1 when never seen
  j["class_nsd"] = r.class_nsd;
  j["confusion"] = r.confusion;  // rows = ground truth, cols = prediction
  return j;
}

void write_report_csv(const std::string& path, const metrics::EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  char buf[64];
  auto row = [&](const std::string& k, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << k << ',' << buf << '\n';
  };
  out << "metric,value\n";
  out << "n_images," << r.n_images << '\n';
  out << "n_cls_samples," << r.n_cls_samples << '\n';
  row("dice_mean", r.dice_mean);
  row("nsd_mean", r.nsd_mean);
  row("macro_f1", r.macro_f1);
  row("overall", r.overall);
  for (int c = 1; c < metrics::kSegClasses; ++c)
    row("dice_class_" + std::to_string(c), r.class_dice[(std::size_t)c]);
  for (int c = 1; c < metrics::kSegClasses; ++c)
    row("nsd_class_" + std::to_string(c), r.class_nsd[(std::size_t)c]);
  if (!out) throw DataError("cannot write " + path);
}

void print_report(const metrics::EvalReport& r) {
  std::printf(
      "images %d  cls %d  dice %.2f  nsd %.2f  macro_f1 %.2f  overall %.2f\n",
      r.n_images, r.n_cls_samples, r.dice_mean, r.nsd_mean, r.macro_f1,
      r.overall);
}

std::string pick_prefix(const std::vector<ckpt::NamedTensor>& tensors,
                        const std::string& which) {
  auto has = [&](const std::string& p) {
    for (const auto& t : tensors)
      if (t.name.rfind(p, 0) == 0) return true;
    return false;
  };
  if (which != "auto") {
    std::string p = which + ".";
    if (!has(p)) throw DataError("checkpoint has no tensors under '" + p + "'");
    return p;
  }
  for (const char* p : {"teacher.", "model.", "student."})
    if (has(p)) return p;
  throw DataError("checkpoint holds no teacher./model./student. tensors");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zssl: semi-supervised multi-task ultrasound training testbed"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  int rc = 0;

  auto* gd = app.add_subcommand("gen-data", "generate a phantom dataset");
  struct {
    std::string root;
    std::uint64_t seed = 7;
    data::SplitCounts sc;
    int hw = 64;
    phantom::PhantomParams p;
  } g;
  gd->add_option("--root", g.root, "output dataset directory")->required();
  gd->add_option("--seed", g.seed, "dataset seed");
  gd->add_option("--labeled", g.sc.labeled_train, "labeled train samples");
  gd->add_option("--unlabeled", g.sc.unlabeled_train, "unlabeled train samples");
  gd->add_option("--val", g.sc.val, "validation samples");
  gd->add_option("--test", g.sc.test, "test samples");
  gd->add_option("--hw", g.hw, "square image side in pixels");
  gd->add_option("--speckle-var", g.p.speckle_var, "speckle noise variance");
  gd->add_option("--shadow-prob", g.p.shadow_prob, "occlusion band probability");
  gd->add_option("--shadow-atten", g.p.shadow_atten, "occlusion attenuation");
  gd->callback([&] {
    g.p.h = g.p.w = g.hw;
    auto m = data::generate_dataset(g.sc, g.seed, g.root);
    data::write_dataset(m, g.p);
    std::printf("wrote %zu samples under %s\n", m.entries.size(),
                g.root.c_str());
  });

  auto* tr = app.add_subcommand("train", "run training stages 1-3");
  struct {
    std::string config, stages = "1,2,3";
    std::vector<std::string> sets;
    int jobs = 0;
    bool quiet = false;
  } t;
  tr->add_option("--config", t.config, "JSON config file (defaults when omitted)");
  tr->add_option("--stages", t.stages, "comma list, any subset of 1,2,3");
  tr->add_option("--set", t.sets, "key=value config override (repeatable)");
  tr->add_option("--jobs", t.jobs, "worker threads for the data path");
  tr->add_flag("--quiet", t.quiet, "suppress per-epoch progress");
  tr->callback([&] {
    cfg::TrainConfig c;
    if (!t.config.empty()) c = cfg::load_config(t.config);
    for (const auto& kv : t.sets) cfg::apply_override(c, kv);
    if (t.jobs > 0) c.threads = t.jobs;
    train::run_training(c, parse_stages(t.stages), !t.quiet);
    std::printf("artifacts in %s\n", cfg::resolved_run_dir(c).c_str());
  });

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  struct {
    std::string ckpt, root, split = "test", net = "auto", json_out;
  } e;
  ev->add_option("--ckpt", e.ckpt, "checkpoint file")->required();
  ev->add_option("--data", e.root, "dataset root")->required();
  ev->add_option("--split", e.split, "train | val | test");
  ev->add_option("--net", e.net, "auto | student | teacher | model")
      ->check(CLI::IsMember({"auto", "student", "teacher", "model"}));
  ev->add_option("--json", e.json_out, "also write the report as JSON");
  ev->callback([&] {
    auto tensors = ckpt::read_checkpoint(e.ckpt);
    std::string prefix = pick_prefix(tensors, e.net);
    model::MultiTaskNet net(0);
    ckpt::load_net(tensors, prefix, net);
    auto data = train::load_data(e.root);
    std::int64_t illegal = 0;
    auto rep = train::evaluate(net, data, e.split, &illegal);
    std::printf("%s%s: ", prefix.c_str(), e.split.c_str());
    print_report(rep);
    if (illegal) std::printf("illegal masked predictions: %lld\n",
                             (long long)illegal);
    if (!e.json_out.empty()) {
      std::ofstream out(e.json_out, std::ios::trunc);
      if (!out) throw DataError("cannot write " + e.json_out);
      out << report_json(rep).dump(2) << '\n';
    }
  });

  auto* rf = app.add_subcommand("refine",
                                "boundary-refine every mask of a dataset");
  struct {
    std::string pred, out, split, refiner = "stub";
    double theta = 0.5;
    int min_area = 4;
  } r;
  rf->add_option("--pred", r.pred, "input predictions dataset")->required();
  rf->add_option("--out", r.out, "output dataset directory")->required();
  rf->add_option("--split", r.split, "restrict to one split (default all)");
  rf->add_option("--refiner", r.refiner, "refiner backend (stub)");
  rf->add_option("--theta-iou", r.theta, "per-region adoption threshold");
  rf->add_option("--min-area", r.min_area, "smallest region worth a box");
  rf->callback([&] {
    cfg::TrainConfig c;
    c.refiner = r.refiner;
    c.min_box_area = r.min_area;
    auto ref = train::make_refiner(c);
    auto m = data::read_dataset(r.pred);
    data::DatasetManifest out_m = m;
    out_m.root = r.out;
    if (!r.split.empty()) {
      out_m.entries.clear();
      for (const auto& entry : m.entries)
        if (entry.split == r.split) out_m.entries.push_back(entry);
      if (out_m.entries.empty())
        throw DataError("no entries in split '" + r.split + "'");
    }
    data::write_manifest(out_m);
    std::ostringstream audit;
    audit << "id,cls,iou,adopted,conflict_pixels\n";
    int n = 0;
    std::int64_t adopted = 0, regions = 0;
    for (const auto& entry : out_m.entries) {
      auto s = data::load_sample(m.root, entry);
      const int h = s.h(), w = s.w();
      auto boxes = boundref::extract_boxes(s.mask.data(), h, w, r.min_area);
      auto refined =
          ref->refine(s.image.data.data(), s.mask.data(), h, w, boxes);
      std::vector<boundref::GateDecision> decs;
      auto gated =
          boundref::iou_gate(s.mask.data(), refined.data(), h, w, r.theta,
                             &decs);
      phantom::Sample out_s = s;
      out_s.mask = std::move(gated);
      data::save_sample(r.out, entry, out_s);
      for (const auto& d : decs) {
        audit << entry.id << ',' << d.cls << ',' << d.iou << ','
              << (d.adopted ? 1 : 0) << ',' << d.conflict_pixels << '\n';
        ++regions;
        adopted += d.adopted ? 1 : 0;
      }
      ++n;
    }
    std::string audit_path = (fs::path(r.out) / "refine_audit.csv").string();
    std::ofstream out(audit_path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + audit_path);
    out << audit.str();
    std::printf("refined %d masks, adopted %lld/%lld regions; audit in %s\n",
                n, (long long)adopted, (long long)regions, audit_path.c_str());
  });

  auto* fl = app.add_subcommand(
      "filter", "prototype-filter a file of pseudo class labels");
  struct {
    std::string run, labels, root, out;
    double theta = -1.0;
  } f;
  fl->add_option("--run", f.run, "run directory with stage-1 artifacts")
      ->required();
  fl->add_option("--labels", f.labels, "CSV of id,pseudo_cls rows")->required();
  fl->add_option("--data", f.root, "dataset root (default: config data_root)");
  fl->add_option("--out", f.out, "verdict CSV path (default stdout)");
  fl->add_option("--theta-cos", f.theta, "override the config threshold");
  fl->callback([&] {
    auto c = cfg::load_config((fs::path(f.run) / train::kConfigJson).string());
    auto s1 = train::load_stage1(f.run);
    auto emb = train::make_embedder(c);
    double theta = f.theta >= 0.0 ? f.theta : c.theta_cos;
    auto m = data::read_dataset(f.root.empty() ? c.data_root : f.root);
    std::unordered_map<std::string, int> by_id;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
      by_id[m.entries[i].id] = (int)i;

    std::ifstream in(f.labels);
    if (!in) throw DataError("cannot open labels file: " + f.labels);
    std::ostringstream outbuf;
    outbuf << "id,pseudo_cls,cos,argmax_cls,accepted,reason\n";
    std::string line;
    int lineno = 0, total = 0, accepted = 0;
    char buf[32];
    while (std::getline(in, line)) {
      ++lineno;
      while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
        line.pop_back();
      if (line.empty()) continue;
      auto comma = line.find(',');
      if (comma == std::string::npos)
        throw DataError("labels line " + std::to_string(lineno) +
                        ": want id,pseudo_cls");
      std::string id = line.substr(0, comma);
      std::string cls_s = line.substr(comma + 1);
      std::size_t pos = 0;
      int cls = -1;
      try {
        cls = std::stoi(cls_s, &pos);
      } catch (...) {
        pos = std::string::npos;
      }
      if (pos != cls_s.size()) {
        if (lineno == 1) continue;  // header row
        throw DataError("labels line " + std::to_string(lineno) +
                        ": bad class '" + cls_s + "'");
      }
      if (cls < 0 || cls >= anchor::kChdClasses)
        throw DataError("labels line " + std::to_string(lineno) +
                        ": class out of range");
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw DataError("labels file names unknown sample id: " + id);
      auto s = data::load_sample(m.root, m.entries[(std::size_t)it->second]);
      auto v = anchor::filter_pseudo(emb->embed(s.image, id), cls, s1.bank,
                                     theta);
      std::snprintf(buf, sizeof buf, "%.6f", v.cos);
      outbuf << id << ',' << cls << ',' << buf << ',' << v.argmax_class << ','
             << (v.accept ? 1 : 0) << ',' << anchor::reject_name(v.reason)
             << '\n';
      ++total;
      accepted += v.accept ? 1 : 0;
    }
    if (f.out.empty()) {
      std::fputs(outbuf.str().c_str(), stdout);
    } else {
      std::ofstream out(f.out, std::ios::trunc);
      if (!out) throw DataError("cannot write " + f.out);
      out << outbuf.str();
    }
    std::fprintf(stderr, "accepted %d/%d at theta_cos %.3f\n", accepted, total,
                 theta);
  });

  auto* sc = app.add_subcommand("score",
                                "score a prediction dataset against a GT one");
  struct {
    std::string pred, gt, out = "score";
    double tol = 2.0;
    bool pooled = false;
  } s;
  sc->add_option("--pred", s.pred, "prediction dataset root")->required();
  sc->add_option("--gt", s.gt, "ground-truth dataset root")->required();
  sc->add_option("--out", s.out, "output path prefix (.csv/.json)");
  sc->add_option("--nsd-tol", s.tol, "NSD tolerance in pixels");
  sc->add_flag("--pooled", s.pooled, "pool per-class counts across images");
  sc->callback([&] {
    auto gm = data::read_dataset(s.gt);
    auto pm = data::read_dataset(s.pred);
    std::unordered_map<std::string, int> by_id;
    for (std::size_t i = 0; i < pm.entries.size(); ++i)
      by_id[pm.entries[i].id] = (int)i;
    metrics::Evaluator ev(s.tol, s.pooled);
    for (const auto& ge : gm.entries) {
      auto it = by_id.find(ge.id);
      if (it == by_id.end())
        throw DataError("prediction set is missing id: " + ge.id);
      const auto& pe = pm.entries[(std::size_t)it->second];
      auto gs = data::load_sample(gm.root, ge);
      auto ps = data::load_sample(pm.root, pe);
      if (gs.h() != ps.h() || gs.w() != ps.w())
        throw DimError("mask dims differ for id " + ge.id);
      ev.add_seg(ps.mask.data(), gs.mask.data(), gs.h(), gs.w());
      ev.add_cls(pe.chd, ge.chd);
    }
    auto rep = ev.report();
    write_report_csv(s.out + ".csv", rep);
    std::ofstream jout(s.out + ".json", std::ios::trunc);
    if (!jout) throw DataError("cannot write " + s.out + ".json");
    jout << report_json(rep).dump(2) << '\n';
    print_report(rep);
  });

  auto* cg = app.add_subcommand("check-grad",
                                "finite-difference gradient suite");
  struct {
    std::uint64_t seed = 7;
    double h = 1e-5;
    bool quiet = false;
  } gchk;
  cg->add_option("--seed", gchk.seed, "sampling seed");
  cg->add_option("--step", gchk.h, "central-difference step");
  cg->add_flag("--quiet", gchk.quiet, "suppress per-case lines");
  cg->callback([&] {
    auto res = gradcheck::run_suite(gchk.seed, !gchk.quiet, (float)gchk.h);
    std::printf(
        "checked %zu coordinates: max relative error %.3e, 99%% coverage "
        "%.3e\n",
        res.checked, res.max_rel_err, res.rel_err_at_coverage(0.99));
    rc = res.max_rel_err < 1e-3 ? 0 : 3;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  } catch (const DataError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const DimError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 3;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return rc;
}
