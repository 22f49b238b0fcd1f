#include "zssl/config.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <variant>

namespace zssl::cfg {

namespace {

using Member =
    std::variant<int TrainConfig::*, float TrainConfig::*, bool TrainConfig::*,
                 std::uint64_t TrainConfig::*, std::string TrainConfig::*>;

struct Field {
  const char* key;
  Member ptr;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"seed", &TrainConfig::seed},
      {"data_root", &TrainConfig::data_root},
      {"run_dir", &TrainConfig::run_dir},
      {"batch_size", &TrainConfig::batch_size},
      {"weight_decay", &TrainConfig::weight_decay},
      {"lr_backbone", &TrainConfig::lr_backbone},
      {"lr_heads", &TrainConfig::lr_heads},
      {"epochs", &TrainConfig::epochs},
      {"poly_power", &TrainConfig::poly_power},
      {"ema_decay", &TrainConfig::ema_decay},
      {"tau", &TrainConfig::tau},
      {"theta_cos", &TrainConfig::theta_cos},
      {"theta_iou", &TrainConfig::theta_iou},
      {"fp_rate", &TrainConfig::fp_rate},
      {"focal_gamma", &TrainConfig::focal_gamma},
      {"w_sup_seg", &TrainConfig::w_sup_seg},
      {"w_sup_cls", &TrainConfig::w_sup_cls},
      {"w_unsup_s", &TrainConfig::w_unsup_s},
      {"w_unsup_focal", &TrainConfig::w_unsup_focal},
      {"w_unsup_mixed", &TrainConfig::w_unsup_mixed},
      {"w_pl_cls", &TrainConfig::w_pl_cls},
      {"w_pl_cls_mixed", &TrainConfig::w_pl_cls_mixed},
      {"w_pl_cls_focal_mixed", &TrainConfig::w_pl_cls_focal_mixed},
      {"phase2_lr_last_layer", &TrainConfig::phase2_lr_last_layer},
      {"phase2_lr_cls_head", &TrainConfig::phase2_lr_cls_head},
      {"phase2_epochs", &TrainConfig::phase2_epochs},
      {"phase2_dino_filter", &TrainConfig::phase2_dino_filter},
      {"sam_refine", &TrainConfig::sam_refine},
      {"dino_filter", &TrainConfig::dino_filter},
      {"mask_guidance", &TrainConfig::mask_guidance},
      {"embedder", &TrainConfig::embedder},
      {"refiner", &TrainConfig::refiner},
      {"embed_dim", &TrainConfig::embed_dim},
      {"min_box_area", &TrainConfig::min_box_area},
      {"probe_epochs", &TrainConfig::probe_epochs},
      {"probe_lr", &TrainConfig::probe_lr},
      {"threads", &TrainConfig::threads},
  };
  return f;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw ConfigError("unknown config key: " + key);
}

void assign_json(TrainConfig& c, const Field& f, const nlohmann::json& v) {
  std::visit(
      [&](auto ptr) {
        using T = std::remove_reference_t<decltype(c.*ptr)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean())
            throw ConfigError(std::string(f.key) + ": expected a boolean");
          c.*ptr = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (!v.is_string())
            throw ConfigError(std::string(f.key) + ": expected a string");
          c.*ptr = v.get<std::string>();
        } else if constexpr (std::is_same_v<T, int> ||
                             std::is_same_v<T, std::uint64_t>) {
          if (!v.is_number_integer() && !v.is_number_unsigned())
            throw ConfigError(std::string(f.key) + ": expected an integer");
          c.*ptr = v.get<T>();
        } else {
          if (!v.is_number())
            throw ConfigError(std::string(f.key) + ": expected a number");
          c.*ptr = v.get<T>();
        }
      },
      f.ptr);
}

}  // namespace

pl::LossWeights TrainConfig::loss_weights() const {
  pl::LossWeights w;
  w.sup_seg = w_sup_seg;
  w.sup_cls = w_sup_cls;
  w.unsup_seg_s = w_unsup_s;
  w.unsup_focal = w_unsup_focal;
  w.unsup_mixed = w_unsup_mixed;
  w.pl_cls = w_pl_cls;
  w.pl_cls_mixed = w_pl_cls_mixed;
  w.pl_cls_focal_mixed = w_pl_cls_focal_mixed;
  return w;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("config: ") + what);
  };
  require(batch_size >= 1, "batch_size must be >= 1");
  require(threads >= 1, "threads must be >= 1");
  require(min_box_area >= 1, "min_box_area must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(phase2_epochs >= 0, "phase2_epochs must be >= 0");
  require(lr_backbone > 0.0f && lr_heads > 0.0f, "learning rates must be > 0");
  require(phase2_lr_last_layer > 0.0f && phase2_lr_cls_head > 0.0f,
          "phase-2 learning rates must be > 0");
  require(phase2_lr_last_layer < phase2_lr_cls_head,
          "phase2_lr_last_layer must be below phase2_lr_cls_head");
  require(weight_decay >= 0.0f, "weight_decay must be >= 0");
  require(poly_power > 0.0f, "poly_power must be > 0");
  require(ema_decay >= 0.0f && ema_decay <= 1.0f, "ema_decay must be in [0,1]");
  require(tau >= 0.0f && tau <= 1.0f, "tau must be in [0,1]");
  require(theta_cos >= 0.0f && theta_cos <= 1.0f, "theta_cos must be in [0,1]");
  require(theta_iou >= 0.0f && theta_iou <= 1.0f, "theta_iou must be in [0,1]");
  require(fp_rate >= 0.0f && fp_rate < 1.0f, "fp_rate must be in [0,1)");
  require(focal_gamma >= 0.0f, "focal_gamma must be >= 0");
  require(embed_dim >= 1, "embed_dim must be >= 1");
  require(probe_epochs >= 0, "probe_epochs must be >= 0");
  require(probe_lr >= 0.0f, "probe_lr must be >= 0");
  require(embedder == "stub" || embedder.rfind("cache:", 0) == 0,
          "embedder must be 'stub' or 'cache:<path>'");
  require(refiner == "stub" || refiner == "oracle",
          "refiner must be 'stub' or 'oracle'");
  loss_weights().validate();
}

TrainConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config parse: ") + e.what());
  }
  if (!j.is_object()) throw DataError("config must be a JSON object");

  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_primitive() || it.value().is_null())
      throw ConfigError(it.key() + ": config is flat, values are scalars");
    assign_json(c, field(it.key()), it.value());
  }
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path + ": cannot open config");
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return config_from_json(text);
}

std::string config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& f : fields())
    std::visit([&](auto ptr) { j[f.key] = c.*ptr; }, f.ptr);
  return j.dump(2) + "\n";
}

void save_config(const TrainConfig& c, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  f << config_to_json(c);
  if (!f) throw DataError(path + ": write failed");
}

void apply_override(TrainConfig& c, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got: " + kv);
  const Field& f = field(kv.substr(0, eq));
  std::string val = kv.substr(eq + 1);

  std::visit(
      [&](auto ptr) {
        using T = std::remove_reference_t<decltype(c.*ptr)>;
        try {
          if constexpr (std::is_same_v<T, bool>) {
            if (val == "true" || val == "1")
              c.*ptr = true;
            else if (val == "false" || val == "0")
              c.*ptr = false;
            else
              throw ConfigError("");
          } else if constexpr (std::is_same_v<T, std::string>) {
            c.*ptr = val;
          } else if constexpr (std::is_same_v<T, int>) {
            std::size_t used = 0;
            int parsed = std::stoi(val, &used);
            if (used != val.size()) throw ConfigError("");
            c.*ptr = parsed;
          } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            std::size_t used = 0;
            unsigned long long parsed = std::stoull(val, &used);
            if (used != val.size()) throw ConfigError("");
            c.*ptr = parsed;
          } else {
            std::size_t used = 0;
            float parsed = std::stof(val, &used);
            if (used != val.size()) throw ConfigError("");
            c.*ptr = parsed;
          }
        } catch (const ConfigError&) {
          throw ConfigError(std::string(f.key) + ": cannot parse value '" +
                            val + "'");
        } catch (const std::exception&) {
          throw ConfigError(std::string(f.key) + ": cannot parse value '" +
                            val + "'");
        }
      },
      f.ptr);
}

std::string resolved_run_dir(const TrainConfig& c) {
  const char* root = std::getenv("SSL_RUN_DIR");
  std::filesystem::path p(c.run_dir);
  if (root && *root && p.is_relative())
    return (std::filesystem::path(root) / p).string();
  return p.string();
}

}  // namespace zssl::cfg
