#include "zssl/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include "json.hpp"
#include "zssl/pgm.hpp"
#include "zssl/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace zssl::data {

namespace {

std::string sample_path(const std::string& root, const ManifestEntry& e,
                        const char* suffix) {
  return root + "/" + e.split + "/" + e.id + suffix;
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path + ": cannot open for reading");
  json j;
  try {
    f >> j;
  } catch (const json::exception& ex) {
    throw DataError(path + ": " + ex.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  f << text;
  if (!f) throw DataError(path + ": write failed");
}

ManifestEntry entry_from_json(const std::string& where, const json& j) {
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    e.split = j.at("split").get<std::string>();
    e.view = anatomask::view_from_name(j.at("view").get<std::string>());
    e.chd = j.at("chd").get<int>();
    e.labeled = j.at("labeled").get<bool>();
  } catch (const json::exception& ex) {
    throw DataError(where + ": " + ex.what());
  }
  if (e.chd < 0 || e.chd >= phantom::kChdClasses)
    throw DataError(where + ": chd class " + std::to_string(e.chd) +
                    " out of range");
  return e;
}

}  // namespace

bool operator==(const ManifestEntry& a, const ManifestEntry& b) {
  return a.id == b.id && a.split == b.split && a.view == b.view &&
         a.chd == b.chd && a.labeled == b.labeled;
}

bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
  return a.seed == b.seed && a.entries == b.entries;
}

std::vector<int> DatasetManifest::split_indices(
    const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> DatasetManifest::train_labeled() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == "train" && entries[i].labeled)
      out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> DatasetManifest::train_unlabeled() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == "train" && !entries[i].labeled)
      out.push_back(static_cast<int>(i));
  return out;
}

DatasetManifest generate_dataset(const SplitCounts& counts, std::uint64_t seed,
                                 const std::string& root) {
  if (counts.labeled_train <= 0 || counts.unlabeled_train < 0 ||
      counts.val <= 0 || counts.test <= 0)
    throw ConfigError("generate_dataset: counts must be positive");

  DatasetManifest m;
  m.root = root;
  m.seed = seed;
  Rng rng = Rng::stream(seed, rng_tag::kDataGen, 0xD5);

  auto add = [&](int count, const char* split, bool labeled) {
    for (int i = 0; i < count; ++i) {
      ManifestEntry e;
      char id[16];
      std::snprintf(id, sizeof(id), "%06d", static_cast<int>(m.entries.size()));
      e.id = id;
      e.split = split;
      e.view = anatomask::view_from_index(rng.uniform_int(anatomask::kNumViews));
      e.chd = rng.uniform() < 0.4 ? 0 : 1 + rng.uniform_int(6);
      e.labeled = labeled;
      m.entries.push_back(std::move(e));
    }
  };
  add(counts.labeled_train, "train", true);
  add(counts.unlabeled_train, "train", false);
  add(counts.val, "val", true);
  add(counts.test, "test", true);
  return m;
}

Sample synth_sample(const DatasetManifest& m, int idx,
                    const PhantomParams& p) {
  if (idx < 0 || idx >= static_cast<int>(m.entries.size()))
    throw ConfigError("synth_sample: index out of range");
  const ManifestEntry& e = m.entries[static_cast<std::size_t>(idx)];
  Sample s = phantom::generate_phantom(
      Rng::mix(m.seed, static_cast<std::uint64_t>(idx)), e.view, e.chd, p);
  s.labeled = e.labeled;
  return s;
}

void save_sample(const std::string& root, const ManifestEntry& e,
                 const Sample& s) {
  fs::create_directories(root + "/" + e.split);
  int h = s.h(), w = s.w();
  std::vector<std::uint16_t> q(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < q.size(); ++i) {
    float v = std::clamp(s.image.data[i], 0.0f, 1.0f);
    q[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
  }
  pgm::write_pgm16(sample_path(root, e, ".img.pgm"), q.data(), h, w);
  pgm::write_pgm8(sample_path(root, e, ".mask.pgm"), s.mask.data(), h, w);
  json j = {{"view", anatomask::view_name(s.view)},
            {"chd", s.chd},
            {"labeled", s.labeled}};
  write_text_file(sample_path(root, e, ".json"), j.dump(2) + "\n");
}

Sample load_sample(const std::string& root, const ManifestEntry& e) {
  std::string img_path = sample_path(root, e, ".img.pgm");
  std::string mask_path = sample_path(root, e, ".mask.pgm");
  pgm::Pgm16 img = pgm::read_pgm16(img_path);
  pgm::Pgm8 mask = pgm::read_pgm8(mask_path);
  if (img.h != mask.h || img.w != mask.w)
    throw DataError(mask_path + ": mask dims " + std::to_string(mask.w) + "x" +
                    std::to_string(mask.h) + " do not match image");
  for (std::size_t i = 0; i < mask.px.size(); ++i) {
    if (mask.px[i] >= anatomask::kNumSegClasses)
      throw DataError(mask_path + ": mask value " +
                      std::to_string(int(mask.px[i])) +
                      " exceeds max class 14 at byte " +
                      std::to_string(mask.data_offset + i));
  }

  Sample s;
  std::vector<float> px(img.px.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<float>(img.px[i]) / 65535.0f;
  s.image = Tensor::from({1, img.h, img.w}, std::move(px));
  s.mask = std::move(mask.px);

  json j = read_json_file(sample_path(root, e, ".json"));
  std::string where = sample_path(root, e, ".json");
  try {
    s.view = anatomask::view_from_name(j.at("view").get<std::string>());
    s.chd = j.at("chd").get<int>();
    s.labeled = j.at("labeled").get<bool>();
  } catch (const json::exception& ex) {
    throw DataError(where + ": " + ex.what());
  }
  if (s.chd < 0 || s.chd >= phantom::kChdClasses)
    throw DataError(where + ": chd class out of range");
  return s;
}

void write_manifest(const DatasetManifest& m) {
  fs::create_directories(m.root);
  json samples = json::array();
  for (const auto& e : m.entries) {
    samples.push_back({{"id", e.id},
                       {"split", e.split},
                       {"view", anatomask::view_name(e.view)},
                       {"chd", e.chd},
                       {"labeled", e.labeled}});
  }
  json j = {{"seed", m.seed}, {"samples", samples}};
  write_text_file(m.root + "/manifest.json", j.dump(2) + "\n");
}

void write_dataset(const DatasetManifest& m, const PhantomParams& p) {
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    save_sample(m.root, m.entries[i], synth_sample(m, static_cast<int>(i), p));
  write_manifest(m);
}

DatasetManifest read_dataset(const std::string& root) {
  std::string path = root + "/manifest.json";
  json j = read_json_file(path);
  DatasetManifest m;
  m.root = root;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& js : j.at("samples"))
      m.entries.push_back(entry_from_json(path, js));
  } catch (const json::exception& ex) {
    throw DataError(path + ": " + ex.what());
  }

  std::unordered_set<std::string> seen;
  for (const auto& e : m.entries) {
    if (!seen.insert(e.id).second)
      throw DataError(path + ": duplicate sample id " + e.id);
    for (const char* suffix : {".img.pgm", ".mask.pgm", ".json"}) {
      std::string sp = sample_path(root, e, suffix);
      if (!fs::exists(sp)) throw DataError(path + ": missing file " + sp);
    }
  }
  return m;
}

}  // namespace zssl::data
