#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zssl/phantom.hpp"

namespace zssl::data {

using phantom::PhantomParams;
using phantom::Sample;

struct ManifestEntry {
  std::string id;     // unique across the dataset
  std::string split;  // train | val | test
  anatomask::View view = anatomask::View::FourCH;
  int chd = 0;
  bool labeled = true;
};

struct DatasetManifest {
  std::string root;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<int> split_indices(const std::string& split) const;
  std::vector<int> train_labeled() const;
  std::vector<int> train_unlabeled() const;
};

bool operator==(const ManifestEntry& a, const ManifestEntry& b);
bool operator==(const DatasetManifest& a, const DatasetManifest& b);

struct SplitCounts {
  int labeled_train = 200;
  int unlabeled_train = 400;
  int val = 100;
  int test = 100;
};

// Decides ids/views/CHD classes/flags; no pixels are generated. Views are
// uniform; CHD is 40% class 0 and uniform over 1..6 otherwise.
DatasetManifest generate_dataset(const SplitCounts& counts, std::uint64_t seed,
                                 const std::string& root);

// In-memory phantom for one manifest entry (same pixels write_dataset emits).
Sample synth_sample(const DatasetManifest& m, int idx,
                    const PhantomParams& p = {});

// Directory layout: root/{split}/{id}.img.pgm / .mask.pgm / .json, plus
// manifest.json at the root.
void write_dataset(const DatasetManifest& m, const PhantomParams& p = {});
void write_manifest(const DatasetManifest& m);
DatasetManifest read_dataset(const std::string& root);

Sample load_sample(const std::string& root, const ManifestEntry& e);
void save_sample(const std::string& root, const ManifestEntry& e,
                 const Sample& s);

}  // namespace zssl::data
