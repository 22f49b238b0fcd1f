#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "zssl/phantom.hpp"
#include "zssl/rng.hpp"

namespace zssl::anchor {

inline constexpr int kChdClasses = phantom::kChdClasses;

// Produces unit-norm feature vectors; the adapter boundary for swapping in
// offline foundation-model embeddings.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dim() const = 0;
  // id lets cache-backed embedders look up precomputed vectors.
  virtual std::vector<float> embed(const Tensor& image,
                                   const std::string& id) const = 0;
};

// Seeded fixed random projection of a 16x16 area-downsampled image,
// L2-normalized. Deterministic stand-in for a foundation model.
class StubEmbedder : public Embedder {
 public:
  explicit StubEmbedder(std::uint64_t seed, int d = 64);
  int dim() const override { return d_; }
  std::vector<float> embed(const Tensor& image,
                           const std::string& id) const override;

 private:
  int d_;
  std::vector<float> proj_;  // d_ x 256
};

// Reads the embedding cache file; embed() looks vectors up by sample id.
class CacheEmbedder : public Embedder {
 public:
  explicit CacheEmbedder(const std::string& path);
  int dim() const override { return d_; }
  std::vector<float> embed(const Tensor& image,
                           const std::string& id) const override;

 private:
  int d_ = 0;
  std::string path_;
  std::unordered_map<std::string, std::vector<float>> cache_;
};

// Cache file: per record, u16 LE id length, id bytes, u32 LE D, then D
// little-endian f32 values.
void write_embedding_cache(
    const std::string& path, const std::vector<std::string>& ids,
    const std::vector<std::vector<float>>& embeddings);
std::unordered_map<std::string, std::vector<float>> read_embedding_cache(
    const std::string& path);

struct PrototypeBank {
  int dim = 0;
  std::array<std::vector<float>, kChdClasses> proto;  // empty when absent
  std::array<int, kChdClasses> count{};
  std::array<bool, kChdClasses> degenerate{};  // zero-mean members

  bool present(int cls) const {
    return !proto[static_cast<std::size_t>(cls)].empty();
  }
};

// Classwise mean then renormalize; means with near-zero norm are flagged
// degenerate and treated as absent.
PrototypeBank build_prototypes(const std::vector<std::vector<float>>& embs,
                               const std::vector<int>& labels);

enum class Reject { None, BelowThreshold, PrototypeMismatch, ClassAbsent };

const char* reject_name(Reject r);

struct Verdict {
  bool accept = false;
  Reject reason = Reject::None;
  double cos = 0.0;       // cosine to the pseudo-class prototype
  int argmax_class = -1;  // best prototype over present classes
};

// Accept iff cos(embedding, prototype[pseudo_class]) >= theta_cos and, when
// require_argmax is set, pseudo_class also wins the prototype argmax.
Verdict filter_pseudo(const std::vector<float>& embedding, int pseudo_class,
                      const PrototypeBank& bank, double theta_cos,
                      bool require_argmax = true);

// Linear D -> 7 head trained on frozen embeddings (Stage 1 probe).
struct ProbeHead {
  int in_dim = 0;
  std::vector<float> w;  // 7 x D row-major
  std::vector<float> b;  // 7

  std::vector<float> logits(const std::vector<float>& emb) const;
  int predict(const std::vector<float>& emb) const;  // lowest-index tie-break
};

// Full-batch softmax-CE gradient descent on the head only; the embeddings
// are inputs, so the embedder is untouched by construction.
ProbeHead train_probe(const std::vector<std::vector<float>>& embs,
                      const std::vector<int>& labels, int epochs, double lr,
                      std::uint64_t seed);

}  // namespace zssl::anchor
