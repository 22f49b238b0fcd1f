#include "zssl/semanchor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace zssl::anchor {

namespace {

constexpr int kPatch = 16;  // downsample target, kPatch*kPatch inputs

void l2_normalize(std::vector<float>& v) {
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  double norm = std::sqrt(ss);
  if (norm < 1e-12) return;  // caller decides what a zero vector means
  for (float& x : v) x = static_cast<float>(x / norm);
}

std::vector<double> unit_double(const std::vector<float>& v) {
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  double norm = std::sqrt(ss);
  std::vector<double> out(v.size());
  if (norm > 0.0)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
  return out;
}

// Bitwise-equal inputs renormalize identically, so a self-match lands within
// rounding of 1; snapping makes cos == 1.0 hold exactly there.
double cosine(const std::vector<double>& ua, const std::vector<double>& ub) {
  double s = 0.0;
  for (std::size_t i = 0; i < ua.size(); ++i) s += ua[i] * ub[i];
  if (s > 1.0 - 1e-12) return 1.0;
  if (s < -1.0 + 1e-12) return -1.0;
  return s;
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

StubEmbedder::StubEmbedder(std::uint64_t seed, int d) : d_(d) {
  if (d <= 0) throw ConfigError("StubEmbedder: dim must be positive");
  proj_.resize(static_cast<std::size_t>(d) * kPatch * kPatch);
  Rng rng = Rng::stream(seed, rng_tag::kEmbed);
  for (float& v : proj_) v = static_cast<float>(rng.normal());
}

std::vector<float> StubEmbedder::embed(const Tensor& image,
                                       const std::string&) const {
  if (image.shape.rank != 3 || image.shape[0] != 1)
    throw DimError("StubEmbedder: image must be 1xHxW");
  int h = image.shape[1], w = image.shape[2];

  // Area downsample to kPatch x kPatch: mean over each cell.
  std::array<double, kPatch * kPatch> cells{};
  std::array<std::int64_t, kPatch * kPatch> counts{};
  for (int y = 0; y < h; ++y) {
    int cy = std::min(kPatch - 1, y * kPatch / h);
    for (int x = 0; x < w; ++x) {
      int cx = std::min(kPatch - 1, x * kPatch / w);
      cells[static_cast<std::size_t>(cy) * kPatch + cx] +=
          image.data[static_cast<std::size_t>(y) * w + x];
      counts[static_cast<std::size_t>(cy) * kPatch + cx]++;
    }
  }
  for (int i = 0; i < kPatch * kPatch; ++i)
    if (counts[static_cast<std::size_t>(i)])
      cells[static_cast<std::size_t>(i)] /= counts[static_cast<std::size_t>(i)];

  std::vector<float> out(static_cast<std::size_t>(d_));
  for (int r = 0; r < d_; ++r) {
    double acc = 0.0;
    const float* row = proj_.data() + static_cast<std::size_t>(r) * kPatch * kPatch;
    for (int i = 0; i < kPatch * kPatch; ++i)
      acc += row[i] * cells[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(r)] = static_cast<float>(acc);
  }
  l2_normalize(out);
  return out;
}

CacheEmbedder::CacheEmbedder(const std::string& path) : path_(path) {
  cache_ = read_embedding_cache(path);
  if (cache_.empty()) throw DataError(path + ": empty embedding cache");
  d_ = static_cast<int>(cache_.begin()->second.size());
  for (const auto& [id, v] : cache_)
    if (static_cast<int>(v.size()) != d_)
      throw DataError(path + ": inconsistent dims for id " + id);
}

std::vector<float> CacheEmbedder::embed(const Tensor&,
                                        const std::string& id) const {
  auto it = cache_.find(id);
  if (it == cache_.end())
    throw DataError(path_ + ": no cached embedding for id " + id);
  return it->second;
}

void write_embedding_cache(
    const std::string& path, const std::vector<std::string>& ids,
    const std::vector<std::vector<float>>& embeddings) {
  if (ids.size() != embeddings.size())
    throw DimError("write_embedding_cache: ids/embeddings size mismatch");
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].size() > 0xffff)
      throw DataError("write_embedding_cache: id too long");
    put_u16(out, static_cast<std::uint16_t>(ids[i].size()));
    out += ids[i];
    put_u32(out, static_cast<std::uint32_t>(embeddings[i].size()));
    for (float v : embeddings[i]) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError(path + ": write failed");
}

std::unordered_map<std::string, std::vector<float>> read_embedding_cache(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot open for reading");
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  std::unordered_map<std::string, std::vector<float>> out;
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (buf.size() - pos < n)
      throw DataError(path + ": truncated record at byte " +
                      std::to_string(pos));
  };
  while (pos < buf.size()) {
    need(2);
    std::uint16_t idlen = static_cast<std::uint8_t>(buf[pos]) |
                          (static_cast<std::uint8_t>(buf[pos + 1]) << 8);
    pos += 2;
    need(idlen);
    std::string id = buf.substr(pos, idlen);
    pos += idlen;
    need(4);
    std::uint32_t d = 0;
    for (int i = 0; i < 4; ++i)
      d |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + (std::size_t)i]))
           << (8 * i);
    pos += 4;
    need(4 * static_cast<std::size_t>(d));
    std::vector<float> v(d);
    std::memcpy(v.data(), buf.data() + pos, 4 * static_cast<std::size_t>(d));
    pos += 4 * static_cast<std::size_t>(d);
    out[id] = std::move(v);
  }
  return out;
}

PrototypeBank build_prototypes(const std::vector<std::vector<float>>& embs,
                               const std::vector<int>& labels) {
  if (embs.empty()) throw ConfigError("build_prototypes: empty input");
  if (embs.size() != labels.size())
    throw DimError("build_prototypes: embeddings/labels size mismatch");

  PrototypeBank bank;
  bank.dim = static_cast<int>(embs[0].size());
  std::array<std::vector<double>, kChdClasses> sums;
  for (std::size_t i = 0; i < embs.size(); ++i) {
    int c = labels[i];
    if (c < 0 || c >= kChdClasses)
      throw ConfigError("build_prototypes: label out of range");
    if (static_cast<int>(embs[i].size()) != bank.dim)
      throw DimError("build_prototypes: inconsistent embedding dims");
    auto& s = sums[static_cast<std::size_t>(c)];
    if (s.empty()) s.assign(static_cast<std::size_t>(bank.dim), 0.0);
    for (int k = 0; k < bank.dim; ++k)
      s[static_cast<std::size_t>(k)] += embs[i][static_cast<std::size_t>(k)];
    bank.count[static_cast<std::size_t>(c)]++;
  }

  for (int c = 0; c < kChdClasses; ++c) {
    auto& s = sums[static_cast<std::size_t>(c)];
    if (s.empty()) continue;
    double ss = 0.0;
    for (double v : s) ss += (v / bank.count[(std::size_t)c]) *
                             (v / bank.count[(std::size_t)c]);
    if (std::sqrt(ss) < 1e-8) {
      bank.degenerate[static_cast<std::size_t>(c)] = true;
      continue;  // absent: antipodal members cancelled out
    }
    std::vector<float> p(static_cast<std::size_t>(bank.dim));
    for (int k = 0; k < bank.dim; ++k)
      p[static_cast<std::size_t>(k)] =
          static_cast<float>(s[static_cast<std::size_t>(k)] /
                             bank.count[static_cast<std::size_t>(c)]);
    l2_normalize(p);
    bank.proto[static_cast<std::size_t>(c)] = std::move(p);
  }
  return bank;
}

const char* reject_name(Reject r) {
  switch (r) {
    case Reject::None: return "none";
    case Reject::BelowThreshold: return "below-threshold";
    case Reject::PrototypeMismatch: return "prototype-mismatch";
    case Reject::ClassAbsent: return "class-absent";
  }
  return "?";
}

Verdict filter_pseudo(const std::vector<float>& embedding, int pseudo_class,
                      const PrototypeBank& bank, double theta_cos,
                      bool require_argmax) {
  if (pseudo_class < 0 || pseudo_class >= kChdClasses)
    throw ConfigError("filter_pseudo: pseudo_class out of range");

  Verdict v;
  if (!bank.present(pseudo_class)) {
    v.reason = Reject::ClassAbsent;
    return v;
  }

  // Cosine, scale-invariant in the embedding.
  double ss = 0.0;
  for (float x : embedding) ss += static_cast<double>(x) * x;
  if (std::sqrt(ss) < 1e-12) {
    v.reason = Reject::BelowThreshold;
    return v;
  }
  std::vector<double> ue = unit_double(embedding);

  double best = -2.0;
  for (int c = 0; c < kChdClasses; ++c) {
    if (!bank.present(c)) continue;
    double cos = cosine(ue, unit_double(bank.proto[static_cast<std::size_t>(c)]));
    if (cos > best) {
      best = cos;
      v.argmax_class = c;
    }
    if (c == pseudo_class) v.cos = cos;
  }

  if (v.cos < theta_cos) {
    v.reason = Reject::BelowThreshold;
    return v;
  }
  if (require_argmax && v.argmax_class != pseudo_class) {
    v.reason = Reject::PrototypeMismatch;
    return v;
  }
  v.accept = true;
  return v;
}

std::vector<float> ProbeHead::logits(const std::vector<float>& emb) const {
  if (static_cast<int>(emb.size()) != in_dim)
    throw DimError("ProbeHead: embedding dim mismatch");
  std::vector<float> out(static_cast<std::size_t>(kChdClasses));
  for (int c = 0; c < kChdClasses; ++c) {
    double acc = b[static_cast<std::size_t>(c)];
    const float* row = w.data() + static_cast<std::size_t>(c) * in_dim;
    for (int k = 0; k < in_dim; ++k) acc += static_cast<double>(row[k]) * emb[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(c)] = static_cast<float>(acc);
  }
  return out;
}

int ProbeHead::predict(const std::vector<float>& emb) const {
  auto z = logits(emb);
  int best = 0;
  for (int c = 1; c < kChdClasses; ++c)
    if (z[static_cast<std::size_t>(c)] > z[static_cast<std::size_t>(best)])
      best = c;
  return best;
}

ProbeHead train_probe(const std::vector<std::vector<float>>& embs,
                      const std::vector<int>& labels, int epochs, double lr,
                      std::uint64_t seed) {
  if (embs.empty()) throw ConfigError("train_probe: empty labeled set");
  if (embs.size() != labels.size())
    throw DimError("train_probe: embeddings/labels size mismatch");

  ProbeHead head;
  head.in_dim = static_cast<int>(embs[0].size());
  head.w.resize(static_cast<std::size_t>(kChdClasses) * head.in_dim);
  head.b.assign(kChdClasses, 0.0f);
  Rng rng = Rng::stream(seed, rng_tag::kProbe);
  double scale = std::sqrt(2.0 / head.in_dim);
  for (float& v : head.w) v = static_cast<float>(rng.normal() * scale);

  std::size_t n = embs.size();
  std::vector<double> gw(head.w.size()), gb(kChdClasses);
  for (int e = 0; e < epochs; ++e) {
    if (lr == 0.0) break;
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      int y = labels[i];
      if (y < 0 || y >= kChdClasses)
        throw ConfigError("train_probe: label out of range");
      auto z = head.logits(embs[i]);
      double zmax = z[0];
      for (float v : z) zmax = std::max(zmax, static_cast<double>(v));
      double denom = 0.0;
      std::array<double, kChdClasses> p{};
      for (int c = 0; c < kChdClasses; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(z[static_cast<std::size_t>(c)] - zmax);
        denom += p[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < kChdClasses; ++c) {
        double g = p[static_cast<std::size_t>(c)] / denom - (c == y ? 1.0 : 0.0);
        gb[static_cast<std::size_t>(c)] += g;
        for (int k = 0; k < head.in_dim; ++k)
          gw[static_cast<std::size_t>(c) * head.in_dim + k] +=
              g * embs[i][static_cast<std::size_t>(k)];
      }
    }
    for (std::size_t k = 0; k < head.w.size(); ++k)
      head.w[k] -= static_cast<float>(lr * gw[k] / static_cast<double>(n));
    for (int c = 0; c < kChdClasses; ++c)
      head.b[static_cast<std::size_t>(c)] -=
          static_cast<float>(lr * gb[static_cast<std::size_t>(c)] / static_cast<double>(n));
  }
  return head;
}

}  // namespace zssl::anchor
