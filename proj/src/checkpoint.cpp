#include "zssl/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace zssl::ckpt {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t crc(const std::string& buf, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()),
            static_cast<uInt>(n)));
}

struct Reader {
  const std::string& path;
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n)
      throw DataError(path + ": truncated " + what + " at byte " +
                      std::to_string(pos));
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                      (static_cast<std::uint16_t>(
                           static_cast<std::uint8_t>(buf[pos + 1]))
                       << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + (std::size_t)i]))
           << (8 * i);
    pos += 4;
    return v;
  }
};

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<NamedTensor>& tensors) {
  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));

  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > 0xffff)
      throw ConfigError("write_checkpoint: bad tensor name length");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.shape.rank));
    for (int d = 0; d < t.shape.rank; ++d)
      put_u32(out, static_cast<std::uint32_t>(t.shape[d]));
    std::size_t base = out.size();
    out.resize(base + t.data.size() * 4);
    std::memcpy(out.data() + base, t.data.data(), t.data.size() * 4);
  }
  put_u32(out, crc(out, out.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError(path + ": write failed");
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot open for reading");
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 2 + 4 + 4)
    throw DataError(path + ": too short for a checkpoint");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(path + ": bad magic");

  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(
                      static_cast<std::uint8_t>(buf[buf.size() - 4 + (std::size_t)i]))
                  << (8 * i);
  if (crc(buf, buf.size() - 4) != stored_crc)
    throw DataError(path + ": CRC mismatch, refusing to load");

  Reader r{path, buf, sizeof kMagic};
  std::uint16_t version = r.u16("version");
  if (version != kVersion)
    throw DataError(path + ": unsupported checkpoint version " +
                    std::to_string(version));
  std::uint32_t count = r.u32("tensor count");

  std::vector<NamedTensor> out;
  out.reserve(count);
  std::size_t payload_end = buf.size() - 4;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = r.u16("name length");
    r.need(name_len, "name");
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;

    r.need(1, "rank");
    int rank = static_cast<std::uint8_t>(buf[r.pos++]);
    if (rank < 1 || rank > 4)
      throw DataError(path + ": tensor " + name + " has invalid rank " +
                      std::to_string(rank));
    Shape shape;
    shape.rank = rank;
    std::int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      std::uint32_t dim = r.u32("dim");
      if (dim == 0 || dim > (1u << 28))
        throw DataError(path + ": tensor " + name + " has invalid dim");
      shape.d[static_cast<std::size_t>(d)] = static_cast<int>(dim);
      numel *= dim;
    }
    r.need(static_cast<std::size_t>(numel) * 4, "payload");
    std::vector<float> data(static_cast<std::size_t>(numel));
    std::memcpy(data.data(), buf.data() + r.pos, data.size() * 4);
    r.pos += data.size() * 4;
    out.push_back({std::move(name), Tensor::from(shape, std::move(data))});
  }
  if (r.pos != payload_end)
    throw DataError(path + ": " + std::to_string(payload_end - r.pos) +
                    " trailing bytes after the last tensor");
  return out;
}

void save_nets(const std::string& path, const model::MultiTaskNet& student,
               const model::MultiTaskNet& teacher) {
  std::vector<NamedTensor> all;
  for (const auto& n : student.param_names())
    all.push_back({"student." + n, *student.param(n)});
  for (const auto& n : teacher.param_names())
    all.push_back({"teacher." + n, *teacher.param(n)});
  write_checkpoint(path, all);
}

void load_net(const std::vector<NamedTensor>& tensors,
              const std::string& prefix, model::MultiTaskNet& net) {
  std::size_t found = 0;
  for (const auto& [name, t] : tensors) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    TensorRef p = net.param(name.substr(prefix.size()));  // throws on unknown
    if (!(p->shape == t.shape))
      throw DimError("load_net: shape mismatch for " + name);
    p->data = t.data;
    found++;
  }
  if (found != net.param_names().size())
    throw DataError("load_net: checkpoint covers " + std::to_string(found) +
                    " of " + std::to_string(net.param_names().size()) +
                    " parameters under prefix " + prefix);
}

void load_nets(const std::string& path, model::MultiTaskNet& student,
               model::MultiTaskNet& teacher) {
  auto all = read_checkpoint(path);
  load_net(all, "student.", student);
  load_net(all, "teacher.", teacher);
}

}  // namespace zssl::ckpt
