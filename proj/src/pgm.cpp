#include "zssl/pgm.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace zssl::pgm {

namespace {

[[noreturn]] void fail(const std::string& path, std::size_t off,
                       const std::string& what) {
  throw DataError(path + ": " + what + " at byte " + std::to_string(off));
}

// Cursor over the raw file bytes; PGM headers are whitespace-separated
// tokens with '#' comments.
struct Cursor {
  const std::string& path;
  const std::string& buf;
  std::size_t pos = 0;

  bool eof() const { return pos >= buf.size(); }

  void skip_space() {
    while (!eof()) {
      char c = buf[pos];
      if (c == '#') {
        while (!eof() && buf[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int read_int(const char* what) {
    skip_space();
    if (eof()) fail(path, pos, std::string("expected ") + what + ", got EOF");
    if (buf[pos] < '0' || buf[pos] > '9')
      fail(path, pos, std::string("expected ") + what);
    long v = 0;
    while (!eof() && buf[pos] >= '0' && buf[pos] <= '9') {
      v = v * 10 + (buf[pos] - '0');
      if (v > 1 << 30) fail(path, pos, std::string(what) + " out of range");
      ++pos;
    }
    return static_cast<int>(v);
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Parses the P5 header and returns (h, w, maxval, data offset).
void read_header(const std::string& path, const std::string& buf, int& h,
                 int& w, int& maxval, std::size_t& data_offset) {
  Cursor c{path, buf};
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5')
    fail(path, 0, "not a P5 PGM (bad magic)");
  c.pos = 2;
  w = c.read_int("width");
  h = c.read_int("height");
  maxval = c.read_int("maxval");
  if (w <= 0 || h <= 0) fail(path, c.pos, "non-positive dimensions");
  if (c.eof()) fail(path, c.pos, "expected whitespace before pixel data");
  char sep = buf[c.pos];
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
    fail(path, c.pos, "expected single whitespace before pixel data");
  data_offset = c.pos + 1;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path + ": cannot open for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError(path + ": write failed");
}

}  // namespace

void write_pgm8(const std::string& path, const std::uint8_t* px, int h, int w,
                int maxval) {
  if (h <= 0 || w <= 0) throw DimError("write_pgm8: non-positive dims");
  if (maxval < 1 || maxval > 255)
    throw ConfigError("write_pgm8: maxval must be in [1,255]");
  std::string out;
  char head[64];
  std::snprintf(head, sizeof(head), "P5\n%d %d\n%d\n", w, h, maxval);
  out = head;
  out.append(reinterpret_cast<const char*>(px),
             static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  write_file(path, out);
}

void write_pgm16(const std::string& path, const std::uint16_t* px, int h,
                 int w) {
  if (h <= 0 || w <= 0) throw DimError("write_pgm16: non-positive dims");
  std::string out;
  char head[64];
  std::snprintf(head, sizeof(head), "P5\n%d %d\n65535\n", w, h);
  out = head;
  std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  out.reserve(out.size() + 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<char>(px[i] >> 8));  // big-endian
    out.push_back(static_cast<char>(px[i] & 0xff));
  }
  write_file(path, out);
}

Pgm8 read_pgm8(const std::string& path) {
  std::string buf = slurp(path);
  Pgm8 out;
  int maxval = 0;
  read_header(path, buf, out.h, out.w, maxval, out.data_offset);
  if (maxval < 1 || maxval > 255)
    fail(path, out.data_offset, "maxval not in [1,255] for 8-bit PGM");
  std::size_t n =
      static_cast<std::size_t>(out.h) * static_cast<std::size_t>(out.w);
  if (buf.size() - out.data_offset < n)
    fail(path, buf.size(), "truncated pixel data");
  out.px.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.px[i] = static_cast<std::uint8_t>(buf[out.data_offset + i]);
  return out;
}

Pgm16 read_pgm16(const std::string& path) {
  std::string buf = slurp(path);
  Pgm16 out;
  int maxval = 0;
  read_header(path, buf, out.h, out.w, maxval, out.data_offset);
  if (maxval != 65535)
    fail(path, out.data_offset, "expected maxval 65535 for 16-bit PGM");
  std::size_t n =
      static_cast<std::size_t>(out.h) * static_cast<std::size_t>(out.w);
  if (buf.size() - out.data_offset < 2 * n)
    fail(path, buf.size(), "truncated pixel data");
  out.px.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto hi = static_cast<std::uint8_t>(buf[out.data_offset + 2 * i]);
    auto lo = static_cast<std::uint8_t>(buf[out.data_offset + 2 * i + 1]);
    out.px[i] = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  return out;
}

}  // namespace zssl::pgm
