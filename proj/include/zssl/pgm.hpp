#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zssl/common.hpp"

namespace zssl::pgm {

// Binary PGM (P5). 16-bit samples are big-endian per the PNM spec.
// data_offset is the byte position of the first sample, kept so callers can
// report precise offsets for bad pixel values.
struct Pgm8 {
  int h = 0, w = 0;
  std::size_t data_offset = 0;
  std::vector<std::uint8_t> px;
};

struct Pgm16 {
  int h = 0, w = 0;
  std::size_t data_offset = 0;
  std::vector<std::uint16_t> px;
};

void write_pgm8(const std::string& path, const std::uint8_t* px, int h, int w,
                int maxval = 255);
void write_pgm16(const std::string& path, const std::uint16_t* px, int h,
                 int w);

// Throw DataError naming the file and byte offset on any malformed input.
Pgm8 read_pgm8(const std::string& path);
Pgm16 read_pgm16(const std::string& path);

}  // namespace zssl::pgm
