#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace winlin {

// 8-bit raster, interleaved channels (1 = grayscale, 3 = RGB), row-major.
struct PnmImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Reads binary NetPBM: P5 (PGM) or P6 (PPM), maxval <= 255.
PnmImage read_pnm(const std::string& path);

// Writes P5 for 1-channel, P6 for 3-channel images.
void write_pnm(const std::string& path, const PnmImage& image);

}  // namespace winlin
