#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cpdnet::io {

struct ImageU8 {
  int h = 0;
  int w = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb), interleaved row-major
  std::vector<std::uint8_t> pixels;
};

// PNG or PGM, decided by content sniffing. 16-bit and paletted PNGs are
// expanded to 8-bit; alpha is stripped.
ImageU8 read_image(const std::string& path);

void write_gray_png(const std::string& path, int h, int w,
                    const std::vector<std::uint8_t>& pixels);
void write_gray_pgm(const std::string& path, int h, int w,
                    const std::vector<std::uint8_t>& pixels);

bool has_image_extension(const std::string& filename);

}  // namespace cpdnet::io
