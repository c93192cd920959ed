#include "cpdnet/image_io.hpp"

#include "cpdnet/errors.hpp"

#include <png.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace cpdnet::io {

namespace {

ImageU8 read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("read_png: cannot open '" + path + "'");
  auto closer = std::unique_ptr<std::FILE, int (*)(std::FILE*)>(fp, std::fclose);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("read_png: init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("read_png: init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("read_png: corrupt PNG '" + path + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int channels = static_cast<int>(png_get_channels(png, info));
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("read_png: unsupported channel count in '" + path + "'");
  }

  ImageU8 img;
  img.h = h;
  img.w = w;
  img.channels = channels;
  img.pixels.resize(static_cast<std::size_t>(h) * w * channels);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) {
    rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * w * channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void skip_pnm_space(std::istream& is) {
  while (true) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

ImageU8 read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_pgm: cannot open '" + path + "'");
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (magic != "P5" && magic != "P2") {
    throw DataError("read_pgm: '" + path + "' is not a PGM file");
  }
  skip_pnm_space(is);
  int w = 0, h = 0, maxval = 0;
  is >> w;
  skip_pnm_space(is);
  is >> h;
  skip_pnm_space(is);
  is >> maxval;
  if (!is || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw DataError("read_pgm: bad header in '" + path + "'");
  }
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(h) * w);
  if (magic == "P5") {
    is.get();  // single whitespace after maxval
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw DataError("read_pgm: truncated data in '" + path + "'");
  } else {
    for (auto& px : img.pixels) {
      int v;
      is >> v;
      if (!is) throw DataError("read_pgm: truncated data in '" + path + "'");
      px = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("read_image: cannot open '" + path + "'");
  unsigned char sig[8] = {0};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '2')) return read_pgm(path);
  throw DataError("read_image: '" + path + "' is neither PNG nor PGM");
}

void write_gray_png(const std::string& path, int h, int w,
                    const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("write_gray_png: pixel buffer size mismatch");
  }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("write_gray_png: cannot open '" + path + "'");
  auto closer = std::unique_ptr<std::FILE, int (*)(std::FILE*)>(fp, std::fclose);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("write_gray_png: init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("write_gray_png: init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("write_gray_png: write to '" + path + "' failed");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the byte stream reproducible across runs.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_gray_pgm(const std::string& path, int h, int w,
                    const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("write_gray_pgm: pixel buffer size mismatch");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("write_gray_pgm: cannot open '" + path + "'");
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!os) throw DataError("write_gray_pgm: write to '" + path + "' failed");
}

bool has_image_extension(const std::string& filename) {
  const auto dot = filename.find_last_of('.');
  if (dot == std::string::npos) return false;
  std::string ext = filename.substr(dot + 1);
  for (char& c : ext) c = static_cast<char>(std::tolower(c));
  return ext == "png" || ext == "pgm";
}

}  // namespace cpdnet::io
