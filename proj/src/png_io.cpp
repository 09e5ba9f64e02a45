#include "softguard/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "softguard/errors.hpp"

namespace softguard {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw IoError("cannot open '" + path.string() + "' (" + mode + ")");
  }
  return f;
}

void check_image(const Image8& image, int channels, const char* op) {
  if (image.width < 1 || image.height < 1 || image.channels != channels ||
      image.bytes.size() != static_cast<std::size_t>(image.width) *
                                image.height * channels) {
    throw std::invalid_argument(std::string(op) + ": malformed image buffer");
  }
}

void write_png(const std::filesystem::path& path, const Image8& image,
               int color_type, const PngText& text) {
  FilePtr file = open_file(path, "wb");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng error while writing '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, image.width, image.height, 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> palette;
  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    palette.resize(256);
    for (int i = 0; i < 256; ++i) {
      const auto c = voc_color(i);
      palette[i] = png_color{c[0], c[1], c[2]};
    }
    png_set_PLTE(png, info, palette.data(), 256);
  }
  std::vector<png_text> chunks;
  for (const auto& [key, value] : text) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = const_cast<char*>(key.c_str());
    t.text = const_cast<char*>(value.c_str());
    t.text_length = value.size();
    chunks.push_back(t);
  }
  if (!chunks.empty()) {
    png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  }
  png_write_info(png, info);
  const std::size_t stride =
      static_cast<std::size_t>(image.width) * image.channels;
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.bytes.data() + y * stride);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(file.get()) != 0) {
    throw IoError("failed to flush '" + path.string() + "'");
  }
}

enum class ReadMode { Rgb, Indices };

Image8 read_png(const std::filesystem::path& path, ReadMode mode) {
  FilePtr file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a PNG file");
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  Image8 out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (depth < 8) png_set_packing(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  bool ok = true;
  if (mode == ReadMode::Rgb) {
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY ||
        color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
      png_set_gray_to_rgb(png);
    }
    out.channels = 3;
  } else {
    ok = color_type == PNG_COLOR_TYPE_PALETTE ||
         color_type == PNG_COLOR_TYPE_GRAY;
    out.channels = 1;
  }
  if (!ok) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("'" + path.string() + "' is not a palette or gray PNG");
  }
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(out.width) * out.channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected PNG layout in '" + path.string() + "'");
  }
  out.bytes.resize(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

std::array<std::uint8_t, 3> voc_color(int index) {
  std::array<std::uint8_t, 3> c{0, 0, 0};
  int label = index;
  for (int shift = 7; shift >= 0; --shift) {
    c[0] |= ((label >> 0) & 1) << shift;
    c[1] |= ((label >> 1) & 1) << shift;
    c[2] |= ((label >> 2) & 1) << shift;
    label >>= 3;
  }
  return c;
}

void write_gray_png(const std::filesystem::path& path, const Image8& image,
                    const PngText& text) {
  check_image(image, 1, "write_gray_png");
  write_png(path, image, PNG_COLOR_TYPE_GRAY, text);
}

void write_rgb_png(const std::filesystem::path& path, const Image8& image,
                   const PngText& text) {
  check_image(image, 3, "write_rgb_png");
  write_png(path, image, PNG_COLOR_TYPE_RGB, text);
}

void write_palette_png(const std::filesystem::path& path, const Image8& image,
                       const PngText& text) {
  check_image(image, 1, "write_palette_png");
  write_png(path, image, PNG_COLOR_TYPE_PALETTE, text);
}

Image8 read_png_rgb(const std::filesystem::path& path) {
  return read_png(path, ReadMode::Rgb);
}

Image8 read_png_indices(const std::filesystem::path& path) {
  return read_png(path, ReadMode::Indices);
}

}  // namespace softguard
