#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace softguard {

/// 8-bit interleaved pixels: 1 channel (gray or palette index) or 3 (RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> bytes;
};

using PngText = std::vector<std::pair<std::string, std::string>>;

void write_gray_png(const std::filesystem::path& path, const Image8& image,
                    const PngText& text = {});
void write_rgb_png(const std::filesystem::path& path, const Image8& image,
                   const PngText& text = {});
/// Single-channel label image written as a palette PNG (VOC colormap).
void write_palette_png(const std::filesystem::path& path, const Image8& image,
                       const PngText& text = {});

/// Reads any 8-bit PNG, converting to RGB.
Image8 read_png_rgb(const std::filesystem::path& path);
/// Reads a palette or gray PNG as raw indices, one channel.
Image8 read_png_indices(const std::filesystem::path& path);

/// The PASCAL VOC label colormap entry for index i.
std::array<std::uint8_t, 3> voc_color(int index);

}  // namespace softguard
