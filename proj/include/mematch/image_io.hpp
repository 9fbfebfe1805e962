#pragma once

#include <string>
#include <vector>

#include "mematch/error.hpp"

namespace mematch {

// Decoded image, channel-planar [C,H,W], values scaled to [0,1].
struct RawImage {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

// Dispatches on extension: .pgm/.ppm (P2/P5/P6/P3, 8-bit) and .png.
RawImage load_image(const std::string& path);

bool is_supported_image(const std::string& filename);

// 8-bit binary PGM writer (grayscale only), used by tests and conversion docs.
void write_pgm(const RawImage& img, const std::string& path);

// Bilinear resampling to the requested geometry.
RawImage resize_bilinear(const RawImage& img, int out_h, int out_w);

// Rotate by quarter_turns * 90 degrees counterclockwise; exact pixel
// permutation, no resampling.
RawImage rotate90(const RawImage& img, int quarter_turns);

// Grayscale reduction by channel mean (identity for single-channel input).
RawImage to_grayscale(const RawImage& img);

}  // namespace mematch
