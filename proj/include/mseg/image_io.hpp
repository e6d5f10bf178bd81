#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mseg/tensor.hpp"

namespace mseg {

/// Interleaved 8-bit samples, row-major.
struct ImageBuffer {
  Index width = 0;
  Index height = 0;
  Index channels = 3;
  std::vector<std::uint8_t> samples;

  std::uint8_t at(Index y, Index x, Index c) const {
    return samples[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

enum class ImageFormat { Ppm, Pgm };

/// Binary PPM (P6) or PGM (P5), maxval 255; header comments are allowed.
/// Throws FormatError: BadMagic, BadHeader, BadMaxval or Truncated.
ImageBuffer read_image(std::span<const std::uint8_t> bytes);
/// As above, also requiring the given format.
ImageBuffer read_image(std::span<const std::uint8_t> bytes, ImageFormat format);
/// P6 for 3 channels, P5 for 1.
std::vector<std::uint8_t> write_image(const ImageBuffer& image);

ImageBuffer load_image(const std::filesystem::path& path);
void save_image(const ImageBuffer& image, const std::filesystem::path& path);

/// A binary 1x1xHxW mask as a P5 image with samples 0/255.
std::vector<std::uint8_t> write_mask(const Tensor4f& mask);
/// Ground-truth mask (1 where the first channel is >= 128), 1x1xHxW.
Tensor4f mask_from_image(const ImageBuffer& image);

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

/// Bilinear resize to target_h x target_w (>= 64), scale to [0, 1], then
/// (x - mean) / std per channel. Returns 1x3xHxW.
Tensor4f preprocess(const ImageBuffer& image, Index target_h, Index target_w, const Normalization& norm = {});

}  // namespace mseg
