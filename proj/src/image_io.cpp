#include "mseg/image_io.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "mseg/error.hpp"
#include "mseg/ops.hpp"

namespace mseg {

namespace {

using Kind = FormatError::Kind;

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) throw FormatError(Kind::Truncated, std::string("image: header ends before ") + what);
    if (!std::isdigit(bytes_[pos_])) {
      throw FormatError(Kind::BadHeader, std::string("image: expected a decimal ") + what);
    }
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(Kind::BadHeader, std::string("image: ") + what + " is too large");
      ++pos_;
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void end_of_header() {
    if (pos_ >= bytes_.size()) throw FormatError(Kind::Truncated, "image: no raster after header");
    if (!std::isspace(bytes_[pos_])) throw FormatError(Kind::BadHeader, "image: header not followed by whitespace");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

ImageBuffer read_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw FormatError(Kind::BadMagic, "image: not a binary PPM (P6) or PGM (P5)");
  }
  ImageBuffer img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader r(bytes);
  r.advance(2);
  if (bytes.size() > 2 && !std::isspace(bytes[2]) && bytes[2] != '#') {
    throw FormatError(Kind::BadMagic, "image: unexpected byte after magic number");
  }
  img.width = r.number("width");
  img.height = r.number("height");
  if (img.width < 1 || img.height < 1) throw FormatError(Kind::BadHeader, "image: zero width or height");
  const long maxval = r.number("maxval");
  if (maxval != 255) throw FormatError(Kind::BadMaxval, "image: maxval " + std::to_string(maxval) + ", expected 255");
  r.end_of_header();
  const auto count = static_cast<std::size_t>(img.width * img.height * img.channels);
  const std::size_t available = bytes.size() - r.pos();
  if (available < count) {
    throw FormatError(Kind::Truncated, "image: raster has " + std::to_string(available) + " bytes, expected " +
                                           std::to_string(count));
  }
  img.samples.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos() + count));
  return img;
}

ImageBuffer read_image(std::span<const std::uint8_t> bytes, ImageFormat format) {
  ImageBuffer img = read_image(bytes);
  const Index want = format == ImageFormat::Ppm ? 3 : 1;
  if (img.channels != want) {
    throw FormatError(Kind::BadMagic, format == ImageFormat::Ppm ? "image: expected P6" : "image: expected P5");
  }
  return img;
}

std::vector<std::uint8_t> write_image(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw ShapeError("write_image: " + std::to_string(img.channels) + " channels, expected 1 or 3");
  }
  if (static_cast<Index>(img.samples.size()) != img.width * img.height * img.channels) {
    throw ShapeError("write_image: sample count does not match " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.channels));
  }
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.samples.begin(), img.samples.end());
  return out;
}

ImageBuffer load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return read_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

void save_image(const ImageBuffer& image, const std::filesystem::path& path) {
  const auto bytes = write_image(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<std::uint8_t> write_mask(const Tensor4f& mask) {
  if (mask.n() != 1 || mask.c() != 1) throw ShapeError("write_mask: expected 1x1xHxW, got " + to_string(mask.shape()));
  ImageBuffer img{mask.w(), mask.h(), 1, {}};
  img.samples.reserve(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) throw Error("write_mask: mask is not binary");
    img.samples.push_back(mask[i] == 1.0f ? 255 : 0);
  }
  return write_image(img);
}

Tensor4f mask_from_image(const ImageBuffer& img) {
  Tensor4f m(1, 1, img.height, img.width);
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) m(0, 0, y, x) = img.at(y, x, 0) >= 128 ? 1.0f : 0.0f;
  }
  return m;
}

Tensor4f preprocess(const ImageBuffer& img, Index target_h, Index target_w, const Normalization& norm) {
  if (target_h < 64 || target_w < 64) {
    throw ConfigError("preprocess: target size " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                      " is below 64");
  }
  if (img.channels != 3) throw ShapeError("preprocess: expected a 3-channel image");
  for (float s : norm.std) {
    if (!(s > 0.0f)) throw ConfigError("preprocess: std must be positive");
  }
  Tensor4f t(1, 3, img.height, img.width);
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < img.height; ++y) {
      for (Index x = 0; x < img.width; ++x) t(0, c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
    }
  }
  if (target_h != img.height || target_w != img.width) t = upsample_bilinear(t, target_h, target_w, false);
  for (Index c = 0; c < 3; ++c) {
    auto row = t.item(0).row(c).array();
    row = (row - norm.mean[static_cast<std::size_t>(c)]) / norm.std[static_cast<std::size_t>(c)];
  }
  return t;
}

}  // namespace mseg
