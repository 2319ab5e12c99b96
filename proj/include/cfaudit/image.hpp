#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cfaudit {

// Interleaved H x W x C float image with intensities in [0, 1]. Channel order
// is RGB for three-channel planes.
class ImagePlane {
 public:
  ImagePlane() = default;
  ImagePlane(int height, int width, int channels, float fill = 0.0f);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return pixels_.empty(); }
  std::size_t size() const noexcept { return pixels_.size(); }

  float& at(int y, int x, int c) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  float at(int y, int x, int c) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::span<float> data() noexcept { return pixels_; }
  std::span<const float> data() const noexcept { return pixels_; }

  bool same_shape(const ImagePlane& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  // Bitwise equality of every sample.
  bool bit_equal(const ImagePlane& other) const noexcept;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> pixels_;
};

struct PixelRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

using Bytes = std::vector<std::uint8_t>;

// PNG codec. Decoded planes are always 3-channel RGB; encoding quantizes to
// 8 bits per sample, so planes already on the k/255 lattice round-trip exactly.
ImagePlane decode_image(std::span<const std::uint8_t> bytes);
ImagePlane read_image(const std::filesystem::path& path);
Bytes encode_png(const ImagePlane& image);
void write_png(const std::filesystem::path& path, const ImagePlane& image);

Bytes read_file_bytes(const std::filesystem::path& path);
// Writes through a temporary sibling and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

// Snaps every sample to the nearest k/255 value.
void quantize8(ImagePlane& image);

ImagePlane resize_bilinear(const ImagePlane& image, int height, int width);
ImagePlane crop(const ImagePlane& image, const PixelRect& rect);

double mean_squared_error(const ImagePlane& a, const ImagePlane& b);

}  // namespace cfaudit
