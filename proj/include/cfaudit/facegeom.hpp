#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "cfaudit/image.hpp"

namespace cfaudit {

struct FaceBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  double score = 0.0;

  double center_x() const noexcept { return x + w / 2.0; }
  double center_y() const noexcept { return y + h / 2.0; }
  long long area() const noexcept { return static_cast<long long>(w) * h; }
  PixelRect rect() const noexcept { return {x, y, w, h}; }
};

// Intersects the box with the image; throws ArgumentError when nothing remains.
FaceBox clamp_box(const FaceBox& box, int image_w, int image_h);

// Grows the box by `margin` of its size on every side, then clamps.
FaceBox expand_box(const FaceBox& box, double margin, int image_w, int image_h);

// Binary plane aligned to a face crop. Values are 0 or 1.
class SkinMask {
 public:
  SkinMask() = default;
  SkinMask(int height, int width, std::uint8_t fill = 0);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::uint8_t at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, bool on) { bits_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }
  std::size_t count() const noexcept;
  bool empty_mask() const noexcept { return count() == 0; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Inscribed ellipse covering `width_frac` x `height_frac` of the crop.
SkinMask ellipse_mask(int height, int width, double width_frac = 0.8, double height_frac = 0.9);
SkinMask resize_mask_nearest(const SkinMask& mask, int height, int width);

// Detector backends. Implementations must be reentrant; wrap anything that is
// not behind a mutex before handing it to concurrent callers.
class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  virtual std::vector<FaceBox> detect(const ImagePlane& image) const = 0;
};

// Skin-chroma blob detector: YCrCb skin gate, morphological cleanup, then
// connected components filtered by size and aspect. Scores are the blob's
// fill ratio of its inscribed ellipse.
class SkinBlobDetector final : public FaceDetector {
 public:
  struct Options {
    double min_area_fraction = 0.002;
    int min_side = 8;
    double min_aspect = 0.7;  // h / w
    double max_aspect = 2.2;
    double min_score = 0.45;
  };

  SkinBlobDetector() = default;
  explicit SkinBlobDetector(Options options) : options_(options) {}

  std::vector<FaceBox> detect(const ImagePlane& image) const override;

 private:
  Options options_;
};

class SkinSegmenter {
 public:
  virtual ~SkinSegmenter() = default;
  virtual SkinMask segment(const ImagePlane& crop) const = 0;
};

// Pixel-wise YCrCb skin gate with an opening pass and largest-component
// selection, so hair and background stay out of the mask.
class ChromaSkinSegmenter final : public SkinSegmenter {
 public:
  SkinMask segment(const ImagePlane& crop) const override;
};

// True where the RGB sample falls inside the YCrCb skin gate.
bool is_skin_rgb(float r, float g, float b) noexcept;

std::vector<FaceBox> detect_faces(const ImagePlane& image, const FaceDetector& detector);

// Face whose center is nearest the image center; ties go to the larger box,
// then to the lower list index.
FaceBox select_primary_face(const std::vector<FaceBox>& faces, int image_w, int image_h);

struct SegmentResult {
  SkinMask mask;
  bool fallback = false;
};

// Never returns an empty mask: an empty segmentation is replaced by the
// inscribed-ellipse mask and flagged.
SegmentResult segment_skin(const ImagePlane& crop, const SkinSegmenter& segmenter);

// Pixel (x, y) inside `box` takes the edited crop sample where the mask is 1
// and keeps the original where it is 0. Pixels outside the box are copied.
ImagePlane composite(const ImagePlane& original, const ImagePlane& edited_crop,
                     const SkinMask& mask, const FaceBox& box);

}  // namespace cfaudit
