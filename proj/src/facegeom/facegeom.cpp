#include "cfaudit/facegeom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "cfaudit/error.hpp"

namespace cfaudit {

namespace {

cv::Mat skin_gate(const ImagePlane& image) {
  cv::Mat gate(image.height(), image.width(), CV_8UC1);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = gate.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width(); ++x) {
      const bool on = image.channels() >= 3 &&
                      is_skin_rgb(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2));
      row[x] = on ? 255 : 0;
    }
  }
  return gate;
}

cv::Mat open_small(const cv::Mat& gate) {
  cv::Mat out;
  const cv::Mat kernel = cv::getStructuringElement(cv::MORPH_ELLIPSE, cv::Size(3, 3));
  cv::morphologyEx(gate, out, cv::MORPH_OPEN, kernel);
  return out;
}

}  // namespace

FaceBox clamp_box(const FaceBox& box, int image_w, int image_h) {
  const int x0 = std::clamp(box.x, 0, image_w);
  const int y0 = std::clamp(box.y, 0, image_h);
  const int x1 = std::clamp(box.x + box.w, 0, image_w);
  const int y1 = std::clamp(box.y + box.h, 0, image_h);
  if (x1 <= x0 || y1 <= y0) throw ArgumentError("face box lies outside the image");
  return FaceBox{x0, y0, x1 - x0, y1 - y0, box.score};
}

FaceBox expand_box(const FaceBox& box, double margin, int image_w, int image_h) {
  const int dx = static_cast<int>(std::lround(box.w * margin));
  const int dy = static_cast<int>(std::lround(box.h * margin));
  return clamp_box(FaceBox{box.x - dx, box.y - dy, box.w + 2 * dx, box.h + 2 * dy, box.score},
                   image_w, image_h);
}

SkinMask::SkinMask(int height, int width, std::uint8_t fill)
    : height_(height), width_(width) {
  if (height <= 0 || width <= 0) throw ArgumentError("mask dimensions must be positive");
  bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t SkinMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

SkinMask ellipse_mask(int height, int width, double width_frac, double height_frac) {
  SkinMask mask(height, width);
  const double cx = width / 2.0;
  const double cy = height / 2.0;
  const double rx = std::max(0.5, width * width_frac / 2.0);
  const double ry = std::max(0.5, height * height_frac / 2.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double nx = (x + 0.5 - cx) / rx;
      const double ny = (y + 0.5 - cy) / ry;
      mask.set(y, x, nx * nx + ny * ny <= 1.0);
    }
  }
  if (mask.empty_mask()) mask.set(height / 2, width / 2, true);
  return mask;
}

SkinMask resize_mask_nearest(const SkinMask& mask, int height, int width) {
  SkinMask out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(mask.height() - 1, static_cast<int>((y + 0.5) * mask.height() / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(mask.width() - 1, static_cast<int>((x + 0.5) * mask.width() / width));
      out.set(y, x, mask.at(sy, sx) != 0);
    }
  }
  return out;
}

bool is_skin_rgb(float r, float g, float b) noexcept {
  const double R = r * 255.0;
  const double G = g * 255.0;
  const double B = b * 255.0;
  const double Y = 0.299 * R + 0.587 * G + 0.114 * B;
  const double cr = (R - Y) * 0.713 + 128.0;
  const double cb = (B - Y) * 0.564 + 128.0;
  return Y >= 40.0 && cr >= 133.0 && cr <= 173.0 && cb >= 77.0 && cb <= 127.0;
}

std::vector<FaceBox> SkinBlobDetector::detect(const ImagePlane& image) const {
  const cv::Mat gate = open_small(skin_gate(image));
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(gate, labels, stats, centroids, 8, CV_32S);
  const double min_area =
      std::max(options_.min_area_fraction * image.width() * image.height(),
               0.5 * options_.min_side * options_.min_side);
  std::vector<FaceBox> faces;
  for (int i = 1; i < n; ++i) {
    const int w = stats.at<int>(i, cv::CC_STAT_WIDTH);
    const int h = stats.at<int>(i, cv::CC_STAT_HEIGHT);
    const int area = stats.at<int>(i, cv::CC_STAT_AREA);
    if (w < options_.min_side || h < options_.min_side || area < min_area) continue;
    const double aspect = static_cast<double>(h) / w;
    if (aspect < options_.min_aspect || aspect > options_.max_aspect) continue;
    const double ellipse_area = std::numbers::pi / 4.0 * w * h;
    const double score = std::min(1.0, area / ellipse_area);
    if (score < options_.min_score) continue;
    faces.push_back(FaceBox{stats.at<int>(i, cv::CC_STAT_LEFT), stats.at<int>(i, cv::CC_STAT_TOP),
                            w, h, score});
  }
  return faces;
}

SkinMask ChromaSkinSegmenter::segment(const ImagePlane& crop) const {
  const cv::Mat gate = open_small(skin_gate(crop));
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(gate, labels, stats, centroids, 8, CV_32S);
  SkinMask mask(crop.height(), crop.width());
  int best = 0;
  int best_area = 0;
  for (int i = 1; i < n; ++i) {
    const int area = stats.at<int>(i, cv::CC_STAT_AREA);
    if (area > best_area) {
      best = i;
      best_area = area;
    }
  }
  if (best == 0) return mask;
  for (int y = 0; y < crop.height(); ++y) {
    const int* row = labels.ptr<int>(y);
    for (int x = 0; x < crop.width(); ++x) mask.set(y, x, row[x] == best);
  }
  return mask;
}

std::vector<FaceBox> detect_faces(const ImagePlane& image, const FaceDetector& detector) {
  if (image.empty()) throw ArgumentError("face detection on an empty image");
  std::vector<FaceBox> faces = detector.detect(image);
  std::vector<FaceBox> clamped;
  clamped.reserve(faces.size());
  for (const auto& f : faces) {
    if (f.w <= 0 || f.h <= 0) continue;
    try {
      clamped.push_back(clamp_box(f, image.width(), image.height()));
    } catch (const ArgumentError&) {
      // box entirely outside the frame
    }
  }
  std::stable_sort(clamped.begin(), clamped.end(), [](const FaceBox& a, const FaceBox& b) {
    return a.score > b.score;
  });
  return clamped;
}

FaceBox select_primary_face(const std::vector<FaceBox>& faces, int image_w, int image_h) {
  if (faces.empty()) throw NoFaceError("no face to select");
  const double cx = image_w / 2.0;
  const double cy = image_h / 2.0;
  auto dist2 = [&](const FaceBox& f) {
    const double dx = f.center_x() - cx;
    const double dy = f.center_y() - cy;
    return dx * dx + dy * dy;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < faces.size(); ++i) {
    const double d = dist2(faces[i]);
    const double db = dist2(faces[best]);
    if (d < db || (d == db && faces[i].area() > faces[best].area())) best = i;
  }
  return faces[best];
}

SegmentResult segment_skin(const ImagePlane& crop, const SkinSegmenter& segmenter) {
  if (crop.empty()) throw ArgumentError("skin segmentation of an empty crop");
  SegmentResult result;
  result.mask = segmenter.segment(crop);
  if (result.mask.height() != crop.height() || result.mask.width() != crop.width() ||
      result.mask.empty_mask()) {
    result.mask = ellipse_mask(crop.height(), crop.width());
    result.fallback = true;
  }
  return result;
}

ImagePlane composite(const ImagePlane& original, const ImagePlane& edited_crop,
                     const SkinMask& mask, const FaceBox& box) {
  if (edited_crop.height() != mask.height() || edited_crop.width() != mask.width()) {
    throw ArgumentError("edited crop and mask dimensions differ");
  }
  if (edited_crop.height() != box.h || edited_crop.width() != box.w) {
    throw ArgumentError("edited crop does not match the face box");
  }
  if (edited_crop.channels() != original.channels()) {
    throw ArgumentError("edited crop channel count differs from the original");
  }
  if (box.x < 0 || box.y < 0 || box.x + box.w > original.width() ||
      box.y + box.h > original.height()) {
    throw ArgumentError("face box lies outside the original image");
  }
  ImagePlane out = original;
  for (int y = 0; y < box.h; ++y) {
    for (int x = 0; x < box.w; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < original.channels(); ++c) {
        out.at(box.y + y, box.x + x, c) = edited_crop.at(y, x, c);
      }
    }
  }
  return out;
}

}  // namespace cfaudit
