#include "cfaudit/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <system_error>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cfaudit/error.hpp"

namespace cfaudit {

namespace {

cv::Mat to_mat(const ImagePlane& image) {
  cv::Mat mat(image.height(), image.width(), CV_32FC(image.channels()));
  std::memcpy(mat.data, image.data().data(), image.size() * sizeof(float));
  return mat;
}

ImagePlane from_mat(const cv::Mat& mat) {
  ImagePlane out(mat.rows, mat.cols, mat.channels());
  cv::Mat contiguous = mat.isContinuous() ? mat : mat.clone();
  std::memcpy(out.data().data(), contiguous.data, out.size() * sizeof(float));
  return out;
}

ImagePlane from_bgr8(const cv::Mat& bgr) {
  cv::Mat rgb;
  if (bgr.channels() == 1) {
    cv::cvtColor(bgr, rgb, cv::COLOR_GRAY2RGB);
  } else if (bgr.channels() == 4) {
    cv::cvtColor(bgr, rgb, cv::COLOR_BGRA2RGB);
  } else {
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  }
  ImagePlane out(rgb.rows, rgb.cols, 3);
  auto px = out.data();
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<std::uint8_t>(y);
    for (int i = 0; i < rgb.cols * 3; ++i) {
      px[static_cast<std::size_t>(y) * rgb.cols * 3 + i] = row[i] / 255.0f;
    }
  }
  return out;
}

std::uint8_t to_u8(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

}  // namespace

ImagePlane::ImagePlane(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw ArgumentError("image dimensions must be positive");
  }
  pixels_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

bool ImagePlane::bit_equal(const ImagePlane& other) const noexcept {
  return same_shape(other) &&
         std::memcmp(pixels_.data(), other.pixels_.data(),
                     pixels_.size() * sizeof(float)) == 0;
}

ImagePlane decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DecodeError("empty image buffer");
  cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1,
              const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat decoded;
  try {
    decoded = cv::imdecode(raw, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw DecodeError(std::string("image decode failed: ") + e.what());
  }
  if (decoded.empty()) throw DecodeError("image decode failed");
  if (decoded.depth() != CV_8U) {
    decoded.convertTo(decoded, CV_8U, 255.0 / 65535.0);
  }
  return from_bgr8(decoded);
}

ImagePlane read_image(const std::filesystem::path& path) {
  const Bytes bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

Bytes encode_png(const ImagePlane& image) {
  if (image.empty()) throw ArgumentError("cannot encode an empty image");
  if (image.channels() != 1 && image.channels() != 3) {
    throw ArgumentError("PNG encoding supports 1 or 3 channels");
  }
  const int type = image.channels() == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat mat(image.height(), image.width(), type);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        // RGB -> BGR for OpenCV.
        const int dst = image.channels() == 3 ? 2 - c : c;
        row[x * image.channels() + dst] = to_u8(image.at(y, x, c));
      }
    }
  }
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", mat, out)) throw DataError("PNG encoding failed");
  return out;
}

void write_png(const std::filesystem::path& path, const ImagePlane& image) {
  write_file_atomic(path, encode_png(image));
}

Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(text.data()),
                              text.size()));
}

void quantize8(ImagePlane& image) {
  for (float& v : image.data()) v = to_u8(v) / 255.0f;
}

ImagePlane resize_bilinear(const ImagePlane& image, int height, int width) {
  if (image.empty() || height <= 0 || width <= 0) {
    throw ArgumentError("resize of empty image or to empty size");
  }
  if (image.height() == height && image.width() == width) return image;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

ImagePlane crop(const ImagePlane& image, const PixelRect& rect) {
  if (rect.w <= 0 || rect.h <= 0 || rect.x < 0 || rect.y < 0 ||
      rect.x + rect.w > image.width() || rect.y + rect.h > image.height()) {
    throw ArgumentError("crop rectangle outside image bounds");
  }
  ImagePlane out(rect.h, rect.w, image.channels());
  for (int y = 0; y < rect.h; ++y) {
    for (int x = 0; x < rect.w; ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        out.at(y, x, c) = image.at(rect.y + y, rect.x + x, c);
      }
    }
  }
  return out;
}

double mean_squared_error(const ImagePlane& a, const ImagePlane& b) {
  if (!a.same_shape(b)) throw ArgumentError("MSE of differently shaped images");
  if (a.empty()) return 0.0;
  double sum = 0.0;
  auto pa = a.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = static_cast<double>(pa[i]) - pb[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pa.size());
}

}  // namespace cfaudit
