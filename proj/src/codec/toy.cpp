#include "cfaudit/toy.hpp"

#include <algorithm>
#include <cmath>

#include "cfaudit/csv.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"

namespace cfaudit::toy {

namespace {

struct PixelGeometry {
  double cx, cy, rx, ry;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool inside(double x, double y, double cx, double cy, double rx, double ry) {
  const double nx = (x - cx) / rx;
  const double ny = (y - cy) / ry;
  return nx * nx + ny * ny <= 1.0;
}

void put(ImagePlane& img, int y, int x, const float rgb[3], float scale = 1.0f) {
  for (int c = 0; c < img.channels(); ++c) {
    img.at(y, x, c) = std::clamp(rgb[std::min(c, 2)] * scale, 0.0f, 1.0f);
  }
}

// Draws one face into `img` using pixel geometry `g`.
void draw_face(ImagePlane& img, const PixelGeometry& g, const FaceParams& f) {
  static constexpr float kEye[3] = {0.10f, 0.08f, 0.08f};
  static constexpr float kMouth[3] = {0.30f, 0.04f, 0.07f};
  const double eye_dx = 0.38 * g.rx;
  const double eye_y = g.cy - 0.15 * g.ry;
  const double eye_rx = 0.13 * g.rx;
  const double eye_ry = 0.08 * g.ry;
  const double mouth_y = g.cy + 0.45 * g.ry;
  const double mouth_rx = 0.30 * g.rx;
  const double mouth_ry = (f.mouth_open ? 0.15 : 0.05) * g.ry;
  const double beard_y = g.cy + 0.25 * g.ry;

  const int y0 = std::max(0, static_cast<int>(g.cy - 1.2 * g.ry) - 1);
  const int y1 = std::min(img.height(), static_cast<int>(g.cy + 1.2 * g.ry) + 2);
  const int x0 = std::max(0, static_cast<int>(g.cx - 1.2 * g.rx) - 1);
  const int x1 = std::min(img.width(), static_cast<int>(g.cx + 1.2 * g.rx) + 2);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      const bool face = inside(px, py, g.cx, g.cy, g.rx, g.ry);
      const bool hair_cap = py < g.cy - 0.70 * g.ry &&
                            inside(px, py, g.cx, g.cy - 0.05 * g.ry, 1.1 * g.rx, 1.08 * g.ry);
      if (hair_cap) {
        put(img, y, x, f.hair);
        continue;
      }
      if (!face) continue;
      if (inside(px, py, g.cx - eye_dx, eye_y, eye_rx, eye_ry) ||
          inside(px, py, g.cx + eye_dx, eye_y, eye_rx, eye_ry)) {
        put(img, y, x, kEye);
      } else if (inside(px, py, g.cx, mouth_y, mouth_rx, mouth_ry)) {
        put(img, y, x, kMouth);
      } else if (f.masculine && py > beard_y) {
        put(img, y, x, f.skin, static_cast<float>(f.beard_strength));
      } else {
        put(img, y, x, f.skin);
      }
    }
  }
}

double luminance(const ImagePlane& img, int y, int x) {
  if (img.channels() < 3) return img.at(y, x, 0);
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

void fill(ImagePlane& img, const float rgb[3]) {
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) put(img, y, x, rgb);
  }
}

}  // namespace

FaceParams random_face(std::mt19937_64& rng, bool masculine, bool mouth_open) {
  FaceParams f;
  f.cx = 0.5 + uniform(rng, -0.03, 0.03);
  f.cy = 0.5 + uniform(rng, -0.03, 0.03);
  f.rx = uniform(rng, 0.33, 0.37);
  f.ry = f.rx * uniform(rng, 1.0, 1.06);
  const double r = uniform(rng, 0.80, 0.93);
  f.skin[0] = static_cast<float>(r);
  f.skin[1] = static_cast<float>(r * uniform(rng, 0.72, 0.78));
  f.skin[2] = static_cast<float>(r * uniform(rng, 0.58, 0.66));
  const double h = uniform(rng, 0.05, 0.30);
  f.hair[0] = static_cast<float>(h);
  f.hair[1] = static_cast<float>(h * 0.7);
  f.hair[2] = static_cast<float>(h * 0.5);
  f.background[0] = static_cast<float>(uniform(rng, 0.15, 0.40));
  f.background[1] = static_cast<float>(uniform(rng, 0.30, 0.55));
  f.background[2] = static_cast<float>(uniform(rng, 0.55, 0.85));
  f.masculine = masculine;
  f.mouth_open = mouth_open;
  f.beard_strength = uniform(rng, 0.62, 0.74);
  return f;
}

ImagePlane render_face_crop(const FaceParams& face, int size) {
  ImagePlane img(size, size, 3);
  fill(img, face.background);
  draw_face(img, PixelGeometry{face.cx * size, face.cy * size, face.rx * size, face.ry * size},
            face);
  quantize8(img);
  return img;
}

double beard_score(const ImagePlane& image, const FaceParams& face) {
  const double w = image.width();
  const double h = image.height();
  const double cx = face.cx * w, cy = face.cy * h, rx = face.rx * w, ry = face.ry * h;
  double cheek = 0.0, chin = 0.0;
  int n_cheek = 0, n_chin = 0;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = std::abs(px - cx) / rx;
      const double dy = (py - cy) / ry;
      if (dy > 0.0 && dy < 0.18 && dx > 0.15 && dx < 0.6) {
        cheek += luminance(image, y, x);
        ++n_cheek;
      } else if (dy > 0.66 && dy < 0.86 && dx < 0.35) {
        chin += luminance(image, y, x);
        ++n_chin;
      }
    }
  }
  if (n_cheek == 0 || n_chin == 0) throw ArgumentError("image too small for the beard oracle");
  return cheek / n_cheek - chin / n_chin;
}

codec::AttributeSpec gender_spec() {
  return codec::AttributeSpec{"gender", codec::AttributeRole::kSensitive, "female", "male",
                              -2.0, 2.0};
}

codec::AttributeSpec mouth_spec() {
  return codec::AttributeSpec{"mouth_open", codec::AttributeRole::kControlled, "closed", "open",
                              -2.0, 2.0};
}

std::vector<codec::AttributeSpec> default_specs() { return {gender_spec(), mouth_spec()}; }

ToySet make_training_set(int count, int size, int channels, std::uint64_t seed) {
  if (count <= 0) throw ArgumentError("toy set needs at least one image");
  ToySet out;
  std::mt19937_64 rng(seed);
  const int dim = size * size * channels;
  out.data.images.resize(dim, count);
  out.data.labels.resize(2, count);
  for (int j = 0; j < count; ++j) {
    const bool masculine = (j % 2) == 1;
    const bool mouth = std::bernoulli_distribution(0.5)(rng);
    FaceParams f = random_face(rng, masculine, mouth);
    const ImagePlane img = render_face_crop(f, size);
    for (int i = 0; i < size * size; ++i) {
      for (int c = 0; c < channels; ++c) {
        double v;
        if (channels == 1) {
          v = (img.data()[3 * i] + img.data()[3 * i + 1] + img.data()[3 * i + 2]) / 3.0;
        } else {
          v = img.data()[static_cast<std::size_t>(3 * i + std::min(c, 2))];
        }
        out.data.images(i * channels + c, j) = v;
      }
    }
    out.data.labels(0, j) = masculine ? 1.0 : 0.0;
    out.data.labels(1, j) = mouth ? 1.0 : 0.0;
    out.data.ids.push_back("toy-" + std::to_string(j));
    out.faces.push_back(f);
  }
  return out;
}

Scene render_scene(std::mt19937_64& rng, int width, int height, bool masculine, bool mouth_open,
                   bool second_face) {
  Scene scene;
  FaceParams face = random_face(rng, masculine, mouth_open);
  scene.image = ImagePlane(height, width, 3);
  fill(scene.image, face.background);

  const double rx = std::min(width, height) * uniform(rng, 0.13, 0.16);
  const double ry = rx * uniform(rng, 1.15, 1.3);
  const double cx = width / 2.0 + uniform(rng, -0.06, 0.06) * width;
  const double cy = height / 2.0 + uniform(rng, -0.06, 0.04) * height;

  static constexpr float kShirt[3] = {0.20f, 0.45f, 0.30f};
  for (int y = static_cast<int>(cy + ry + 2); y < height; ++y) {
    for (int x = std::max(0, static_cast<int>(cx - 1.6 * rx));
         x < std::min(width, static_cast<int>(cx + 1.6 * rx)); ++x) {
      put(scene.image, y, x, kShirt);
    }
  }
  draw_face(scene.image, PixelGeometry{cx, cy, rx, ry}, face);
  auto box_of = [](double fcx, double fcy, double frx, double fry) {
    const int x0 = static_cast<int>(std::floor(fcx - frx));
    const int y0 = static_cast<int>(std::floor(fcy - fry));
    return FaceBox{x0, y0, static_cast<int>(std::ceil(fcx + frx)) - x0,
                   static_cast<int>(std::ceil(fcy + fry)) - y0, 1.0};
  };
  scene.faces.push_back(box_of(cx, cy, rx, ry));

  if (second_face) {
    FaceParams other = random_face(rng, !masculine, false);
    const double orx = rx * 0.55;
    const double ory = orx * 1.2;
    const double ocx = std::max(orx * 1.3, width * 0.14);
    const double ocy = std::max(ory * 1.3, height * 0.22);
    draw_face(scene.image, PixelGeometry{ocx, ocy, orx, ory}, other);
    scene.faces.push_back(box_of(ocx, ocy, orx, ory));
  }
  quantize8(scene.image);

  // Primary face geometry relative to its own ellipse box.
  face.cx = 0.5;
  face.cy = 0.5;
  face.rx = 0.5;
  face.ry = 0.5;
  scene.primary = face;
  return scene;
}

std::size_t write_toy_dataset(const std::filesystem::path& root, const ToyLayout& layout) {
  namespace fs = std::filesystem;
  std::mt19937_64 rng(layout.seed);

  std::string train_csv = "id,attribute,value\n";
  const ToySet set = make_training_set(layout.train_count, layout.crop_size, 3, layout.seed);
  for (int j = 0; j < layout.train_count; ++j) {
    const ImagePlane img = render_face_crop(set.faces[static_cast<std::size_t>(j)], layout.crop_size);
    const Bytes png = encode_png(img);
    char name[32];
    std::snprintf(name, sizeof(name), "face_%04d.png", j);
    write_file_atomic(root / "train" / "faces" / name, png);
    const std::string id = sha256_hex(png);
    const auto& f = set.faces[static_cast<std::size_t>(j)];
    train_csv += csv::format_row({id, "gender", f.masculine ? "male" : "female"});
    train_csv += csv::format_row({id, "mouth_open", f.mouth_open ? "open" : "closed"});
  }
  write_file_atomic(root / "train" / "annotations.csv", train_csv);

  std::string scene_csv = "id,attribute,value\n";
  std::size_t written = 0;
  for (const auto& keyword : layout.keywords) {
    for (int i = 0; i < layout.scenes_per_keyword; ++i) {
      const bool masculine = std::bernoulli_distribution(0.5)(rng);
      const bool mouth = std::bernoulli_distribution(0.5)(rng);
      const Scene scene = render_scene(rng, layout.scene_width, layout.scene_height, masculine,
                                       mouth, i % 3 == 2);
      const Bytes png = encode_png(scene.image);
      char name[32];
      std::snprintf(name, sizeof(name), "scene_%03d.png", i);
      write_file_atomic(root / "scenes" / keyword / name, png);
      const std::string id = sha256_hex(png);
      scene_csv += csv::format_row({id, "gender", masculine ? "male" : "female"});
      scene_csv += csv::format_row({id, "mouth_open", mouth ? "open" : "closed"});
      ++written;
    }
    for (int i = 0; i < layout.faceless_per_keyword; ++i) {
      FaceParams bg = random_face(rng, false, false);
      ImagePlane img(layout.scene_height, layout.scene_width, 3);
      fill(img, bg.background);
      quantize8(img);
      char name[32];
      std::snprintf(name, sizeof(name), "empty_%03d.png", i);
      write_png(root / "scenes" / keyword / name, img);
      ++written;
    }
  }
  write_file_atomic(root / "scenes" / "annotations.csv", scene_csv);
  return written;
}

}  // namespace cfaudit::toy
