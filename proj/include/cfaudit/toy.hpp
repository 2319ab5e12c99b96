#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cfaudit/codec/codec.hpp"
#include "cfaudit/facegeom.hpp"
#include "cfaudit/image.hpp"

// Synthetic face proxies: a skin-tone ellipse with hair, eyes and mouth on a
// non-skin background. The binary "gender" proxy darkens the lower face
// (beard shading); the controlled "mouth_open" attribute changes mouth height.
namespace cfaudit::toy {

struct FaceParams {
  // Face geometry in crop-relative units (fractions of the crop side).
  double cx = 0.5;
  double cy = 0.5;
  double rx = 0.35;
  double ry = 0.36;
  float skin[3] = {0.87f, 0.65f, 0.54f};
  float hair[3] = {0.15f, 0.10f, 0.07f};
  float background[3] = {0.30f, 0.40f, 0.70f};
  bool masculine = false;
  bool mouth_open = false;
  double beard_strength = 0.7;  // multiplier on beard-region skin
};

FaceParams random_face(std::mt19937_64& rng, bool masculine, bool mouth_open);

// Face crop as a detector-plus-margin crop would frame it.
ImagePlane render_face_crop(const FaceParams& face, int size);

// Oracle score of the gender proxy on an image framed like `face`: mean
// luminance of the cheek band minus that of the chin band. Larger is more
// masculine.
double beard_score(const ImagePlane& image, const FaceParams& face);

// Standard toy attribute declarations.
codec::AttributeSpec gender_spec();
codec::AttributeSpec mouth_spec();
std::vector<codec::AttributeSpec> default_specs();

struct ToySet {
  codec::TrainingSet data;  // labels follow default_specs() order
  std::vector<FaceParams> faces;
};

ToySet make_training_set(int count, int size, int channels, std::uint64_t seed);

struct Scene {
  ImagePlane image;
  std::vector<FaceBox> faces;  // ground-truth face ellipse bounding boxes
  FaceParams primary;
};

// A wider scene with one primary face near the center and optionally a
// smaller off-center face. Width/height in pixels.
Scene render_scene(std::mt19937_64& rng, int width, int height, bool masculine, bool mouth_open,
                   bool second_face);

// Writes `<root>/train/faces/*.png`, `<root>/train/annotations.csv`,
// `<root>/scenes/<keyword>/*.png` and `<root>/scenes/annotations.csv`.
// Returns the number of scene images written.
struct ToyLayout {
  int train_count = 500;
  int crop_size = 64;
  std::vector<std::string> keywords{"engineer", "nurse"};
  int scenes_per_keyword = 5;
  int scene_width = 160;
  int scene_height = 128;
  int faceless_per_keyword = 0;
  std::uint64_t seed = 1;
};

std::size_t write_toy_dataset(const std::filesystem::path& root, const ToyLayout& layout);

}  // namespace cfaudit::toy
