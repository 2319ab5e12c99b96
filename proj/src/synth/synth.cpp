#include "cfaudit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"

namespace cfaudit::synth {

namespace fs = std::filesystem;
using nlohmann::json;

AttributeGrid attribute_grid(const std::string& attribute, int count, double lo, double hi) {
  if (count < 2) throw ArgumentError("attribute grid needs at least two points");
  if (!(lo < hi)) throw ArgumentError("attribute grid needs lo < hi");
  AttributeGrid grid{attribute, {}};
  grid.values.reserve(static_cast<std::size_t>(count));
  for (int k = 1; k <= count; ++k) {
    // t first: the center of an odd grid is then exactly 1/2, so symmetric
    // ranges put it at exactly 0.
    const double t = static_cast<double>(k - 1) / static_cast<double>(count - 1);
    grid.values.push_back(lo + (hi - lo) * t);
  }
  return grid;
}

bool CounterfactualSeries::has_flag(const std::string& flag) const {
  return std::find(flags.begin(), flags.end(), flag) != flags.end();
}

bool SeriesSidecar::has_flag(const std::string& flag) const {
  return std::find(flags.begin(), flags.end(), flag) != flags.end();
}

PreparedFace prepare_face(const ImagePlane& image, const codec::FaderCodec& model,
                          const ImageRecord& record, const FaceDetector& detector,
                          const SkinSegmenter& segmenter, const SynthOptions& options) {
  const auto& cfg = model.config();
  if (image.channels() != cfg.channels) {
    throw DataError("image has " + std::to_string(image.channels()) + " channels, codec expects " +
                    std::to_string(cfg.channels));
  }
  const auto faces = detect_faces(image, detector);
  if (faces.empty()) throw NoFaceError("no face detected in " + record.id);
  const FaceBox primary = select_primary_face(faces, image.width(), image.height());

  PreparedFace out;
  out.box = expand_box(primary, options.crop_margin, image.width(), image.height());
  const ImagePlane face_crop =
      resize_bilinear(crop(image, out.box.rect()), cfg.resolution, cfg.resolution);

  auto seg = segment_skin(face_crop, segmenter);
  out.mask = std::move(seg.mask);
  out.fallback_mask = seg.fallback;
  out.code = model.encode(face_crop);

  for (const auto& spec : model.specs()) {
    if (spec.role != codec::AttributeRole::kControlled) continue;
    auto it = record.annotations.find(spec.name);
    if (it == record.annotations.end()) {
      out.controlled_values.values[spec.name] = 0.0;
      out.controlled_default = true;
    } else {
      out.controlled_values.values[spec.name] = spec.endpoint(it->second);
    }
  }
  return out;
}

ImagePlane render_variant(const ImagePlane& image, const codec::FaderCodec& model,
                          const PreparedFace& face, const std::string& attribute, double value) {
  codec::AttributeVector attrs = face.controlled_values;
  attrs.values[attribute] = value;
  ImagePlane decoded = model.decode(face.code, attrs);
  ImagePlane edited = resize_bilinear(decoded, face.box.h, face.box.w);
  quantize8(edited);
  const SkinMask mask = resize_mask_nearest(face.mask, face.box.h, face.box.w);
  return composite(image, edited, mask, face.box);
}

CounterfactualSeries synthesize_series(const ImagePlane& image, const codec::FaderCodec& model,
                                       const AttributeGrid& grid, const ImageRecord& record,
                                       const FaceDetector& detector,
                                       const SkinSegmenter& segmenter,
                                       const SynthOptions& options) {
  const auto& spec = model.specs().at(model.spec_index(grid.attribute));
  if (spec.role != codec::AttributeRole::kSensitive) {
    throw ArgumentError("attribute " + grid.attribute + " is not sensitive in this model");
  }
  if (grid.size() < 2) throw ArgumentError("attribute grid needs at least two points");

  const PreparedFace face = prepare_face(image, model, record, detector, segmenter, options);
  CounterfactualSeries series;
  series.source_id = record.id;
  series.grid = grid;
  series.controlled_values = face.controlled_values;
  series.box = face.box;
  if (face.fallback_mask) series.flags.push_back(kFlagFallbackMask);
  if (face.controlled_default) series.flags.push_back(kFlagControlledDefault);
  series.images.reserve(grid.size());
  for (double a : grid.values) {
    series.images.push_back(render_variant(image, model, face, grid.attribute, a));
  }
  return series;
}

namespace {

std::string image_name(const std::string& attribute, std::size_t k) {
  return attribute + "_" + std::to_string(k) + ".png";
}

json box_json(const FaceBox& b) {
  return json{{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"score", b.score}};
}

json sidecar_json(const std::string& source_id, const AttributeGrid& grid,
                  const codec::AttributeVector& controlled, const std::vector<std::string>& flags,
                  const FaceBox& box, const std::vector<SeriesEntry>& entries) {
  json images = json::array();
  for (const auto& e : entries) {
    images.push_back(json{{"k", e.k}, {"a", e.a}, {"file", e.file.filename().string()},
                          {"digest", e.digest}});
  }
  return json{{"format", "cfaudit.series/1"},
              {"source_id", source_id},
              {"attribute", grid.attribute},
              {"grid", grid.values},
              {"center_index", grid.center_index()},
              {"controlled_values", controlled.values},
              {"flags", flags},
              {"box", box_json(box)},
              {"images", images}};
}

void check_source_id(const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.find('/') != std::string::npos ||
      id.find('\\') != std::string::npos) {
    throw ArgumentError("source id '" + id + "' cannot name a directory");
  }
}

}  // namespace

fs::path series_directory(const fs::path& out_root, const std::string& source_id) {
  check_source_id(source_id);
  return out_root / source_id;
}

bool write_series(const CounterfactualSeries& series, const fs::path& out_root, bool force) {
  if (series.images.size() != series.grid.size()) {
    throw ArgumentError("series has " + std::to_string(series.images.size()) + " images for a " +
                        std::to_string(series.grid.size()) + "-point grid");
  }
  const fs::path dir = series_directory(out_root, series.source_id);
  if (!force && fs::exists(dir / kSidecarName)) return false;
  fs::create_directories(dir);

  std::vector<SeriesEntry> entries;
  for (std::size_t i = 0; i < series.images.size(); ++i) {
    const Bytes png = encode_png(series.images[i]);
    SeriesEntry e{i + 1, series.grid.values[i], dir / image_name(series.grid.attribute, i + 1),
                  sha256_hex(png)};
    write_file_atomic(e.file, png);
    entries.push_back(std::move(e));
  }
  const json doc = sidecar_json(series.source_id, series.grid, series.controlled_values,
                                series.flags, series.box, entries);
  write_file_atomic(dir / kSidecarName, doc.dump(2) + "\n");
  return true;
}

SeriesSidecar write_series_bytes(const std::string& source_id, const AttributeGrid& grid,
                                 const std::vector<Bytes>& pngs,
                                 const codec::AttributeVector& controlled,
                                 const std::vector<std::string>& flags, const fs::path& out_root) {
  if (pngs.size() != grid.size()) throw ArgumentError("one PNG per grid point is required");
  const fs::path dir = series_directory(out_root, source_id);
  fs::create_directories(dir);
  SeriesSidecar sc{source_id, grid, controlled, flags, FaceBox{}, {}, dir};
  for (std::size_t i = 0; i < pngs.size(); ++i) {
    SeriesEntry e{i + 1, grid.values[i], dir / image_name(grid.attribute, i + 1),
                  sha256_hex(pngs[i])};
    write_file_atomic(e.file, pngs[i]);
    sc.entries.push_back(std::move(e));
  }
  write_file_atomic(dir / kSidecarName,
                    sidecar_json(source_id, grid, controlled, flags, sc.box, sc.entries).dump(2) +
                        "\n");
  return sc;
}

SeriesSidecar read_series(const fs::path& series_dir) {
  const fs::path path = series_dir / kSidecarName;
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    const json doc = json::parse(buf.str());
    SeriesSidecar sc;
    sc.directory = series_dir;
    sc.source_id = doc.at("source_id");
    sc.grid.attribute = doc.at("attribute");
    sc.grid.values = doc.at("grid").get<std::vector<double>>();
    sc.controlled_values.values = doc.at("controlled_values").get<std::map<std::string, double>>();
    sc.flags = doc.at("flags").get<std::vector<std::string>>();
    const auto& b = doc.at("box");
    sc.box = FaceBox{b.at("x"), b.at("y"), b.at("w"), b.at("h"), b.at("score")};
    for (const auto& e : doc.at("images")) {
      sc.entries.push_back(SeriesEntry{e.at("k"), e.at("a"), series_dir / e.at("file").get<std::string>(),
                                       e.at("digest")});
    }
    if (sc.entries.size() != sc.grid.size()) {
      throw DataError(path.string() + " lists a different number of images than grid points");
    }
    return sc;
  } catch (const json::exception& e) {
    throw DataError("malformed sidecar " + path.string() + ": " + e.what());
  }
}

std::vector<SeriesSidecar> list_series(const fs::path& out_root) {
  if (!fs::is_directory(out_root)) throw ConfigError("series directory " + out_root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(out_root)) {
    if (entry.is_directory() && fs::exists(entry.path() / kSidecarName)) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<SeriesSidecar> out;
  out.reserve(dirs.size());
  for (const auto& d : dirs) out.push_back(read_series(d));
  return out;
}

}  // namespace cfaudit::synth
