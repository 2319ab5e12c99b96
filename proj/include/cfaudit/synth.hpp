#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cfaudit/codec/codec.hpp"
#include "cfaudit/dataset.hpp"
#include "cfaudit/facegeom.hpp"
#include "cfaudit/image.hpp"

namespace cfaudit::synth {

struct AttributeGrid {
  std::string attribute;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  // 1-based (K + 1) / 2; only meaningful for odd K.
  std::size_t center_index() const noexcept { return (values.size() + 1) / 2; }

  bool operator==(const AttributeGrid&) const = default;
};

// values_k = lo + (hi - lo) * (k - 1) / (K - 1), k = 1..K.
AttributeGrid attribute_grid(const std::string& attribute, int count, double lo, double hi);

inline constexpr const char* kFlagFallbackMask = "fallback_mask";
inline constexpr const char* kFlagControlledDefault = "controlled_default";

struct CounterfactualSeries {
  std::string source_id;
  AttributeGrid grid;
  std::vector<ImagePlane> images;
  codec::AttributeVector controlled_values;
  std::vector<std::string> flags;
  FaceBox box;  // crop region in the source image (detection plus margin)

  bool has_flag(const std::string& flag) const;
};

struct SynthOptions {
  double crop_margin = 0.2;
};

// The encoded face of one source image, ready to be decoded at any value of
// the sensitive attribute.
struct PreparedFace {
  FaceBox box;
  SkinMask mask;  // at codec resolution
  bool fallback_mask = false;
  codec::LatentCode code;
  codec::AttributeVector controlled_values;
  bool controlled_default = false;
};

PreparedFace prepare_face(const ImagePlane& image, const codec::FaderCodec& model,
                          const ImageRecord& record, const FaceDetector& detector,
                          const SkinSegmenter& segmenter, const SynthOptions& options = {});

// Decodes with the sensitive attribute at `value` and composites the result
// into `image` on the skin mask.
ImagePlane render_variant(const ImagePlane& image, const codec::FaderCodec& model,
                          const PreparedFace& face, const std::string& attribute, double value);

// Throws NoFaceError when the detector finds nothing and ArgumentError when
// the grid attribute is not a sensitive attribute of the model.
CounterfactualSeries synthesize_series(const ImagePlane& image, const codec::FaderCodec& model,
                                       const AttributeGrid& grid, const ImageRecord& record,
                                       const FaceDetector& detector,
                                       const SkinSegmenter& segmenter,
                                       const SynthOptions& options = {});

// On-disk form of a series: PNGs plus the series.json sidecar.
struct SeriesEntry {
  std::size_t k = 0;  // 1-based grid index
  double a = 0.0;
  std::filesystem::path file;
  std::string digest;  // SHA-256 of the PNG bytes
};

struct SeriesSidecar {
  std::string source_id;
  AttributeGrid grid;
  codec::AttributeVector controlled_values;
  std::vector<std::string> flags;
  FaceBox box;
  std::vector<SeriesEntry> entries;
  std::filesystem::path directory;

  bool has_flag(const std::string& flag) const;
};

inline constexpr const char* kSidecarName = "series.json";

std::filesystem::path series_directory(const std::filesystem::path& out_root,
                                       const std::string& source_id);

// Writes `<out>/<source-id>/<attribute>_<k>.png` and the sidecar, the sidecar
// last. Returns false without touching anything when the sidecar already
// exists and `force` is off.
bool write_series(const CounterfactualSeries& series, const std::filesystem::path& out_root,
                  bool force = false);
// Writes PNGs whose bytes are already encoded; used by the simulator.
SeriesSidecar write_series_bytes(const std::string& source_id, const AttributeGrid& grid,
                                 const std::vector<Bytes>& pngs,
                                 const codec::AttributeVector& controlled,
                                 const std::vector<std::string>& flags,
                                 const std::filesystem::path& out_root);

SeriesSidecar read_series(const std::filesystem::path& series_dir);
// Every series under `out_root`, ordered by source id.
std::vector<SeriesSidecar> list_series(const std::filesystem::path& out_root);

}  // namespace cfaudit::synth
