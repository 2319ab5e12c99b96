#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cfaudit {

struct ImageRecord {
  std::string id;  // SHA-256 of the file bytes
  std::filesystem::path path;
  std::string keyword;
  std::optional<std::string> qualifier;
  std::map<std::string, std::string> annotations;
  // Unset until face filtering ran; stays unset when the detector failed.
  std::optional<bool> face_present;

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::map<std::string, std::set<std::string>> attribute_domain;

  // Throws DuplicateIdError / DataError when an invariant is broken.
  void validate() const;
  const ImageRecord* find(const std::string& id) const;

  bool operator==(const DatasetManifest&) const = default;
};

struct BuildResult {
  DatasetManifest manifest;
  std::size_t skipped = 0;
  std::vector<std::filesystem::path> skipped_paths;
};

enum class DuplicatePolicy { kReject, kKeepFirst };

// Scans `<root>/<keyword>/<file>` (and `<root>/<keyword>/<qualifier>/<file>`).
// An empty keyword list means every subdirectory of the root.
BuildResult build_manifest(const std::filesystem::path& root,
                           const std::vector<std::string>& keywords,
                           DuplicatePolicy duplicates = DuplicatePolicy::kReject);

struct AnnotationResult {
  std::size_t applied = 0;
  std::vector<std::string> unknown_ids;
};

// Rows of (id, attribute, value). The first row is treated as a header when it
// reads exactly "id,attribute,value".
AnnotationResult attach_annotations(DatasetManifest& manifest, const std::filesystem::path& csv_path);
AnnotationResult attach_annotations(DatasetManifest& manifest,
                                    const std::vector<std::vector<std::string>>& rows);

// Returns the number of faces found in the record's image; throws on failure.
using FaceCounter = std::function<std::size_t(const ImageRecord&)>;

struct FilterResult {
  DatasetManifest manifest;
  std::size_t removed = 0;
  std::size_t warnings = 0;  // detector failures; those records are retained
};

FilterResult filter_faceless(const DatasetManifest& manifest, const FaceCounter& detector);

struct RepresentationRow {
  std::string keyword;
  std::size_t n = 0;
  std::map<std::string, double> proportions;  // empty when n == 0
};

std::vector<RepresentationRow> representation_stats(const DatasetManifest& manifest,
                                                    const std::string& attribute);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace cfaudit
