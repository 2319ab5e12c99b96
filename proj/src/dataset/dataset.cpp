#include "cfaudit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cfaudit/csv.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/image.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cfaudit {

namespace {

bool hidden(const fs::path& p) {
  const auto name = p.filename().string();
  return name.empty() || name.front() == '.';
}

struct Candidate {
  std::string keyword;
  std::string relative;  // sort key within keyword
  fs::path path;
  std::optional<std::string> qualifier;
};

void collect(const fs::path& dir, const std::string& keyword,
             const std::optional<std::string>& qualifier, std::vector<Candidate>& out) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (hidden(entry.path())) continue;
    if (entry.is_directory()) {
      // one qualifier level only
      if (!qualifier) collect(entry.path(), keyword, entry.path().filename().string(), out);
      continue;
    }
    if (!entry.is_regular_file()) continue;
    std::string rel = entry.path().filename().string();
    if (qualifier) rel = *qualifier + "/" + rel;
    out.push_back(Candidate{keyword, rel, entry.path(), qualifier});
  }
}

}  // namespace

void DatasetManifest::validate() const {
  std::unordered_map<std::string, const ImageRecord*> seen;
  std::vector<std::string> dups;
  for (const auto& r : records) {
    if (r.keyword.empty()) throw DataError("record " + r.id + " has an empty keyword");
    auto [it, inserted] = seen.emplace(r.id, &r);
    if (!inserted) {
      dups.push_back(r.id.substr(0, 12) + " (" + it->second->path.string() + ", " +
                     r.path.string() + ")");
    }
    for (const auto& [attr, value] : r.annotations) {
      auto dom = attribute_domain.find(attr);
      if (dom == attribute_domain.end() || !dom->second.contains(value)) {
        throw DataError("annotation " + attr + "=" + value + " on " + r.id +
                        " is outside the attribute domain");
      }
    }
  }
  if (!dups.empty()) {
    std::string msg = "duplicate image ids:";
    for (const auto& d : dups) msg += " " + d;
    throw DuplicateIdError(msg);
  }
}

const ImageRecord* DatasetManifest::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

BuildResult build_manifest(const fs::path& root, const std::vector<std::string>& keywords,
                           DuplicatePolicy duplicates) {
  if (!fs::is_directory(root)) {
    throw ConfigError("dataset root does not exist: " + root.string());
  }
  std::vector<std::string> wanted = keywords;
  if (wanted.empty()) {
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && !hidden(entry.path())) {
        wanted.push_back(entry.path().filename().string());
      }
    }
  }
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

  std::vector<Candidate> candidates;
  for (const auto& keyword : wanted) {
    if (keyword.empty()) throw ConfigError("empty keyword");
    const fs::path dir = root / keyword;
    if (!fs::is_directory(dir)) {
      throw ConfigError("keyword directory missing: " + dir.string());
    }
    collect(dir, keyword, std::nullopt, candidates);
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.keyword, a.relative) < std::tie(b.keyword, b.relative);
  });

  BuildResult result;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& c : candidates) {
    Bytes bytes;
    try {
      bytes = read_file_bytes(c.path);
      (void)decode_image(bytes);
    } catch (const DataError&) {
      ++result.skipped;
      result.skipped_paths.push_back(c.path);
      continue;
    }
    ImageRecord record;
    record.id = sha256_hex(bytes);
    record.path = c.path;
    record.keyword = c.keyword;
    record.qualifier = c.qualifier;
    if (duplicates == DuplicatePolicy::kKeepFirst && index.contains(record.id)) continue;
    index.emplace(record.id, result.manifest.records.size());
    result.manifest.records.push_back(std::move(record));
  }
  if (result.manifest.records.empty()) {
    throw EmptyDatasetError("no readable images under " + root.string());
  }
  result.manifest.validate();
  return result;
}

AnnotationResult attach_annotations(DatasetManifest& manifest,
                                    const std::vector<std::vector<std::string>>& rows) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) index.emplace(manifest.records[i].id, i);
  AnnotationResult result;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (i == 0 && row == std::vector<std::string>{"id", "attribute", "value"}) continue;
    if (row.size() != 3) {
      throw DataError("annotation row " + std::to_string(i + 1) + " does not have 3 columns");
    }
    const auto& [id, attribute, value] = std::tie(row[0], row[1], row[2]);
    if (attribute.empty() || value.empty()) {
      throw DataError("annotation row " + std::to_string(i + 1) + " has an empty field");
    }
    manifest.attribute_domain[attribute].insert(value);
    auto it = index.find(id);
    if (it == index.end()) {
      result.unknown_ids.push_back(id);
      continue;
    }
    manifest.records[it->second].annotations[attribute] = value;
    ++result.applied;
  }
  return result;
}

AnnotationResult attach_annotations(DatasetManifest& manifest, const fs::path& csv_path) {
  return attach_annotations(manifest, csv::read_file(csv_path));
}

FilterResult filter_faceless(const DatasetManifest& manifest, const FaceCounter& detector) {
  FilterResult result;
  result.manifest.attribute_domain = manifest.attribute_domain;
  for (const auto& record : manifest.records) {
    ImageRecord copy = record;
    try {
      const std::size_t faces = detector(record);
      copy.face_present = faces > 0;
    } catch (const std::exception&) {
      copy.face_present.reset();
      ++result.warnings;
      result.manifest.records.push_back(std::move(copy));
      continue;
    }
    if (*copy.face_present) {
      result.manifest.records.push_back(std::move(copy));
    } else {
      ++result.removed;
    }
  }
  return result;
}

std::vector<RepresentationRow> representation_stats(const DatasetManifest& manifest,
                                                    const std::string& attribute) {
  auto dom = manifest.attribute_domain.find(attribute);
  if (dom == manifest.attribute_domain.end()) {
    throw ArgumentError("unknown attribute: " + attribute);
  }
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& r : manifest.records) {
    auto& per_value = counts[r.keyword];
    auto it = r.annotations.find(attribute);
    if (it != r.annotations.end()) ++per_value[it->second];
  }
  std::vector<RepresentationRow> rows;
  for (const auto& [keyword, per_value] : counts) {
    RepresentationRow row;
    row.keyword = keyword;
    for (const auto& [value, c] : per_value) row.n += c;
    if (row.n > 0) {
      for (const auto& value : dom->second) {
        auto it = per_value.find(value);
        const std::size_t c = it == per_value.end() ? 0 : it->second;
        row.proportions[value] = static_cast<double>(c) / static_cast<double>(row.n);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string manifest_to_json(const DatasetManifest& manifest) {
  json records = json::array();
  for (const auto& r : manifest.records) {
    json j;
    j["id"] = r.id;
    j["path"] = r.path.generic_string();
    j["keyword"] = r.keyword;
    j["qualifier"] = r.qualifier ? json(*r.qualifier) : json(nullptr);
    j["annotations"] = r.annotations;
    j["face_present"] = r.face_present ? json(*r.face_present) : json(nullptr);
    records.push_back(std::move(j));
  }
  json doc;
  doc["format"] = "cfaudit.manifest/1";
  doc["records"] = std::move(records);
  json domain = json::object();
  for (const auto& [attr, values] : manifest.attribute_domain) {
    domain[attr] = std::vector<std::string>(values.begin(), values.end());
  }
  doc["attribute_domain"] = std::move(domain);
  return doc.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  DatasetManifest manifest;
  try {
    const json doc = json::parse(text);
    for (const auto& j : doc.at("records")) {
      ImageRecord r;
      r.id = j.at("id").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.keyword = j.at("keyword").get<std::string>();
      if (!j.at("qualifier").is_null()) r.qualifier = j.at("qualifier").get<std::string>();
      r.annotations = j.at("annotations").get<std::map<std::string, std::string>>();
      if (!j.at("face_present").is_null()) r.face_present = j.at("face_present").get<bool>();
      manifest.records.push_back(std::move(r));
    }
    for (const auto& [attr, values] : doc.at("attribute_domain").items()) {
      auto list = values.get<std::vector<std::string>>();
      manifest.attribute_domain[attr] = std::set<std::string>(list.begin(), list.end());
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  manifest.validate();
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  write_file_atomic(path, manifest_to_json(manifest));
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str());
}

}  // namespace cfaudit
