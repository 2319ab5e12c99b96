#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "cfaudit/csv.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/image.hpp"
#include "cfaudit/slopes.hpp"

namespace cfaudit::slopes {

namespace fs = std::filesystem;
using nlohmann::json;

std::string file_stem(const std::string& name) {
  std::string out;
  for (unsigned char c : name) {
    if (std::isalnum(c)) {
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '-' || c == '.') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('_');
    }
  }
  if (out.empty() || out == "." || out == "..") out = "_" + out;
  return out;
}

namespace {

const csv::Row kSlopeHeader{"backend", "label", "slope", "intercept", "p_value", "n", "K", "mode"};

std::string slope_table_csv(const std::vector<LabelSlope>& rows) {
  std::string out = csv::format_row(kSlopeHeader);
  for (const auto& s : rows) {
    out += csv::format_row({s.backend, s.label, csv::format_number(s.slope),
                            csv::format_number(s.intercept), csv::format_number(s.p_value),
                            std::to_string(s.n), std::to_string(s.K), to_string(s.mode)});
  }
  return out;
}

std::string slope_table_text(const std::string& backend, const std::vector<LabelSlope>& rows,
                             const json& metadata) {
  const json legend = metadata.value("legend", json::object());
  const std::string neg = legend.value("negative", std::string("feminine"));
  const std::string pos = legend.value("positive", std::string("masculine"));
  const std::string attribute = metadata.value("attribute", std::string("the sensitive attribute"));

  std::size_t width = 5;
  for (const auto& s : rows) width = std::max(width, s.label.size());

  std::ostringstream out;
  out << "Label sensitivity to " << attribute << ", backend " << backend << "\n";
  out << "Sign convention: negative slope = label more frequent toward a < 0 (" << neg
      << "); positive slope = label more frequent toward a > 0 (" << pos << ").\n\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %9s  %11s  %6s\n", static_cast<int>(width), "label",
                "slope", "p_value", "n");
  out << line;
  out << std::string(width + 34, '-') << "\n";
  for (const auto& s : rows) {
    std::snprintf(line, sizeof(line), "%-*s  %9.3f  %11.3g  %6zu\n", static_cast<int>(width),
                  s.label.c_str(), s.slope, s.p_value, s.n);
    out << line;
  }
  if (rows.empty()) out << "(no labels pass the filter)\n";
  return out.str();
}

}  // namespace

ReportFiles report(const std::vector<LabelSlope>& slopes, const std::vector<LabelRateVector>& rates,
                   const std::vector<Exclusion>& exclusions, const json& metadata,
                   const fs::path& output_dir) {
  std::error_code ec;
  fs::create_directories(output_dir, ec);
  if (ec || !fs::is_directory(output_dir)) {
    throw ConfigError("cannot create report directory " + output_dir.string());
  }

  std::vector<LabelSlope> sorted = slopes;
  std::sort(sorted.begin(), sorted.end(), [](const LabelSlope& x, const LabelSlope& y) {
    if (x.slope != y.slope) return x.slope < y.slope;
    if (x.backend != y.backend) return x.backend < y.backend;
    return x.label < y.label;
  });

  ReportFiles files;
  auto write = [&](const fs::path& path, const std::string& text) {
    try {
      write_file_atomic(path, text);
    } catch (const Error& e) {
      throw ConfigError(std::string("cannot write report file: ") + e.what());
    }
  };

  files.slopes_csv = output_dir / "slopes.csv";
  write(files.slopes_csv, slope_table_csv(sorted));

  std::map<std::string, std::vector<LabelSlope>> by_backend;
  for (const auto& s : sorted) by_backend[s.backend].push_back(s);
  if (metadata.contains("backends")) {
    for (const auto& b : metadata.at("backends")) by_backend.try_emplace(b.get<std::string>());
  }
  for (const auto& [backend, rows] : by_backend) {
    const fs::path csv_path = output_dir / (file_stem(backend) + "_slopes.csv");
    const fs::path txt_path = output_dir / (file_stem(backend) + "_slopes.txt");
    write(csv_path, slope_table_csv(rows));
    write(txt_path, slope_table_text(backend, rows, metadata));
    files.backend_tables.push_back(csv_path);
    files.backend_tables.push_back(txt_path);
  }

  std::map<std::pair<std::string, std::string>, const LabelRateVector*> rate_index;
  for (const auto& r : rates) rate_index[{r.backend, r.label}] = &r;
  for (const auto& s : sorted) {
    auto it = rate_index.find({s.backend, s.label});
    if (it == rate_index.end()) continue;
    const LabelRateVector& r = *it->second;
    const NormalizedVector z = normalize(r);
    std::string text = csv::format_row({"a", "y", "z"});
    for (std::size_t k = 0; k < r.y.size(); ++k) {
      text += csv::format_row(
          {csv::format_number(r.a[k]), csv::format_number(r.y[k]), csv::format_number(z.z[k])});
    }
    const fs::path path =
        output_dir / "curves" / (file_stem(s.backend) + "__" + file_stem(s.label) + ".csv");
    fs::create_directories(path.parent_path());
    write(path, text);
    files.curves.push_back(path);
  }

  std::string excl = csv::format_row({"backend", "label", "reason"});
  for (const auto& e : exclusions) excl += csv::format_row({e.backend, e.label, e.reason});
  files.exclusions_csv = output_dir / "exclusions.csv";
  write(files.exclusions_csv, excl);

  json meta = metadata;
  meta["rows"] = sorted.size();
  meta["exclusions"] = exclusions.size();
  files.metadata_json = output_dir / "metadata.json";
  write(files.metadata_json, meta.dump(2) + "\n");
  return files;
}

}  // namespace cfaudit::slopes
