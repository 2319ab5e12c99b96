#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfaudit/probe/probe.hpp"

namespace cfaudit::slopes {

// One probe record joined back to its series position.
struct JoinedRecord {
  std::string backend;
  std::string source_id;
  std::size_t k = 0;  // 1-based grid index
  std::size_t K = 0;
  double a = 0.0;
  std::vector<probe::LabelPrediction> predictions;
};

enum class Outcome {
  kBinary,      // 1 when the label is present
  kConfidence,  // confidence when present, 0 otherwise
};

struct LabelRateVector {
  std::string label;
  std::string backend;
  std::vector<double> a;        // grid values
  std::vector<double> y;        // per-point rate
  std::vector<std::size_t> support;  // sources observed at each point
  std::vector<double> sum;      // per-point outcome sums
  std::vector<double> sum_sq;   // per-point squared outcome sums
  std::size_t n = 0;            // distinct sources
  std::size_t K = 0;
};

// Groups by (backend, label). Labels never present anywhere are omitted.
// Throws AnalysisError when series disagree on K or on a grid value.
std::vector<LabelRateVector> aggregate_rates(const std::vector<JoinedRecord>& records,
                                             Outcome outcome = Outcome::kBinary);

struct NormalizedVector {
  std::vector<double> z;
  std::size_t center_index = 0;  // 1-based
};

// z_k = y_k / y_c. Throws NormalizationUndefined when y_c = 0 and
// ArgumentError for even K.
NormalizedVector normalize(const LabelRateVector& v);

struct OlsFit {
  double slope = 0.0;
  double intercept = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  double std_error = 0.0;
  double df = 0.0;
};

// Least squares y = intercept + slope * x with a two-sided t-test on the
// slope (n - 2 degrees of freedom). Flat y gives slope 0 and p = 1; a perfect
// non-flat fit gives p = 0. Fewer than three points give p = 1. Throws
// ArgumentError when x has no spread.
OlsFit ols_slope(std::span<const double> x, std::span<const double> y);

// Same fit from weighted sufficient statistics, where point i has weight
// w_i, outcome sum s_i and squared-outcome sum q_i. Used for per-image
// regressions over n * K outcomes without materializing them.
OlsFit ols_from_groups(std::span<const double> x, std::span<const std::size_t> weight,
                       std::span<const double> sum, std::span<const double> sum_sq);

enum class Mode { kAggregate, kPerImage };
std::string to_string(Mode mode);
Mode mode_from_string(const std::string& text);

struct LabelSlope {
  std::string label;
  std::string backend;
  double slope = 0.0;
  double intercept = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  std::size_t K = 0;
  Mode mode = Mode::kPerImage;
};

struct Exclusion {
  std::string backend;
  std::string label;
  std::string reason;
};

struct AnalysisOptions {
  Mode mode = Mode::kPerImage;
  Outcome outcome = Outcome::kBinary;
};

struct Analysis {
  std::vector<LabelRateVector> rates;
  std::vector<LabelSlope> slopes;
  std::vector<Exclusion> exclusions;
};

// The slope always comes from the normalized aggregate fit; the p-value from
// the selected mode.
LabelSlope slope_for(const LabelRateVector& rates, const NormalizedVector& z, Mode mode);
Analysis analyze(const std::vector<JoinedRecord>& records, const AnalysisOptions& options = {});

// Keeps p < p_max and |slope| > min_abs_slope, sorted by signed slope.
std::vector<LabelSlope> filter_labels(std::vector<LabelSlope> slopes, double p_max = 0.001,
                                      double min_abs_slope = 0.03);

nlohmann::json analysis_to_json(const Analysis& analysis);
Analysis analysis_from_json(const nlohmann::json& doc);

struct ReportFiles {
  std::filesystem::path slopes_csv;
  std::vector<std::filesystem::path> backend_tables;
  std::vector<std::filesystem::path> curves;
  std::filesystem::path exclusions_csv;
  std::filesystem::path metadata_json;
};

// Writes slopes.csv, <backend>_slopes.csv/.txt, curves/<backend>__<label>.csv
// for every reported label with rates, exclusions.csv and metadata.json.
// Every file is written through a temporary and renamed.
ReportFiles report(const std::vector<LabelSlope>& slopes, const std::vector<LabelRateVector>& rates,
                   const std::vector<Exclusion>& exclusions, const nlohmann::json& metadata,
                   const std::filesystem::path& output_dir);

// Filesystem-safe rendering of a label or backend name.
std::string file_stem(const std::string& name);

}  // namespace cfaudit::slopes
