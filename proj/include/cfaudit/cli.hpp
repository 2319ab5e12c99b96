#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "cfaudit/codec/codec.hpp"
#include "cfaudit/probe/probe.hpp"
#include "cfaudit/slopes.hpp"

namespace cfaudit::cli {

struct RunConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::uint64_t seed = 1;

  struct Paths {
    std::filesystem::path dataset_root;
    std::filesystem::path annotations;
    std::filesystem::path train_root;
    std::filesystem::path train_annotations;
    std::filesystem::path manifest;
    std::filesystem::path model;
    std::filesystem::path checkpoint;
    std::filesystem::path series_dir;
    std::filesystem::path store;
    std::filesystem::path analysis;
    std::filesystem::path report_dir;
    std::filesystem::path simulate_dir;
  } paths;

  std::vector<std::string> keywords;  // empty: every subdirectory of dataset_root
  std::vector<codec::AttributeSpec> attributes;

  codec::CodecConfig codec;
  bool codec_seed_set = false;
  std::int64_t train_steps = 2000;
  std::int64_t log_every = 100;
  std::int64_t checkpoint_every = 0;

  struct Grid {
    std::string attribute;
    int K = 7;
    double lo = -2.0;
    double hi = 2.0;
  } grid;

  struct Probe {
    std::string backend = "simulated";
    double rps = 0.0;
    std::size_t max_in_flight = 4;
    int max_attempts = 4;
    bool fsync = false;
    std::filesystem::path replay_fixture;
    std::vector<probe::BiasSimSpec> simulated;
  } probe;

  struct Analysis {
    double p_max = 0.001;
    double min_abs_slope = 0.03;
    slopes::Mode mode = slopes::Mode::kPerImage;
    bool use_confidence = false;
    bool exclude_flagged = true;
  } analysis;

  struct Simulate {
    std::size_t n = 200;
    int K = 7;
    double lo = -2.0;
    double hi = 2.0;
    double beta0 = 0.0;
    std::vector<double> betas{0.3, 0.0, -0.3};
    std::vector<std::uint64_t> seeds{1, 2, 3};
  } simulate;

  std::string stats_attribute;  // defaults to the grid attribute

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
  const codec::AttributeSpec& spec(const std::string& name) const;
};

// Parses TOML text. Relative paths are resolved against `base_dir`.
RunConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

struct CommandOptions {
  bool force = false;
  bool dry_run = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> backend;
  std::optional<double> rps;
  std::optional<std::size_t> max_in_flight;
  std::optional<std::filesystem::path> store;
  std::optional<std::string> attribute;  // stats
};

// Applies flag overrides; flags win over the file.
void apply_overrides(RunConfig& config, const CommandOptions& options);

// Each command returns a process exit code and reports diagnostics on `err`.
int cmd_train(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err);
int cmd_synthesize(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                   std::ostream& err);
int cmd_probe(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err);
int cmd_analyze(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                std::ostream& err);
int cmd_report(const RunConfig& config, const CommandOptions& options, std::ostream& out,
               std::ostream& err);
int cmd_simulate(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                 std::ostream& err);
int cmd_stats(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err);

// Planted-bias end-to-end run: synthetic series with tiny unique PNGs, the
// simulated backend with one label per planted beta1, the probe store and
// the slope analysis.
struct PlantedResult {
  std::uint64_t seed = 0;
  double beta1 = 0.0;
  std::string label;
  slopes::LabelSlope estimate;
  bool estimated = false;  // false when the label was excluded or never present
  bool passes_filter = false;
};

struct SimulationRun {
  std::vector<PlantedResult> results;
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
};

std::string planted_label(double beta1);
SimulationRun run_planted_simulation(const RunConfig& config, const std::filesystem::path& work_dir,
                                     slopes::Mode mode = slopes::Mode::kPerImage);

// Joins store records to sidecars under `series_dir` for one backend.
struct JoinResult {
  std::vector<slopes::JoinedRecord> records;
  std::size_t flagged_series = 0;
  std::size_t missing = 0;  // series images without a stored record
};
JoinResult join_records(const std::filesystem::path& series_dir, const probe::ProbeStore& store,
                        const std::string& backend, bool exclude_flagged);

// Entry point used by the executable. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cfaudit::cli
