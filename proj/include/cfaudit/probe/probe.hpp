#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cfaudit/error.hpp"
#include "cfaudit/image.hpp"

namespace cfaudit::synth {
struct SeriesSidecar;
}

namespace cfaudit::probe {

struct LabelPrediction {
  std::string label;      // normalized
  std::string raw_label;  // as the backend reported it
  bool present = false;
  double confidence = 0.0;

  bool operator==(const LabelPrediction&) const = default;
};

// Lowercases ASCII and trims surrounding whitespace.
std::string normalize_label(std::string_view raw);

// Normalizes every label and merges entries that collide after
// normalization: present if any is, confidence is the maximum, raw label of
// the first occurrence. Output is ordered by label.
std::vector<LabelPrediction> normalize_predictions(std::vector<LabelPrediction> predictions);

struct ProbeRecord {
  std::string image_id;  // SHA-256 of the image bytes
  std::string backend_id;
  std::vector<LabelPrediction> predictions;
  std::string fetched_at;  // UTC, ISO 8601
  bool from_cache = false;
};

struct ProbeImage {
  std::string digest;
  Bytes png;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  // Raw predictions; callers go through classify() for normalization.
  virtual std::vector<LabelPrediction> classify(const ProbeImage& image) = 0;
  // False when the scheduler must serialize calls.
  virtual bool reentrant() const { return true; }
};

std::vector<LabelPrediction> classify(Backend& backend, const ProbeImage& image);

struct BiasSimSpec {
  std::string label;
  double beta0 = 0.0;
  double beta1 = 0.0;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

// Grid value of the image with the given digest, if known.
using GridValueFn = std::function<std::optional<double>(const std::string& digest)>;

// Presence probability sigma(beta0 + beta1 * a). Deterministic specs report
// present iff the probability is at least 1/2; stochastic ones draw from a
// generator seeded by (seed, digest, label). Confidence is the probability.
class SimulatedBackend final : public Backend {
 public:
  SimulatedBackend(std::vector<BiasSimSpec> specs, GridValueFn grid_value,
                   std::string id = "simulated");

  std::string id() const override { return id_; }
  std::vector<LabelPrediction> classify(const ProbeImage& image) override;

  static double probability(const BiasSimSpec& spec, double a);

 private:
  std::vector<BiasSimSpec> specs_;
  GridValueFn grid_value_;
  std::string id_;
};

std::unique_ptr<Backend> make_simulated_backend(std::vector<BiasSimSpec> specs,
                                                GridValueFn grid_value,
                                                std::string id = "simulated");

// Grid-value lookup over series sidecars.
GridValueFn grid_values_from(const std::vector<synth::SeriesSidecar>& series);

// Replays canned responses from a JSON fixture:
// {"backend": "...", "responses": {"<digest>": [{"label", "present", "confidence"}]},
//  "default": [...]}. Images without a response and no default raise a
// protocol error.
class ReplayBackend final : public Backend {
 public:
  explicit ReplayBackend(const std::filesystem::path& fixture);
  ReplayBackend(std::string id, std::map<std::string, std::vector<LabelPrediction>> responses,
                std::optional<std::vector<LabelPrediction>> fallback = std::nullopt);

  std::string id() const override { return id_; }
  std::vector<LabelPrediction> classify(const ProbeImage& image) override;

 private:
  std::string id_;
  std::map<std::string, std::vector<LabelPrediction>> responses_;
  std::optional<std::vector<LabelPrediction>> fallback_;
};

// Token bucket with an injectable clock. acquire() reserves a token and
// sleeps until it is due, so concurrent callers are admitted at `rate` per
// second after the initial burst.
class TokenBucket {
 public:
  using Clock = std::chrono::steady_clock;
  using NowFn = std::function<Clock::time_point()>;
  using SleepFn = std::function<void(Clock::duration)>;

  TokenBucket(double rate, double burst = 1.0, NowFn now = nullptr, SleepFn sleep = nullptr);

  void acquire();
  double rate() const noexcept { return rate_; }

 private:
  double rate_;
  double burst_;
  double tokens_;
  Clock::time_point last_;
  NowFn now_;
  SleepFn sleep_;
  std::mutex mu_;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds max_delay{5000};
};

// Append-only JSONL store keyed by (backend id, image digest), with a
// digest index file beside it. Opening rebuilds the index from the log and
// drops a torn final line. Writers hold an advisory lock on `<path>.lock`.
class ProbeStore {
 public:
  struct Options {
    bool fsync = false;
    bool read_only = false;
  };

  static ProbeStore open(const std::filesystem::path& path, Options options);
  static ProbeStore open(const std::filesystem::path& path) { return open(path, Options{}); }
  ~ProbeStore();
  ProbeStore(ProbeStore&&) noexcept;
  ProbeStore& operator=(ProbeStore&&) = delete;
  ProbeStore(const ProbeStore&) = delete;

  std::optional<ProbeRecord> find(const std::string& backend_id, const std::string& digest) const;
  // Appends unless the key is already stored; returns the stored record.
  ProbeRecord append(const ProbeRecord& record);

  std::size_t size() const;
  std::vector<ProbeRecord> records() const;  // in log order
  const std::filesystem::path& path() const noexcept { return path_; }
  std::size_t dropped_tail_bytes() const noexcept { return dropped_tail_; }

  static std::filesystem::path index_path(const std::filesystem::path& path);

 private:
  ProbeStore() = default;

  std::filesystem::path path_;
  Options options_;
  int fd_ = -1;
  int lock_fd_ = -1;
  int index_fd_ = -1;
  std::size_t dropped_tail_ = 0;
  std::vector<ProbeRecord> log_;
  std::unordered_map<std::string, std::size_t> index_;
  mutable std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

std::string record_to_json_line(const ProbeRecord& record);
ProbeRecord record_from_json_line(std::string_view line);

struct ProbeItem {
  std::string digest;
  std::filesystem::path file;
};

struct ProbeFailure {
  std::string digest;
  std::filesystem::path file;
  BackendError::Reason reason = BackendError::Reason::kTransport;
  std::string message;
};

struct ProbeOptions {
  std::size_t max_in_flight = 4;
  double rps = 0.0;  // 0: unlimited
  RetryPolicy retry;
  std::function<void(std::chrono::milliseconds)> sleep;  // backoff sleeper; default real sleep
  TokenBucket* limiter = nullptr;  // overrides rps when set
};

struct ProbeOutcome {
  std::vector<ProbeRecord> records;  // input order, failures omitted
  std::vector<ProbeFailure> failures;
  std::size_t network_calls = 0;  // backend invocations, retries included
  std::size_t cache_hits = 0;
};

// Cache hits never reach the backend. Each fresh record is appended to the
// store before the call returns.
ProbeOutcome probe_images(const std::vector<ProbeItem>& items, Backend& backend, ProbeStore& store,
                          const ProbeOptions& options = {});
ProbeOutcome probe_series(const synth::SeriesSidecar& series, Backend& backend, ProbeStore& store,
                          const ProbeOptions& options = {});

std::string utc_timestamp();

}  // namespace cfaudit::probe
