#include "cfaudit/probe/probe.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "cfaudit/digest.hpp"
#include "cfaudit/synth.hpp"

namespace cfaudit::probe {

using nlohmann::json;

std::string normalize_label(std::string_view raw) {
  auto begin = raw.begin();
  auto end = raw.end();
  while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
  while (end != begin && std::isspace(static_cast<unsigned char>(*(end - 1)))) --end;
  std::string out(begin, end);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<LabelPrediction> normalize_predictions(std::vector<LabelPrediction> predictions) {
  std::map<std::string, LabelPrediction> merged;
  for (auto& p : predictions) {
    if (p.raw_label.empty()) p.raw_label = p.label;
    std::string key = normalize_label(p.raw_label);
    if (key.empty()) continue;
    if (!std::isfinite(p.confidence)) {
      throw BackendError(BackendError::Reason::kProtocol, "non-finite confidence for " + key);
    }
    p.confidence = std::clamp(p.confidence, 0.0, 1.0);
    auto [it, inserted] = merged.try_emplace(key, p);
    if (inserted) {
      it->second.label = key;
    } else {
      it->second.present = it->second.present || p.present;
      it->second.confidence = std::max(it->second.confidence, p.confidence);
    }
  }
  std::vector<LabelPrediction> out;
  out.reserve(merged.size());
  for (auto& [_, p] : merged) out.push_back(std::move(p));
  return out;
}

std::vector<LabelPrediction> classify(Backend& backend, const ProbeImage& image) {
  return normalize_predictions(backend.classify(image));
}

SimulatedBackend::SimulatedBackend(std::vector<BiasSimSpec> specs, GridValueFn grid_value,
                                   std::string id)
    : specs_(std::move(specs)), grid_value_(std::move(grid_value)), id_(std::move(id)) {
  for (const auto& s : specs_) {
    if (s.label.empty()) throw ConfigError("simulated label needs a name");
    if (std::isnan(s.beta0) || std::isnan(s.beta1) || std::isinf(s.beta1)) {
      throw ConfigError("simulated label " + s.label + " has non-finite coefficients");
    }
  }
  if (!grid_value_) throw ConfigError("simulated backend needs a grid-value lookup");
}

double SimulatedBackend::probability(const BiasSimSpec& spec, double a) {
  const double eta = spec.beta0 + spec.beta1 * a;
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

std::vector<LabelPrediction> SimulatedBackend::classify(const ProbeImage& image) {
  const auto a = grid_value_(image.digest);
  if (!a) {
    throw BackendError(BackendError::Reason::kSimulator,
                       "image " + image.digest + " has no grid value");
  }
  std::vector<LabelPrediction> out;
  out.reserve(specs_.size());
  for (const auto& spec : specs_) {
    const double p = probability(spec, *a);
    bool present;
    if (spec.deterministic) {
      present = p >= 0.5;
    } else {
      std::mt19937_64 rng(derive_seed(spec.seed, image.digest + "\x1f" + spec.label));
      present = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
    }
    out.push_back(LabelPrediction{spec.label, spec.label, present, p});
  }
  return out;
}

std::unique_ptr<Backend> make_simulated_backend(std::vector<BiasSimSpec> specs,
                                                GridValueFn grid_value, std::string id) {
  return std::make_unique<SimulatedBackend>(std::move(specs), std::move(grid_value), std::move(id));
}

GridValueFn grid_values_from(const std::vector<synth::SeriesSidecar>& series) {
  auto table = std::make_shared<std::unordered_map<std::string, double>>();
  for (const auto& s : series) {
    for (const auto& e : s.entries) table->emplace(e.digest, e.a);
  }
  return [table](const std::string& digest) -> std::optional<double> {
    auto it = table->find(digest);
    if (it == table->end()) return std::nullopt;
    return it->second;
  };
}

namespace {

std::vector<LabelPrediction> predictions_from_json(const json& arr) {
  std::vector<LabelPrediction> out;
  for (const auto& p : arr) {
    LabelPrediction lp;
    lp.raw_label = p.at("label").get<std::string>();
    lp.label = lp.raw_label;
    lp.present = p.value("present", true);
    lp.confidence = p.value("confidence", lp.present ? 1.0 : 0.0);
    out.push_back(std::move(lp));
  }
  return out;
}

json predictions_to_json(const std::vector<LabelPrediction>& preds) {
  json arr = json::array();
  for (const auto& p : preds) {
    arr.push_back(json{{"label", p.label},
                       {"raw_label", p.raw_label},
                       {"present", p.present},
                       {"confidence", p.confidence}});
  }
  return arr;
}

}  // namespace

ReplayBackend::ReplayBackend(const std::filesystem::path& fixture) {
  std::ifstream in(fixture);
  if (!in) throw ConfigError("cannot open replay fixture " + fixture.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    const json doc = json::parse(buf.str());
    id_ = doc.at("backend").get<std::string>();
    for (const auto& [digest, preds] : doc.at("responses").items()) {
      responses_[digest] = predictions_from_json(preds);
    }
    if (doc.contains("default")) fallback_ = predictions_from_json(doc.at("default"));
  } catch (const json::exception& e) {
    throw ConfigError("malformed replay fixture " + fixture.string() + ": " + e.what());
  }
}

ReplayBackend::ReplayBackend(std::string id,
                             std::map<std::string, std::vector<LabelPrediction>> responses,
                             std::optional<std::vector<LabelPrediction>> fallback)
    : id_(std::move(id)), responses_(std::move(responses)), fallback_(std::move(fallback)) {}

std::vector<LabelPrediction> ReplayBackend::classify(const ProbeImage& image) {
  auto it = responses_.find(image.digest);
  if (it != responses_.end()) return it->second;
  if (fallback_) return *fallback_;
  throw BackendError(BackendError::Reason::kProtocol, "no canned response for " + image.digest);
}

TokenBucket::TokenBucket(double rate, double burst, NowFn now, SleepFn sleep)
    : rate_(rate), burst_(burst), tokens_(burst), now_(std::move(now)), sleep_(std::move(sleep)) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw ConfigError("rate limit must be positive");
  if (!(burst >= 1.0)) throw ConfigError("token bucket burst must be at least 1");
  if (!now_) now_ = [] { return Clock::now(); };
  if (!sleep_) sleep_ = [](Clock::duration d) { std::this_thread::sleep_for(d); };
  last_ = now_();
}

void TokenBucket::acquire() {
  Clock::duration wait{};
  {
    std::lock_guard lock(mu_);
    const auto now = now_();
    if (now > last_) {
      const double elapsed = std::chrono::duration<double>(now - last_).count();
      tokens_ = std::min(burst_, tokens_ + elapsed * rate_);
      last_ = now;
    }
    tokens_ -= 1.0;
    if (tokens_ < 0.0) {
      wait = std::chrono::duration_cast<Clock::duration>(
          std::chrono::duration<double>(-tokens_ / rate_));
    }
  }
  if (wait > Clock::duration::zero()) sleep_(wait);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string record_to_json_line(const ProbeRecord& r) {
  return json{{"image_id", r.image_id},
              {"backend_id", r.backend_id},
              {"predictions", predictions_to_json(r.predictions)},
              {"fetched_at", r.fetched_at}}
      .dump();
}

ProbeRecord record_from_json_line(std::string_view line) {
  const json j = json::parse(line);
  ProbeRecord r;
  r.image_id = j.at("image_id");
  r.backend_id = j.at("backend_id");
  r.fetched_at = j.at("fetched_at");
  for (const auto& p : j.at("predictions")) {
    r.predictions.push_back(LabelPrediction{p.at("label"), p.at("raw_label"), p.at("present"),
                                            p.at("confidence")});
  }
  return r;
}

namespace {

std::vector<LabelPrediction> call_with_retry(Backend& backend, const ProbeImage& image,
                                             const ProbeOptions& options, TokenBucket* limiter,
                                             std::mutex* serial, std::atomic<std::size_t>& calls) {
  const int attempts = std::max(1, options.retry.max_attempts);
  for (int attempt = 1;; ++attempt) {
    if (limiter) limiter->acquire();
    try {
      calls.fetch_add(1);
      if (serial) {
        std::lock_guard lock(*serial);
        return classify(backend, image);
      }
      return classify(backend, image);
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= attempts) throw;
    }
    std::chrono::milliseconds delay = options.retry.base_delay * (1LL << std::min(attempt - 1, 20));
    delay = std::min(delay, options.retry.max_delay);
    if (options.sleep) {
      options.sleep(delay);
    } else {
      std::this_thread::sleep_for(delay);
    }
  }
}

}  // namespace

ProbeOutcome probe_images(const std::vector<ProbeItem>& items, Backend& backend, ProbeStore& store,
                          const ProbeOptions& options) {
  const std::string backend_id = backend.id();
  std::unique_ptr<TokenBucket> own_limiter;
  TokenBucket* limiter = options.limiter;
  if (!limiter && options.rps > 0.0) {
    own_limiter = std::make_unique<TokenBucket>(options.rps);
    limiter = own_limiter.get();
  }
  std::mutex serial;
  std::mutex out_mu;
  std::atomic<std::size_t> calls{0};
  std::atomic<std::size_t> hits{0};
  std::atomic<std::size_t> next{0};
  std::vector<std::optional<ProbeRecord>> slots(items.size());
  std::vector<ProbeFailure> failures;

  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < items.size(); i = next.fetch_add(1)) {
      const auto& item = items[i];
      ProbeImage image;
      try {
        image.png = read_file_bytes(item.file);
      } catch (const Error& e) {
        std::lock_guard lock(out_mu);
        failures.push_back({item.digest, item.file, BackendError::Reason::kProtocol, e.what()});
        continue;
      }
      image.digest = sha256_hex(image.png);
      if (auto cached = store.find(backend_id, image.digest)) {
        cached->from_cache = true;
        slots[i] = std::move(*cached);
        hits.fetch_add(1);
        continue;
      }
      try {
        ProbeRecord rec{image.digest, backend_id,
                        call_with_retry(backend, image, options, limiter,
                                        backend.reentrant() ? nullptr : &serial, calls),
                        utc_timestamp(), false};
        ProbeRecord stored = store.append(rec);
        stored.from_cache = stored.fetched_at != rec.fetched_at || stored.predictions != rec.predictions;
        slots[i] = std::move(stored);
      } catch (const BackendError& e) {
        std::lock_guard lock(out_mu);
        failures.push_back({image.digest, item.file, e.reason(), e.what()});
      }
    }
  };

  const std::size_t workers =
      std::min(items.size(), std::max<std::size_t>(1, options.max_in_flight));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  ProbeOutcome out;
  for (auto& s : slots) {
    if (s) out.records.push_back(std::move(*s));
  }
  std::sort(failures.begin(), failures.end(),
            [](const ProbeFailure& a, const ProbeFailure& b) { return a.file < b.file; });
  out.failures = std::move(failures);
  out.network_calls = calls.load();
  out.cache_hits = hits.load();
  return out;
}

ProbeOutcome probe_series(const synth::SeriesSidecar& series, Backend& backend, ProbeStore& store,
                          const ProbeOptions& options) {
  std::vector<ProbeItem> items;
  items.reserve(series.entries.size());
  for (const auto& e : series.entries) items.push_back({e.digest, e.file});
  return probe_images(items, backend, store, options);
}

}  // namespace cfaudit::probe
