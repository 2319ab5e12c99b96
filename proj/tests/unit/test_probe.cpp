#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/probe/probe.hpp"
#include "cfaudit/synth.hpp"
#include "test_util.hpp"

namespace cfaudit::probe {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

// Counts calls, tracks the peak number of concurrent calls, and fails the
// first `transport_failures` calls for each digest listed in `flaky`.
class StubBackend final : public Backend {
 public:
  explicit StubBackend(std::string id = "stub", bool reentrant = true)
      : id_(std::move(id)), reentrant_(reentrant) {}

  std::string id() const override { return id_; }
  bool reentrant() const override { return reentrant_; }

  std::vector<LabelPrediction> classify(const ProbeImage& image) override {
    const int now = ++active_;
    int peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    ++calls_;
    --active_;
    {
      std::lock_guard lock(mu_);
      if (always_fail_.contains(image.digest)) {
        throw BackendError(fail_reason_, "stub failure");
      }
      auto it = flaky_.find(image.digest);
      if (it != flaky_.end() && it->second > 0) {
        --it->second;
        throw BackendError(BackendError::Reason::kTransport, "stub transport failure");
      }
    }
    return {{" Person ", " Person ", true, 0.9}, {"Smile", "Smile", false, 0.2}};
  }

  std::atomic<int> calls_{0};
  std::atomic<int> peak_{0};
  std::chrono::milliseconds delay_{0};
  std::map<std::string, int> flaky_;
  std::set<std::string> always_fail_;
  BackendError::Reason fail_reason_ = BackendError::Reason::kTransport;

 private:
  std::string id_;
  bool reentrant_;
  std::atomic<int> active_{0};
  std::mutex mu_;
};

std::vector<ProbeItem> write_images(const fs::path& dir, int count, std::uint64_t seed = 1) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::vector<ProbeItem> items;
  for (int i = 0; i < count; ++i) {
    const Bytes png = encode_png(testing::random_plane(rng, 4, 4));
    const fs::path p = dir / ("img_" + std::to_string(i) + ".png");
    write_file_atomic(p, png);
    items.push_back({sha256_hex(png), p});
  }
  return items;
}

ProbeOptions fast_options() {
  ProbeOptions o;
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

TEST(Labels, NormalizeLowercasesAndTrims) {
  EXPECT_EQ(normalize_label("  Fashion Model\t"), "fashion model");
  EXPECT_EQ(normalize_label("nurse"), "nurse");
}

TEST(Labels, DuplicatesMergeAfterNormalization) {
  const auto out = normalize_predictions({{"Nurse", "Nurse", false, 0.3},
                                          {"nurse ", "nurse ", true, 0.8},
                                          {"Doctor", "Doctor", true, 0.6}});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].label, "doctor");
  EXPECT_EQ(out[1].label, "nurse");
  EXPECT_TRUE(out[1].present);
  EXPECT_EQ(out[1].confidence, 0.8);
  EXPECT_EQ(out[1].raw_label, "Nurse");
}

TEST(Labels, NonFiniteConfidenceIsProtocolError) {
  try {
    normalize_predictions({{"x", "x", true, std::nan("")}});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.reason(), BackendError::Reason::kProtocol);
  }
}

GridValueFn constant_grid(double a) {
  return [a](const std::string&) { return std::optional<double>(a); };
}

ProbeImage image_with_digest(const std::string& d) { return ProbeImage{d, {}}; }

TEST(Simulator, SaturatedLabels) {
  SimulatedBackend always({{"on", 60.0, 0.0, 1, true}, {"off", -60.0, 0.0, 1, true}},
                          constant_grid(1.5));
  for (int i = 0; i < 20; ++i) {
    const auto p = classify(always, image_with_digest("d" + std::to_string(i)));
    ASSERT_EQ(p.size(), 2u);
    EXPECT_FALSE(p[0].present);  // "off" sorts first
    EXPECT_TRUE(p[1].present);
  }
}

TEST(Simulator, ConstantHalfProbability) {
  for (double a : {-2.0, 0.0, 1.3}) {
    EXPECT_EQ(SimulatedBackend::probability({"x", 0.0, 0.0, 1, false}, a), 0.5);
  }
}

TEST(Simulator, DeterministicThresholdAtZero) {
  std::map<std::string, double> grid{{"neg", -0.01}, {"zero", 0.0}, {"pos", 0.7}};
  SimulatedBackend b({{"x", 0.0, 1.0, 1, true}},
                     [&](const std::string& d) { return std::optional<double>(grid.at(d)); });
  EXPECT_FALSE(classify(b, image_with_digest("neg"))[0].present);
  EXPECT_TRUE(classify(b, image_with_digest("zero"))[0].present);
  EXPECT_TRUE(classify(b, image_with_digest("pos"))[0].present);
  EXPECT_DOUBLE_EQ(classify(b, image_with_digest("pos"))[0].confidence, 1.0 / (1.0 + std::exp(-0.7)));
}

TEST(Simulator, StochasticRatesWithinBinomialBands) {
  const std::vector<double> grid{-2.0, -4.0 / 3.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0};
  const int n = 500;
  SimulatedBackend b({{"x", 0.0, 0.3, 42, false}}, [&](const std::string& d) {
    return std::optional<double>(grid.at(static_cast<std::size_t>(d[0] - '0')));
  });
  for (std::size_t k = 0; k < grid.size(); ++k) {
    int present = 0;
    for (int i = 0; i < n; ++i) {
      present += classify(b, image_with_digest(std::to_string(k) + "/" + std::to_string(i)))[0].present;
    }
    const double p = 1.0 / (1.0 + std::exp(-0.3 * grid[k]));
    const double sd = std::sqrt(p * (1.0 - p) / n);
    EXPECT_LT(std::abs(present / static_cast<double>(n) - p), 3.0 * sd) << "k=" << k;
  }
}

TEST(Simulator, ReproducibleDraws) {
  SimulatedBackend a({{"x", 0.0, 0.3, 5, false}}, constant_grid(1.0));
  SimulatedBackend b({{"x", 0.0, 0.3, 5, false}}, constant_grid(1.0));
  for (int i = 0; i < 50; ++i) {
    const auto img = image_with_digest("d" + std::to_string(i));
    EXPECT_EQ(classify(a, img), classify(b, img));
  }
}

TEST(Simulator, UnknownImageIsSimulatorError) {
  SimulatedBackend b({{"x", 0.0, 0.3, 5, false}},
                     [](const std::string&) { return std::optional<double>(); });
  try {
    classify(b, image_with_digest("nope"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.reason(), BackendError::Reason::kSimulator);
  }
}

TEST(Replay, PredictionsEqualFixture) {
  TempDir dir;
  write_file_atomic(dir / "fx.json", std::string(R"({
    "backend": "google",
    "responses": {"abc": [{"label": "Nurse", "present": true, "confidence": 0.91}]}
  })"));
  ReplayBackend b(dir / "fx.json");
  EXPECT_EQ(b.id(), "google");
  const auto p = classify(b, image_with_digest("abc"));
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].label, "nurse");
  EXPECT_EQ(p[0].raw_label, "Nurse");
  EXPECT_TRUE(p[0].present);
  EXPECT_EQ(p[0].confidence, 0.91);
  try {
    classify(b, image_with_digest("zzz"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.reason(), BackendError::Reason::kProtocol);
  }
}

TEST(Store, AppendFindAndReopen) {
  TempDir dir;
  const fs::path p = dir / "store.jsonl";
  {
    ProbeStore s = ProbeStore::open(p);
    s.append({"d1", "b", {{"x", "X", true, 0.5}}, "2020-01-01T00:00:00Z", false});
    s.append({"d2", "b", {}, "2020-01-01T00:00:01Z", false});
    const ProbeRecord again = s.append({"d1", "b", {}, "later", false});
    EXPECT_EQ(again.fetched_at, "2020-01-01T00:00:00Z");
    EXPECT_EQ(s.size(), 2u);
  }
  EXPECT_EQ(line_count(p), 2u);
  EXPECT_TRUE(fs::exists(ProbeStore::index_path(p)));
  EXPECT_EQ(line_count(ProbeStore::index_path(p)), 2u);
  ProbeStore s = ProbeStore::open(p);
  ASSERT_TRUE(s.find("b", "d1").has_value());
  EXPECT_EQ(s.find("b", "d1")->predictions[0].raw_label, "X");
  EXPECT_FALSE(s.find("other", "d1").has_value());
}

TEST(Store, TornFinalLineIsDropped) {
  TempDir dir;
  const fs::path p = dir / "store.jsonl";
  {
    ProbeStore s = ProbeStore::open(p);
    s.append({"d1", "b", {}, "t", false});
  }
  const auto good_size = fs::file_size(p);
  std::ofstream(p, std::ios::app) << R"({"image_id":"d2","backend_id":"b","predi)";
  ProbeStore s = ProbeStore::open(p);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_GT(s.dropped_tail_bytes(), 0u);
  EXPECT_EQ(fs::file_size(p), good_size);
}

TEST(Store, CorruptMiddleLineIsDataError) {
  TempDir dir;
  const fs::path p = dir / "store.jsonl";
  {
    ProbeStore s = ProbeStore::open(p);
    s.append({"d1", "b", {}, "t", false});
  }
  std::ofstream(p, std::ios::app) << "garbage\n";
  {
    std::ofstream out(p, std::ios::app);
    out << record_to_json_line({"d2", "b", {}, "t", false});
  }
  EXPECT_THROW(ProbeStore::open(p), DataError);
}

TEST(Store, SecondWriterIsLockedOut) {
  TempDir dir;
  const fs::path p = dir / "store.jsonl";
  ProbeStore first = ProbeStore::open(p);
  EXPECT_THROW(ProbeStore::open(p), ConfigError);
  EXPECT_NO_THROW(ProbeStore::open(p, {.read_only = true}));
}

TEST(ProbeSeries, FreshThenCachedThenPartial) {
  TempDir dir;
  const auto items = write_images(dir / "img", 7);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;

  const auto first = probe_images(items, backend, store, fast_options());
  EXPECT_EQ(first.network_calls, 7u);
  EXPECT_EQ(first.records.size(), 7u);
  for (const auto& r : first.records) EXPECT_FALSE(r.from_cache);
  EXPECT_EQ(first.records[0].predictions[0].label, "person");

  const auto second = probe_images(items, backend, store, fast_options());
  EXPECT_EQ(second.network_calls, 0u);
  EXPECT_EQ(second.cache_hits, 7u);
  ASSERT_EQ(second.records.size(), 7u);
  for (const auto& r : second.records) EXPECT_TRUE(r.from_cache);
  EXPECT_EQ(line_count(dir / "s.jsonl"), 7u);
}

TEST(ProbeSeries, TwoPreCachedMeansFiveCalls) {
  TempDir dir;
  const auto items = write_images(dir / "img", 7);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  store.append({items[1].digest, "stub", {}, "seed", false});
  store.append({items[4].digest, "stub", {}, "seed", false});
  StubBackend backend;
  const auto out = probe_images(items, backend, store, fast_options());
  EXPECT_EQ(out.network_calls, 5u);
  EXPECT_EQ(backend.calls_.load(), 5);
  EXPECT_EQ(out.cache_hits, 2u);
  EXPECT_EQ(out.records.size(), 7u);
  EXPECT_EQ(store.size(), 7u);
}

TEST(ProbeSeries, IdenticalBytesUnderNewNameHitCache) {
  TempDir dir;
  const auto items = write_images(dir / "img", 1);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;
  probe_images(items, backend, store, fast_options());
  const ImagePlane decoded = read_image(items[0].file);
  write_png(dir / "copy.png", decoded);
  const auto out = probe_images({{items[0].digest, dir / "copy.png"}}, backend, store, fast_options());
  EXPECT_EQ(out.network_calls, 0u);
  EXPECT_EQ(out.cache_hits, 1u);
}

TEST(ProbeSeries, PartialFailurePersistsCompletedRecords) {
  TempDir dir;
  const auto items = write_images(dir / "img", 5);
  StubBackend backend;
  backend.always_fail_ = {items[2].digest};
  ProbeOutcome out;
  {
    ProbeStore store = ProbeStore::open(dir / "s.jsonl");
    out = probe_images(items, backend, store, fast_options());
  }
  EXPECT_EQ(out.records.size(), 4u);
  ASSERT_EQ(out.failures.size(), 1u);
  EXPECT_EQ(out.failures[0].digest, items[2].digest);
  EXPECT_EQ(out.failures[0].reason, BackendError::Reason::kTransport);
  EXPECT_EQ(ProbeStore::open(dir / "s.jsonl", {.read_only = true}).size(), 4u);
}

TEST(ProbeSeries, TransportErrorsRetryThrottleDoesNot) {
  TempDir dir;
  const auto items = write_images(dir / "img", 2);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;
  backend.flaky_[items[0].digest] = 2;
  std::vector<std::chrono::milliseconds> delays;
  ProbeOptions o;
  o.max_in_flight = 1;
  o.sleep = [&](std::chrono::milliseconds d) { delays.push_back(d); };
  const auto out = probe_images(items, backend, store, o);
  EXPECT_TRUE(out.failures.empty());
  EXPECT_EQ(out.network_calls, 4u);
  ASSERT_EQ(delays.size(), 2u);
  EXPECT_LT(delays[0], delays[1]);

  StubBackend throttled;
  throttled.always_fail_ = {items[0].digest};
  throttled.fail_reason_ = BackendError::Reason::kThrottle;
  ProbeStore other = ProbeStore::open(dir / "t.jsonl");
  const auto t = probe_images({items[0]}, throttled, other, o);
  EXPECT_EQ(t.network_calls, 1u);
  ASSERT_EQ(t.failures.size(), 1u);
  EXPECT_EQ(t.failures[0].reason, BackendError::Reason::kThrottle);
}

TEST(ProbeSeries, ConcurrencyNeverExceedsMaxInFlight) {
  TempDir dir;
  const auto items = write_images(dir / "img", 24);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;
  backend.delay_ = std::chrono::milliseconds(5);
  ProbeOptions o = fast_options();
  o.max_in_flight = 3;
  probe_images(items, backend, store, o);
  EXPECT_LE(backend.peak_.load(), 3);
  EXPECT_GE(backend.peak_.load(), 2);
}

TEST(ProbeSeries, NonReentrantBackendIsSerialized) {
  TempDir dir;
  const auto items = write_images(dir / "img", 12);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend("serial", false);
  backend.delay_ = std::chrono::milliseconds(3);
  ProbeOptions o = fast_options();
  o.max_in_flight = 4;
  probe_images(items, backend, store, o);
  EXPECT_EQ(backend.peak_.load(), 1);
}

// A record that reached the log before a crash is found on the next run.
TEST(ProbeSeries, ReprobeConvergesAfterCrash) {
  TempDir dir;
  const auto items = write_images(dir / "img", 3);
  {
    ProbeStore store = ProbeStore::open(dir / "s.jsonl");
    store.append({items[0].digest, "stub", {{"person", "person", true, 0.9}}, "t", false});
  }
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;
  const auto out = probe_images(items, backend, store, fast_options());
  EXPECT_EQ(out.network_calls, 2u);
  EXPECT_EQ(line_count(dir / "s.jsonl"), 3u);
}

TEST(TokenBucket, RateHeldOverTenSecondWindows) {
  using Clock = TokenBucket::Clock;
  Clock::time_point now{};
  TokenBucket bucket(
      5.0, 1.0, [&] { return now; }, [&](Clock::duration d) { now += d; });
  std::vector<double> admitted;
  for (int i = 0; i < 200; ++i) {
    bucket.acquire();
    admitted.push_back(std::chrono::duration<double>(now.time_since_epoch()).count());
  }
  for (std::size_t i = 0; i < admitted.size(); ++i) {
    std::size_t in_window = 0;
    for (std::size_t j = i; j < admitted.size() && admitted[j] < admitted[i] + 10.0; ++j) ++in_window;
    if (admitted[i] + 10.0 <= admitted.back()) {
      EXPECT_LE(in_window, 55u);
      EXPECT_GE(in_window, 45u);
    }
  }
}

TEST(TokenBucket, RealClockUnderConcurrentProbe) {
  TempDir dir;
  const auto items = write_images(dir / "img", 40);
  ProbeStore store = ProbeStore::open(dir / "s.jsonl");
  StubBackend backend;
  ProbeOptions o = fast_options();
  o.max_in_flight = 4;
  o.rps = 100.0;
  const auto start = std::chrono::steady_clock::now();
  probe_images(items, backend, store, o);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_GE(elapsed, 0.9 * 39.0 / 100.0);
}

TEST(Records, JsonLineRoundTrip) {
  const ProbeRecord r{"abc", "google", {{"nurse", "Nurse", true, 0.25}}, "2021-03-04T05:06:07Z", false};
  const ProbeRecord back = record_from_json_line(record_to_json_line(r));
  EXPECT_EQ(back.image_id, r.image_id);
  EXPECT_EQ(back.backend_id, r.backend_id);
  EXPECT_EQ(back.predictions, r.predictions);
  EXPECT_EQ(back.fetched_at, r.fetched_at);
}

TEST(GridValues, SidecarLookup) {
  TempDir dir;
  const synth::AttributeGrid grid = synth::attribute_grid("gender", 3, -1.0, 1.0);
  std::vector<Bytes> pngs;
  std::mt19937_64 rng(1);
  for (int k = 0; k < 3; ++k) pngs.push_back(encode_png(testing::random_plane(rng, 2, 2)));
  const auto side = synth::write_series_bytes("src", grid, pngs, {}, {}, dir.path());
  const GridValueFn fn = grid_values_from({side});
  EXPECT_EQ(fn(sha256_hex(pngs[2])), 1.0);
  EXPECT_FALSE(fn("unknown").has_value());
}

}  // namespace
}  // namespace cfaudit::probe
