// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfaudit/cli.hpp"
#include "cfaudit/codec/codec.hpp"
#include "cfaudit/csv.hpp"
#include "cfaudit/dataset.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/facegeom.hpp"
#include "cfaudit/probe/probe.hpp"
#include "cfaudit/slopes.hpp"
#include "cfaudit/synth.hpp"
#include "cfaudit/toy.hpp"

namespace fs = std::filesystem;
using namespace cfaudit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Scratch {
 public:
  explicit Scratch(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("cfaudit_accept_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

fs::path fixture(const std::string& name) { return fs::path(CFAUDIT_FIXTURE_DIR) / name; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. Planted-bias recovery through synthetic series, the simulated backend,
// the probe store and the slope analysis.
Outcome planted_bias_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  Scratch dir("planted");
  cli::RunConfig config = cli::parse_config("", dir.path());
  config.simulate.n = 200;
  config.simulate.K = 7;
  config.simulate.lo = -2.0;
  config.simulate.hi = 2.0;
  config.simulate.betas = {0.3, 0.0, -0.3};
  config.simulate.seeds = {1, 2, 3};
  const cli::SimulationRun run = cli::run_planted_simulation(config, dir.path() / "work");

  std::map<std::uint64_t, std::map<double, slopes::LabelSlope>> by_seed;
  bool ok = true;
  std::string detail;
  for (const auto& r : run.results) {
    if (!r.estimated && r.beta1 != 0.0) ok = false;
    by_seed[r.seed][r.beta1] = r.estimate;
    if (r.beta1 > 0) ok &= r.estimate.slope > 0 && r.estimate.p_value < 0.001;
    if (r.beta1 == 0) ok &= !r.passes_filter;
  }
  for (const auto& [seed, m] : by_seed) {
    const double lo = m.at(-0.3).slope, mid = m.at(0.0).slope, hi = m.at(0.3).slope;
    ok &= lo < mid && mid < hi;
    detail += "seed " + std::to_string(seed) + " b=(" + fmt("%.3f", lo) + "," + fmt("%.3f", mid) +
              "," + fmt("%.3f", hi) + ") p+=" + fmt("%.1e", m.at(0.3).p_value) + "; ";
  }
  const double secs = seconds_since(t0);
  ok &= secs <= 120.0;
  return {ok, detail + fmt("%.1fs", secs)};
}

// 2. OLS against the closed form cov/var and the textbook t statistic.
Outcome ols_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 2.0), half(0.5, 3.0);
  double worst_b = 0.0, worst_t = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int K = trial % 2 ? 7 : 5;
    const double h = half(rng);
    std::vector<double> a, z;
    for (int k = 0; k < K; ++k) {
      a.push_back(-h + 2.0 * h * k / (K - 1));
      z.push_back(u(rng));
    }
    double ma = 0, mz = 0;
    for (int k = 0; k < K; ++k) {
      ma += a[k] / K;
      mz += z[k] / K;
    }
    double cov = 0, var = 0;
    for (int k = 0; k < K; ++k) {
      cov += (a[k] - ma) * (z[k] - mz);
      var += (a[k] - ma) * (a[k] - ma);
    }
    const double b = cov / var;
    const double c = mz - b * ma;
    double rss = 0;
    for (int k = 0; k < K; ++k) rss += std::pow(z[k] - c - b * a[k], 2);
    const double t = b / std::sqrt(rss / (K - 2) / var);
    const slopes::OlsFit f = slopes::ols_slope(a, z);
    worst_b = std::max(worst_b, std::fabs(f.slope - b));
    worst_t = std::max(worst_t, std::fabs(f.t_stat - t));
  }
  return {worst_b <= 1e-9 && worst_t <= 1e-9,
          "max |db|=" + fmt("%.2e", worst_b) + " max |dt|=" + fmt("%.2e", worst_t)};
}

// 3. z_c = 1 exactly; zero-center labels land in exclusions only.
Outcome normalization_exactness() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<double> grid = synth::attribute_grid("gender", 7, -2.0, 2.0).values;
  std::vector<slopes::JoinedRecord> recs;
  for (int s = 0; s < 60; ++s) {
    for (std::size_t k = 0; k < 7; ++k) {
      std::vector<probe::LabelPrediction> preds;
      for (int l = 0; l < 12; ++l) {
        const std::string label = "label" + std::to_string(l);
        // Labels 0-2 never fire at the center.
        const bool present = (l < 3 && k == 3) ? false : u(rng) < 0.05 + 0.07 * l;
        preds.push_back({label, label, present, 0.5});
      }
      recs.push_back({"sim", "src" + std::to_string(s), k + 1, 7, grid[k], preds});
    }
  }
  const slopes::Analysis a = slopes::analyze(recs);
  Scratch dir("norm");
  slopes::report(a.slopes, a.rates, a.exclusions, nlohmann::json::object(), dir.path());
  const std::string table = slurp(dir.path() / "slopes.csv");

  bool ok = true;
  std::size_t centered = 0, excluded = 0;
  for (const auto& r : a.rates) {
    const bool zero_center = r.y[3] == 0.0;
    const bool in_exclusions =
        std::any_of(a.exclusions.begin(), a.exclusions.end(),
                    [&](const slopes::Exclusion& e) { return e.label == r.label; });
    const bool in_slopes = std::any_of(a.slopes.begin(), a.slopes.end(),
                                       [&](const slopes::LabelSlope& s) { return s.label == r.label; });
    const bool in_table = table.find("," + r.label + ",") != std::string::npos;
    if (zero_center) {
      ok &= in_exclusions && !in_slopes && !in_table;
      ++excluded;
    } else {
      ok &= slopes::normalize(r).z[3] == 1.0 && in_slopes && !in_exclusions;
      ++centered;
    }
  }
  ok &= excluded == 3 && centered == 9;
  return {ok, std::to_string(centered) + " labels with z_c == 1, " + std::to_string(excluded) +
                  " zero-center labels excluded"};
}

// 4. Grid values follow lo + (hi - lo) * (k - 1) / (K - 1) bit for bit.
Outcome grid_exactness() {
  const synth::AttributeGrid g = synth::attribute_grid("gender", 7, -2.0, 2.0);
  bool ok = g.values.size() == 7;
  for (int k = 1; k <= 7 && ok; ++k) {
    const double t = static_cast<double>(k - 1) / 6.0;
    ok &= g.values[k - 1] == -2.0 + 4.0 * t;
  }
  const double thirds[7] = {-2.0, -4.0 / 3.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0};
  double worst = 0.0;
  for (int k = 0; k < 7; ++k) worst = std::max(worst, std::fabs(g.values[k] - thirds[k]));
  ok &= worst <= 4.0 * std::numeric_limits<double>::epsilon();

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.001, 100.0);
  int centers = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = 3 + 2 * (trial % 6);
    const double h = u(rng);
    const auto v = synth::attribute_grid("x", K, -h, h).values;
    if (v[(K - 1) / 2] == 0.0) ++centers;
  }
  ok &= centers == 1000;
  return {ok, "K=7 grid matches the formula; max deviation from exact thirds " + fmt("%.1e", worst) +
                  "; exact zero center in " + std::to_string(centers) + "/1000 symmetric grids"};
}

// 5. Compositing leaves mask=0 pixels bit-identical and agrees with a
// per-pixel oracle.
Outcome compositing_exactness() {
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<int> dim(8, 64), byte(0, 255);
  std::bernoulli_distribution coin(0.5);
  auto plane = [&](int h, int w) {
    ImagePlane p(h, w, 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) p.at(y, x, c) = static_cast<float>(byte(rng)) / 255.0f;
    return p;
  };
  std::size_t mismatches = 0, checked = 0;
  for (int f = 0; f < 50; ++f) {
    const int H = dim(rng) + 8, W = dim(rng) + 8;
    const ImagePlane img = plane(H, W);
    const int bw = std::uniform_int_distribution<int>(1, W)(rng);
    const int bh = std::uniform_int_distribution<int>(1, H)(rng);
    const int bx = std::uniform_int_distribution<int>(0, W - bw)(rng);
    const int by = std::uniform_int_distribution<int>(0, H - bh)(rng);
    const FaceBox box{bx, by, bw, bh, 1.0};
    const ImagePlane edit = plane(bh, bw);
    SkinMask mask(bh, bw);
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) mask.set(y, x, coin(rng));
    const ImagePlane out = composite(img, edit, mask, box);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const bool inside = x >= bx && x < bx + bw && y >= by && y < by + bh;
        const bool take = inside && mask.at(y - by, x - bx) != 0;
        for (int c = 0; c < 3; ++c) {
          const float want = take ? edit.at(y - by, x - bx, c) : img.at(y, x, c);
          std::uint32_t a, b;
          const float got = out.at(y, x, c);
          std::memcpy(&a, &got, 4);
          std::memcpy(&b, &want, 4);
          mismatches += a != b;
          ++checked;
        }
      }
    }
  }
  return {mismatches == 0, std::to_string(checked) + " channel values checked, " +
                               std::to_string(mismatches) + " mismatches"};
}

double average_ranks_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t m = i; m <= j; ++m) r[idx[m]] = (i + j) / 2.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

struct CodecRun {
  double recon_start = 0.0;
  double recon_end = 0.0;
  double held_accuracy = 0.0;
  double rho = 0.0;
};

CodecRun train_toy_codec(double lambda_max, const toy::ToySet& train, const toy::ToySet& held) {
  codec::CodecConfig cfg;
  cfg.resolution = 64;
  cfg.lambda_max = lambda_max;
  cfg.lambda_ramp_steps = 500;
  cfg.seed = 1;
  codec::TrainState state = codec::init_train_state(cfg, toy::default_specs());
  CodecRun out;
  out.recon_start = codec::reconstruction_mse(state.model, train.data);
  codec::TrainOptions opts;
  opts.steps = 2000;
  codec::run_training(state, train.data, cfg, opts);
  out.recon_end = codec::reconstruction_mse(state.model, train.data);
  out.held_accuracy = codec::discriminator_accuracy(state.model, held.data, 0);

  const std::vector<double> grid = synth::attribute_grid("gender", 7, -2.0, 2.0).values;
  for (int i = 0; i < 20; ++i) {
    const toy::FaceParams& face = held.faces[static_cast<std::size_t>(i)];
    const codec::LatentCode code = state.model.encode(toy::render_face_crop(face, cfg.resolution));
    std::vector<double> scores;
    for (double a : grid) {
      codec::AttributeVector v;
      v.values["gender"] = a;
      v.values["mouth_open"] = face.mouth_open ? 1.0 : -1.0;
      scores.push_back(toy::beard_score(state.model.decode(code, v), face));
    }
    out.rho += average_ranks_spearman(grid, scores) / 20.0;
  }
  return out;
}

// 6. Toy codec training at 64x64 with the adversary and without it.
Outcome toy_codec_training() {
  const auto t0 = std::chrono::steady_clock::now();
  const toy::ToySet train = toy::make_training_set(500, 64, 3, 11);
  const toy::ToySet held = toy::make_training_set(400, 64, 3, 99);
  double positives = 0;
  for (Eigen::Index j = 0; j < held.data.labels.cols(); ++j) positives += held.data.labels(0, j);
  const double p = positives / static_cast<double>(held.data.labels.cols());
  const double chance = std::max(p, 1.0 - p);

  const CodecRun with = train_toy_codec(0.01, train, held);
  const CodecRun without = train_toy_codec(0.0, train, held);
  const double secs = seconds_since(t0);

  const bool a = with.recon_end <= 0.5 * with.recon_start;
  const bool b = std::fabs(with.held_accuracy - chance) <= 0.10 &&
                 without.held_accuracy >= chance + 0.15;
  const bool c = with.rho >= 0.9;
  return {a && b && c && secs <= 900.0,
          "(a) mse " + fmt("%.4f", with.recon_start) + "->" + fmt("%.4f", with.recon_end) +
              " (b) held-out acc " + fmt("%.3f", with.held_accuracy) + " vs chance " +
              fmt("%.3f", chance) + ", ablation " + fmt("%.3f", without.held_accuracy) +
              " (c) mean rho " + fmt("%.3f", with.rho) + "; " + fmt("%.0fs", secs)};
}

// 7. Reconstruction gradients against central differences.
Outcome gradient_check() {
  codec::CodecConfig c;
  c.resolution = 8;
  c.channels = 1;
  c.encoder_hidden = {16};
  c.latent_dim = 4;
  c.decoder_hidden = {16};
  c.discriminator_hidden = {8};
  c.seed = 3;
  codec::TrainState s = codec::init_train_state(c, toy::default_specs());
  codec::FaderCodec& m = s.model;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd x(64, 6), labels(2, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < labels.size(); ++i) labels.data()[i] = u(rng) < 0.5 ? 0.0 : 1.0;
  const Eigen::MatrixXd cond = codec::FaderCodec::conditioning_from_labels(labels);
  Eigen::VectorXd ge = Eigen::VectorXd::Zero(m.encoder().params().size());
  Eigen::VectorXd gd = Eigen::VectorXd::Zero(m.decoder().params().size());
  m.reconstruction_loss(x, cond, &ge, &gd);

  const Eigen::Index ne = ge.size();
  std::uniform_int_distribution<Eigen::Index> pick(0, ne + gd.size() - 1);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Eigen::Index idx = pick(rng);
    Eigen::VectorXd& params = idx < ne ? m.encoder().params() : m.decoder().params();
    const Eigen::Index j = idx < ne ? idx : idx - ne;
    const double analytic = idx < ne ? ge[j] : gd[j];
    const double saved = params[j];
    const double h = 1e-6;
    params[j] = saved + h;
    const double up = m.reconstruction_loss(x, cond);
    params[j] = saved - h;
    const double down = m.reconstruction_loss(x, cond);
    params[j] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-7});
    worst = std::max(worst, std::fabs(analytic - numeric) / scale);
  }
  return {worst <= 1e-3, "max relative error " + fmt("%.2e", worst) + " over 20 coordinates"};
}

class CountingBackend final : public probe::Backend {
 public:
  std::string id() const override { return "counting"; }
  std::vector<probe::LabelPrediction> classify(const probe::ProbeImage&) override {
    ++calls;
    return {{"person", "person", true, 0.9}};
  }
  std::atomic<int> calls{0};
};

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

// 8. A re-probe is served from the store without backend calls.
Outcome cache_idempotency() {
  Scratch dir("cache");
  const synth::AttributeGrid grid = synth::attribute_grid("gender", 7, -2.0, 2.0);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<Bytes> pngs;
  for (int k = 0; k < 7; ++k) {
    ImagePlane p(4, 4, 3);
    for (int i = 0; i < 48; ++i) p.data()[i] = static_cast<float>(byte(rng)) / 255.0f;
    pngs.push_back(encode_png(p));
  }
  const synth::SeriesSidecar side =
      synth::write_series_bytes("src", grid, pngs, {}, {}, dir.path() / "series");
  const fs::path store_path = dir.path() / "probe.jsonl";
  CountingBackend backend;
  probe::ProbeOptions opts;

  probe::ProbeOutcome first, second;
  {
    probe::ProbeStore store = probe::ProbeStore::open(store_path);
    first = probe::probe_series(side, backend, store, opts);
  }
  const std::size_t lines = line_count(store_path);
  const int calls_before = backend.calls.load();
  {
    probe::ProbeStore store = probe::ProbeStore::open(store_path);
    second = probe::probe_series(side, backend, store, opts);
  }
  const bool all_cached = std::all_of(second.records.begin(), second.records.end(),
                                      [](const probe::ProbeRecord& r) { return r.from_cache; });
  const bool ok = first.network_calls == 7 && second.network_calls == 0 &&
                  backend.calls.load() == calls_before && second.records.size() == 7 &&
                  all_cached && line_count(store_path) == lines;
  return {ok, "first " + std::to_string(first.network_calls) + " calls, re-probe " +
                  std::to_string(second.network_calls) + " calls, " +
                  std::to_string(second.cache_hits) + " cache hits, store lines " +
                  std::to_string(lines) + "->" + std::to_string(line_count(store_path))};
}

// 9. Report rows from the Google fixture.
Outcome report_fixture() {
  Scratch dir("report");
  const slopes::Analysis a =
      slopes::analysis_from_json(nlohmann::json::parse(slurp(fixture("table1_google.json"))));
  slopes::report(slopes::filter_labels(a.slopes), a.rates, a.exclusions, nlohmann::json::object(),
                 dir.path());
  const auto rows = csv::parse(slurp(dir.path() / "google_slopes.csv"));
  const std::vector<std::pair<std::string, std::string>> want{
      {"fashion model", "-0.262"}, {"model", "-0.261"}, {"secretary", "-0.14"}, {"nurse", "-0.073"}};
  bool ok = rows.size() == want.size() + 1;
  std::string got;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    got += rows[i][1] + "=" + rows[i][2] + " ";
    if (ok) ok &= rows[i][1] == want[i - 1].first && rows[i][2] == want[i - 1].second;
  }
  return {ok, got};
}

// 10. Representation statistics on hand-tallied fixtures.
Outcome stats_fixtures() {
  bool ok = true;
  const DatasetManifest toy_manifest = load_manifest(fixture("toy_manifest.json"));
  for (const auto& row : representation_stats(toy_manifest, "gender")) {
    if (row.keyword == "nurse") {
      ok &= row.n == 4 && row.proportions.at("female") == 0.75 && row.proportions.at("male") == 0.25;
    } else if (row.keyword == "engineer") {
      ok &= row.n == 3 && row.proportions.at("female") == 1.0 / 3.0 &&
            row.proportions.at("male") == 2.0 / 3.0;
    } else {
      ok = false;
    }
  }

  DatasetManifest m;
  std::size_t id = 0;
  for (const auto& row : csv::parse(slurp(fixture("table3_gender_counts.csv")))) {
    if (row[0] == "keyword") continue;
    const std::pair<std::string, int> groups[] = {{"female", std::stoi(row[1])},
                                                  {"male", std::stoi(row[2])}};
    for (const auto& [value, count] : groups) {
      for (int c = 0; c < count; ++c) {
        ImageRecord r;
        r.id = sha256_hex(std::to_string(id++));
        r.path = row[0] + "/" + r.id + ".png";
        r.keyword = row[0];
        r.annotations["gender"] = value;
        m.records.push_back(std::move(r));
      }
    }
  }
  m.attribute_domain["gender"] = {"female", "male"};
  double nutritionist = -1.0;
  for (const auto& row : representation_stats(m, "gender")) {
    if (row.keyword == "nutritionist") nutritionist = row.proportions.at("female");
  }
  ok &= nutritionist == 0.921;
  return {ok, "toy manifest tallies exact; nutritionist female share " + fmt("%.3f", nutritionist)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"planted-bias recovery", planted_bias_recovery},
      {"OLS oracle equivalence", ols_oracle},
      {"normalization exactness", normalization_exactness},
      {"grid exactness", grid_exactness},
      {"mask compositing bit-exactness", compositing_exactness},
      {"toy codec training", toy_codec_training},
      {"gradient check", gradient_check},
      {"cache idempotency", cache_idempotency},
      {"report fixture", report_fixture},
      {"representation stats", stats_fixtures},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << i + 1 << " " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
