#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "cfaudit/cli.hpp"
#include "cfaudit/csv.hpp"
#include "cfaudit/dataset.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/facegeom.hpp"
#include "cfaudit/probe/remote.hpp"
#include "cfaudit/synth.hpp"

namespace cfaudit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
}

void require_attributes(const RunConfig& config) {
  if (config.attributes.empty()) throw ConfigError("no [[attributes]] declared in the config");
}

void require_path(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError("paths." + what + " is not set");
}

fs::path annotations_for(const fs::path& explicit_path, const fs::path& root) {
  if (!explicit_path.empty()) return explicit_path;
  const fs::path guess = root / "annotations.csv";
  return fs::exists(guess) ? guess : fs::path{};
}

DatasetManifest scan_dataset(const RunConfig& config, std::ostream& out, std::size_t* skipped) {
  require_path(config.paths.dataset_root, "dataset_root");
  BuildResult built = build_manifest(config.paths.dataset_root, config.keywords);
  if (skipped) *skipped = built.skipped;
  const fs::path ann = annotations_for(config.paths.annotations, config.paths.dataset_root);
  if (!ann.empty()) {
    const auto res = attach_annotations(built.manifest, ann);
    out << json{{"event", "annotations"}, {"applied", res.applied},
                {"unknown_ids", res.unknown_ids.size()}}
               .dump()
        << "\n";
  }
  return std::move(built.manifest);
}

codec::TrainOptions train_options(const RunConfig& config, std::ostream& out) {
  codec::TrainOptions o;
  o.steps = config.train_steps;
  o.progress = &out;
  o.log_every = config.log_every;
  o.checkpoint_every = config.checkpoint_every;
  if (config.checkpoint_every > 0) o.checkpoint_path = config.paths.checkpoint;
  o.failure_dump_path = config.paths.model;
  o.failure_dump_path += ".failure";
  return o;
}

std::unique_ptr<probe::Backend> make_backend(const RunConfig& config,
                                             const std::vector<synth::SeriesSidecar>& series) {
  const std::string& name = config.probe.backend;
  if (name == "simulated") {
    if (config.probe.simulated.empty()) {
      throw ConfigError("backend 'simulated' needs [[probe.simulated]] entries");
    }
    return probe::make_simulated_backend(config.probe.simulated, probe::grid_values_from(series));
  }
  if (name == "replay") {
    if (config.probe.replay_fixture.empty()) throw ConfigError("probe.replay_fixture is not set");
    return std::make_unique<probe::ReplayBackend>(config.probe.replay_fixture);
  }
  std::shared_ptr<probe::HttpTransport> transport = probe::make_default_transport();
  if (name == "google") {
    return std::make_unique<probe::GoogleVisionBackend>(probe::GoogleVisionBackend::from_env(),
                                                        transport);
  }
  if (name == "amazon") {
    return std::make_unique<probe::RekognitionBackend>(probe::RekognitionBackend::from_env(),
                                                       transport);
  }
  if (name == "ibm") {
    return std::make_unique<probe::WatsonBackend>(probe::WatsonBackend::from_env(), transport);
  }
  if (name == "clarifai") {
    return std::make_unique<probe::ClarifaiBackend>(probe::ClarifaiBackend::from_env(), transport);
  }
  throw ConfigError("unknown backend '" + name + "'");
}

std::string file_digest(const fs::path& p) { return sha256_hex(read_file_bytes(p)); }

template <typename F>
void parallel_for(std::size_t count, F&& body) {
  const std::size_t workers =
      std::min<std::size_t>(count, std::max(1u, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

}  // namespace

JoinResult join_records(const fs::path& series_dir, const probe::ProbeStore& store,
                        const std::string& backend, bool exclude_flagged) {
  JoinResult out;
  for (const auto& s : synth::list_series(series_dir)) {
    if (exclude_flagged && s.has_flag(synth::kFlagFallbackMask)) {
      ++out.flagged_series;
      continue;
    }
    for (const auto& e : s.entries) {
      auto rec = store.find(backend, e.digest);
      if (!rec) {
        ++out.missing;
        continue;
      }
      out.records.push_back(
          slopes::JoinedRecord{backend, s.source_id, e.k, s.grid.size(), e.a, rec->predictions});
    }
  }
  return out;
}

int cmd_train(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    require_attributes(config);
    require_path(config.paths.train_root, "train_root");
    if (fs::exists(config.paths.model) && !options.force) {
      out << json{{"event", "skipped"}, {"reason", "model exists"},
                  {"model", config.paths.model.string()}}
                 .dump()
          << "\n";
      return 0;
    }
    BuildResult built = build_manifest(config.paths.train_root, {});
    const fs::path ann = annotations_for(config.paths.train_annotations, config.paths.train_root);
    if (!ann.empty()) attach_annotations(built.manifest, ann);
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "train"},
                  {"records", built.manifest.records.size()}, {"steps", config.train_steps},
                  {"model", config.paths.model.string()}}
                 .dump()
          << "\n";
      return 0;
    }
    const codec::TrainingSet data =
        codec::load_training_set(built.manifest, config.attributes, config.codec);

    codec::TrainState state = codec::init_train_state(config.codec, config.attributes);
    if (config.checkpoint_every > 0 && fs::exists(config.paths.checkpoint) && !options.force) {
      codec::TrainState resumed = codec::load_checkpoint(config.paths.checkpoint);
      if (!(resumed.model.config() == config.codec) ||
          resumed.model.specs() != config.attributes) {
        throw ConfigError("checkpoint " + config.paths.checkpoint.string() +
                          " was written with a different configuration; rerun with --force");
      }
      out << json{{"event", "resume"}, {"step", resumed.step}}.dump() << "\n";
      state = std::move(resumed);
    }
    codec::run_training(state, data, config.codec, train_options(config, out));
    codec::save_model(state.model, config.paths.model);
    out << json{{"event", "saved"}, {"model", config.paths.model.string()}, {"step", state.step}}
               .dump()
        << "\n";
    return 0;
  });
}

int cmd_synthesize(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                   std::ostream& err) {
  return guarded(err, [&] {
    require_attributes(config);
    if (!fs::exists(config.paths.model)) {
      throw ConfigError("model " + config.paths.model.string() + " does not exist; run train first");
    }
    const codec::FaderCodec model = codec::load_model(config.paths.model);
    const synth::AttributeGrid grid =
        synth::attribute_grid(config.grid.attribute, config.grid.K, config.grid.lo, config.grid.hi);
    std::size_t unreadable = 0;
    const DatasetManifest manifest = scan_dataset(config, out, &unreadable);
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "synthesize"},
                  {"records", manifest.records.size()}, {"K", grid.size()},
                  {"series_dir", config.paths.series_dir.string()}}
                 .dump()
          << "\n";
      return 0;
    }
    save_manifest(manifest, config.paths.manifest);

    const SkinBlobDetector detector;
    const ChromaSkinSegmenter segmenter;
    std::atomic<std::size_t> written{0}, existing{0}, no_face{0}, flagged{0}, failed{0};
    std::mutex err_mu;
    parallel_for(manifest.records.size(), [&](std::size_t i) {
      const ImageRecord& rec = manifest.records[i];
      if (!options.force &&
          fs::exists(synth::series_directory(config.paths.series_dir, rec.id) / synth::kSidecarName)) {
        ++existing;
        return;
      }
      try {
        const ImagePlane image = read_image(rec.path);
        const auto series =
            synth::synthesize_series(image, model, grid, rec, detector, segmenter);
        synth::write_series(series, config.paths.series_dir, true);
        ++written;
        if (!series.flags.empty()) ++flagged;
      } catch (const NoFaceError&) {
        ++no_face;
      } catch (const Error& e) {
        ++failed;
        std::lock_guard lock(err_mu);
        err << "warning: " << rec.path.string() << ": " << e.what() << "\n";
      }
    });
    out << json{{"event", "synthesized"},
                {"records", manifest.records.size()},
                {"written", written.load()},
                {"skipped_existing", existing.load()},
                {"skipped_no_face", no_face.load()},
                {"skipped_unreadable", unreadable},
                {"failed", failed.load()},
                {"flagged", flagged.load()},
                {"images", written.load() * grid.size()}}
               .dump()
        << "\n";
    return failed.load() > 0 ? static_cast<int>(ExitCode::kData) : 0;
  });
}

int cmd_probe(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    const auto series = synth::list_series(config.paths.series_dir);
    if (series.empty()) throw DataError("no series under " + config.paths.series_dir.string());
    auto backend = make_backend(config, series);
    std::size_t images = 0;
    for (const auto& s : series) images += s.entries.size();
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "probe"}, {"backend", backend->id()},
                  {"series", series.size()}, {"images", images},
                  {"store", config.paths.store.string()}}
                 .dump()
          << "\n";
      return 0;
    }
    probe::ProbeStore store =
        probe::ProbeStore::open(config.paths.store, {.fsync = config.probe.fsync});
    std::unique_ptr<probe::TokenBucket> limiter;
    if (config.probe.rps > 0.0) limiter = std::make_unique<probe::TokenBucket>(config.probe.rps);
    probe::ProbeOptions popts;
    popts.max_in_flight = config.probe.max_in_flight;
    popts.retry.max_attempts = config.probe.max_attempts;
    popts.limiter = limiter.get();

    std::size_t calls = 0, hits = 0, records = 0, failures = 0;
    for (const auto& s : series) {
      const auto outcome = probe::probe_series(s, *backend, store, popts);
      calls += outcome.network_calls;
      hits += outcome.cache_hits;
      records += outcome.records.size();
      failures += outcome.failures.size();
      for (const auto& f : outcome.failures) {
        err << "failed: " << f.file.string() << ": " << f.message << "\n";
      }
    }
    const double rate = images ? static_cast<double>(hits) / static_cast<double>(images) : 0.0;
    out << json{{"event", "probed"},   {"backend", backend->id()}, {"images", images},
                {"records", records},  {"network_calls", calls},   {"cache_hits", hits},
                {"cache_hit_rate", rate}, {"failures", failures}}
               .dump()
        << "\n";
    return failures > 0 ? static_cast<int>(ExitCode::kBackend) : 0;
  });
}

int cmd_analyze(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                std::ostream& err) {
  return guarded(err, [&] {
    if (!fs::exists(config.paths.store)) throw DataError("no records: probe store is missing");
    const probe::ProbeStore store =
        probe::ProbeStore::open(config.paths.store, {.read_only = true});
    if (store.size() == 0) throw DataError("no records in probe store " + config.paths.store.string());

    std::vector<std::string> backends;
    for (const auto& r : store.records()) {
      if (std::find(backends.begin(), backends.end(), r.backend_id) == backends.end()) {
        backends.push_back(r.backend_id);
      }
    }
    std::sort(backends.begin(), backends.end());
    std::vector<slopes::JoinedRecord> joined;
    std::size_t flagged = 0, missing = 0;
    for (const auto& b : backends) {
      JoinResult j = join_records(config.paths.series_dir, store, b, config.analysis.exclude_flagged);
      flagged = j.flagged_series;
      missing += j.missing;
      joined.insert(joined.end(), j.records.begin(), j.records.end());
    }
    if (joined.empty()) throw DataError("no records join to series under " + config.paths.series_dir.string());
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "analyze"}, {"records", joined.size()}}.dump()
          << "\n";
      return 0;
    }
    slopes::AnalysisOptions aopts;
    aopts.mode = config.analysis.mode;
    aopts.outcome = config.analysis.use_confidence ? slopes::Outcome::kConfidence
                                                   : slopes::Outcome::kBinary;
    const slopes::Analysis analysis = slopes::analyze(joined, aopts);

    json doc = slopes::analysis_to_json(analysis);
    json meta{{"seed", config.seed},
              {"attribute", config.grid.attribute},
              {"K", joined.front().K},
              {"mode", slopes::to_string(config.analysis.mode)},
              {"outcome", config.analysis.use_confidence ? "confidence" : "binary"},
              {"backends", backends},
              {"store", config.paths.store.filename().string()},
              {"store_sha256", file_digest(config.paths.store)},
              {"excluded_flagged_series", flagged},
              {"unprobed_images", missing}};
    std::vector<double> grid_values;
    for (const auto& r : joined) {
      if (grid_values.size() < r.K) grid_values.resize(r.K);
      grid_values[r.k - 1] = r.a;
    }
    meta["grid"] = grid_values;
    if (!config.attributes.empty()) {
      for (const auto& a : config.attributes) {
        if (a.name == config.grid.attribute) {
          meta["legend"] = {{"negative", a.negative_value}, {"positive", a.positive_value}};
        }
      }
    }
    doc["metadata"] = meta;
    write_file_atomic(config.paths.analysis, doc.dump(2) + "\n");
    out << json{{"event", "analyzed"}, {"records", joined.size()},
                {"labels", analysis.rates.size()}, {"slopes", analysis.slopes.size()},
                {"exclusions", analysis.exclusions.size()},
                {"analysis", config.paths.analysis.string()}}
               .dump()
        << "\n";
    return 0;
  });
}

int cmd_report(const RunConfig& config, const CommandOptions& options, std::ostream& out,
               std::ostream& err) {
  return guarded(err, [&] {
    if (!fs::exists(config.paths.analysis)) {
      throw ConfigError("analysis " + config.paths.analysis.string() + " is missing; run analyze first");
    }
    const Bytes raw = read_file_bytes(config.paths.analysis);
    json doc;
    try {
      doc = json::parse(raw.begin(), raw.end());
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed analysis file: ") + e.what());
    }
    const slopes::Analysis analysis = slopes::analysis_from_json(doc);
    const auto kept =
        slopes::filter_labels(analysis.slopes, config.analysis.p_max, config.analysis.min_abs_slope);
    json meta = doc.value("metadata", json::object());
    meta["p_max"] = config.analysis.p_max;
    meta["min_abs_slope"] = config.analysis.min_abs_slope;
    meta["analysis_sha256"] = sha256_hex(raw);
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "report"}, {"rows", kept.size()}}.dump() << "\n";
      return 0;
    }
    const auto files = slopes::report(kept, analysis.rates, analysis.exclusions, meta,
                                      config.paths.report_dir);
    out << json{{"event", "reported"}, {"rows", kept.size()}, {"curves", files.curves.size()},
                {"report_dir", config.paths.report_dir.string()}}
               .dump()
        << "\n";
    return 0;
  });
}

std::string planted_label(double beta1) { return "planted(" + csv::format_number(beta1) + ")"; }

SimulationRun run_planted_simulation(const RunConfig& config, const fs::path& work_dir,
                                     slopes::Mode mode) {
  const auto& sim = config.simulate;
  SimulationRun run;
  for (const std::uint64_t seed : sim.seeds) {
    const fs::path dir = work_dir / ("seed_" + std::to_string(seed));
    const fs::path series_dir = dir / "series";
    const synth::AttributeGrid grid = synth::attribute_grid("a", sim.K, sim.lo, sim.hi);

    std::vector<synth::SeriesSidecar> series(sim.n);
    parallel_for(sim.n, [&](std::size_t i) {
      char id[32];
      std::snprintf(id, sizeof(id), "src%05zu", i);
      const fs::path sdir = synth::series_directory(series_dir, id);
      if (fs::exists(sdir / synth::kSidecarName)) {
        series[i] = synth::read_series(sdir);
        return;
      }
      std::vector<Bytes> pngs;
      for (std::size_t k = 0; k < grid.size(); ++k) {
        // Tiny image whose samples spell out (seed, source, k), so every
        // variant has its own digest.
        ImagePlane img(2, 4, 3, 0.0f);
        const std::uint64_t parts[3] = {seed, i, k};
        auto px = img.data();
        for (std::size_t b = 0; b < px.size(); ++b) {
          const std::uint64_t word = parts[(b / 8) % 3];
          px[b] = static_cast<float>((word >> (8 * (b % 8))) & 0xff) / 255.0f;
        }
        pngs.push_back(encode_png(img));
      }
      series[i] = synth::write_series_bytes(id, grid, pngs, {}, {}, series_dir);
    });

    std::vector<probe::BiasSimSpec> specs;
    for (double b : sim.betas) {
      const std::string label = planted_label(b);
      specs.push_back({label, sim.beta0, b, derive_seed(seed, label), false});
    }
    probe::SimulatedBackend backend(specs, probe::grid_values_from(series));
    {
      probe::ProbeStore store = probe::ProbeStore::open(dir / "probe.jsonl");
      probe::ProbeOptions popts;
      popts.max_in_flight = config.probe.max_in_flight;
      for (const auto& s : series) {
        const auto outcome = probe::probe_series(s, backend, store, popts);
        if (!outcome.failures.empty()) {
          throw BackendError(outcome.failures.front().reason, outcome.failures.front().message);
        }
        run.network_calls += outcome.network_calls;
        run.cache_hits += outcome.cache_hits;
      }
      const JoinResult joined = join_records(series_dir, store, backend.id(), true);
      slopes::AnalysisOptions aopts;
      aopts.mode = mode;
      const slopes::Analysis analysis = slopes::analyze(joined.records, aopts);
      for (double b : sim.betas) {
        PlantedResult r;
        r.seed = seed;
        r.beta1 = b;
        r.label = planted_label(b);
        for (const auto& s : analysis.slopes) {
          if (s.label == probe::normalize_label(r.label)) {
            r.estimate = s;
            r.estimated = true;
          }
        }
        if (r.estimated) {
          r.passes_filter = !slopes::filter_labels({r.estimate}, config.analysis.p_max,
                                                   config.analysis.min_abs_slope)
                                 .empty();
        }
        run.results.push_back(std::move(r));
      }
    }
  }
  return run;
}

int cmd_simulate(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                 std::ostream& err) {
  return guarded(err, [&] {
    const fs::path dir = config.paths.simulate_dir;
    if (options.dry_run) {
      out << json{{"event", "dry-run"}, {"command", "simulate"}, {"n", config.simulate.n},
                  {"K", config.simulate.K}, {"seeds", config.simulate.seeds},
                  {"betas", config.simulate.betas}, {"work_dir", dir.string()}}
                 .dump()
          << "\n";
      return 0;
    }
    if (options.force && fs::exists(dir)) fs::remove_all(dir);
    const SimulationRun run = run_planted_simulation(config, dir, config.analysis.mode);

    bool ok = true;
    std::map<std::uint64_t, std::vector<const PlantedResult*>> by_seed;
    for (const auto& r : run.results) {
      by_seed[r.seed].push_back(&r);
      bool check = true;
      if (r.beta1 > 0) check = r.estimated && r.estimate.slope > 0 && r.estimate.p_value < config.analysis.p_max;
      if (r.beta1 < 0) check = r.estimated && r.estimate.slope < 0 && r.estimate.p_value < config.analysis.p_max;
      if (r.beta1 == 0) check = !r.passes_filter;
      ok = ok && check;
      out << json{{"seed", r.seed},
                  {"label", r.label},
                  {"planted_beta1", r.beta1},
                  {"slope", r.estimated ? json(r.estimate.slope) : json(nullptr)},
                  {"p_value", r.estimated ? json(r.estimate.p_value) : json(nullptr)},
                  {"passes_filter", r.passes_filter},
                  {"check", check ? "pass" : "fail"}}
                 .dump()
          << "\n";
    }
    for (auto& [seed, rs] : by_seed) {
      std::vector<const PlantedResult*> sorted = rs;
      std::sort(sorted.begin(), sorted.end(),
                [](const PlantedResult* a, const PlantedResult* b) { return a->beta1 < b->beta1; });
      for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (!sorted[i - 1]->estimated || !sorted[i]->estimated ||
            !(sorted[i - 1]->estimate.slope < sorted[i]->estimate.slope)) {
          ok = false;
          out << json{{"seed", seed}, {"check", "fail"}, {"reason", "slope ordering differs from planting"}}
                     .dump()
              << "\n";
        }
      }
    }
    out << json{{"event", "simulated"}, {"network_calls", run.network_calls},
                {"cache_hits", run.cache_hits}, {"result", ok ? "pass" : "fail"}}
               .dump()
        << "\n";
    return ok ? 0 : static_cast<int>(ExitCode::kData);
  });
}

int cmd_stats(const RunConfig& config, const CommandOptions& options, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    const std::string attribute =
        config.stats_attribute.empty() ? config.grid.attribute : config.stats_attribute;
    if (attribute.empty()) throw ConfigError("no attribute given for stats");
    DatasetManifest manifest;
    if (!config.paths.dataset_root.empty()) {
      manifest = scan_dataset(config, out, nullptr);
    } else if (fs::exists(config.paths.manifest)) {
      manifest = load_manifest(config.paths.manifest);
    } else {
      throw ConfigError("stats needs paths.dataset_root or an existing manifest");
    }
    const auto rows = representation_stats(manifest, attribute);
    const auto& domain = manifest.attribute_domain.at(attribute);

    csv::Row header{"keyword", "n"};
    for (const auto& v : domain) header.push_back(v);
    std::string text = csv::format_row(header);
    for (const auto& r : rows) {
      csv::Row row{r.keyword, std::to_string(r.n)};
      for (const auto& v : domain) {
        auto it = r.proportions.find(v);
        row.push_back(it == r.proportions.end() ? "" : csv::format_number(it->second));
      }
      text += csv::format_row(row);
    }
    out << text;
    if (options.dry_run) return 0;
    const fs::path path = config.paths.report_dir / ("stats_" + slopes::file_stem(attribute) + ".csv");
    fs::create_directories(path.parent_path());
    write_file_atomic(path, text);
    out << json{{"event", "stats"}, {"attribute", attribute}, {"keywords", rows.size()},
                {"csv", path.string()}}
               .dump()
        << "\n";
    return 0;
  });
}

}  // namespace cfaudit::cli
