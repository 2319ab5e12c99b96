#include <filesystem>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfaudit/cli.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/image.hpp"
#include "cfaudit/toy.hpp"

namespace cfaudit::cli {

namespace fs = std::filesystem;

namespace {

std::string toy_config(const toy::ToyLayout& layout) {
  std::ostringstream out;
  out << "seed = " << layout.seed << "\n\n"
      << "[paths]\n"
      << "train_root = \"train\"\n"
      << "dataset_root = \"scenes\"\n\n"
      << "[[attributes]]\n"
      << "name = \"gender\"\nrole = \"sensitive\"\nnegative = \"female\"\npositive = \"male\"\n\n"
      << "[[attributes]]\n"
      << "name = \"mouth_open\"\nrole = \"controlled\"\nnegative = \"closed\"\npositive = \"open\"\n\n"
      << "[codec]\n"
      << "resolution = " << layout.crop_size << "\n"
      << "steps = 2000\n\n"
      << "[grid]\n"
      << "attribute = \"gender\"\nK = 7\nlo = -2.0\nhi = 2.0\n\n"
      << "[probe]\n"
      << "backend = \"simulated\"\n\n"
      << "[[probe.simulated]]\nlabel = \"person\"\nbeta0 = 3.0\nbeta1 = 0.0\n\n"
      << "[[probe.simulated]]\nlabel = \"necktie\"\nbeta0 = 0.0\nbeta1 = 0.6\n\n"
      << "[[probe.simulated]]\nlabel = \"necklace\"\nbeta0 = 0.0\nbeta1 = -0.6\n\n"
      << "[analysis]\n"
      << "mode = \"per-image\"\n";
  return out.str();
}

int cmd_toy(const fs::path& out_dir, toy::ToyLayout layout, bool force, std::ostream& out,
            std::ostream& err) {
  try {
    const fs::path config_path = out_dir / "config.toml";
    if (fs::exists(config_path) && !force) {
      err << "error: " << config_path.string() << " exists; pass --force to overwrite\n";
      return static_cast<int>(ExitCode::kConfig);
    }
    const std::size_t scenes = toy::write_toy_dataset(out_dir, layout);
    write_file_atomic(config_path, toy_config(layout));
    out << nlohmann::json{{"event", "toy"},
                          {"train_images", layout.train_count},
                          {"scenes", scenes},
                          {"config", config_path.string()}}
               .dump()
        << "\n";
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counterfactual label-bias audit for image classifiers", "cfaudit"};
  app.require_subcommand(1);

  std::string config_path = "config.toml";
  CommandOptions opts;
  std::uint64_t seed = 0;
  app.add_option("-c,--config", config_path, "Run config (TOML)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the root seed");
  app.add_flag("--force", opts.force, "Overwrite existing outputs");
  app.add_flag("--dry-run", opts.dry_run, "Validate and print the plan without writing");

  auto* train = app.add_subcommand("train", "Train the attribute-conditioned codec");
  auto* synthesize = app.add_subcommand("synthesize", "Write counterfactual series per image");
  auto* probe = app.add_subcommand("probe", "Query a labelling backend for every series image");
  auto* analyze = app.add_subcommand("analyze", "Aggregate label rates and fit slopes");
  auto* report = app.add_subcommand("report", "Filter slopes and write the report tables");
  auto* simulate = app.add_subcommand("simulate", "Recover planted biases end to end");
  auto* stats = app.add_subcommand("stats", "Attribute representation per keyword");
  auto* toy_cmd = app.add_subcommand("toy", "Write a synthetic dataset and a starter config");
  for (auto* sub : {train, synthesize, probe, analyze, report, simulate, stats, toy_cmd}) {
    sub->fallthrough();
  }

  std::string backend, store;
  double rps = 0.0;
  std::size_t max_in_flight = 0;
  auto* backend_opt = probe->add_option("--backend", backend,
                                        "simulated, replay, google, amazon, ibm or clarifai");
  auto* rps_opt = probe->add_option("--rps", rps, "Request rate limit per second")
                      ->check(CLI::NonNegativeNumber);
  auto* mif_opt = probe->add_option("--max-in-flight", max_in_flight, "Concurrent requests")
                      ->check(CLI::PositiveNumber);
  auto* store_opt = probe->add_option("--store", store, "Probe store path");

  std::string attribute;
  auto* attr_opt = stats->add_option("--attribute", attribute, "Attribute to tabulate");

  std::string toy_out;
  toy::ToyLayout layout;
  toy_cmd->add_option("--out", toy_out, "Output directory")->required();
  toy_cmd->add_option("--train-count", layout.train_count, "Training crops")
      ->check(CLI::PositiveNumber);
  toy_cmd->add_option("--scenes-per-keyword", layout.scenes_per_keyword, "Scenes per keyword")
      ->check(CLI::PositiveNumber);
  toy_cmd->add_option("--faceless-per-keyword", layout.faceless_per_keyword,
                      "Scenes without a face per keyword");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  if (*seed_opt) opts.seed = seed;
  if (*backend_opt) opts.backend = backend;
  if (*rps_opt) opts.rps = rps;
  if (*mif_opt) opts.max_in_flight = max_in_flight;
  if (*store_opt) opts.store = fs::path(store);
  if (*attr_opt) opts.attribute = attribute;

  if (toy_cmd->parsed()) {
    if (opts.seed) layout.seed = *opts.seed;
    return cmd_toy(toy_out, layout, opts.force, out, err);
  }

  RunConfig config;
  try {
    config = load_config(config_path);
    apply_overrides(config, opts);
    config.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  }

  if (train->parsed()) return cmd_train(config, opts, out, err);
  if (synthesize->parsed()) return cmd_synthesize(config, opts, out, err);
  if (probe->parsed()) return cmd_probe(config, opts, out, err);
  if (analyze->parsed()) return cmd_analyze(config, opts, out, err);
  if (report->parsed()) return cmd_report(config, opts, out, err);
  if (simulate->parsed()) return cmd_simulate(config, opts, out, err);
  return cmd_stats(config, opts, out, err);
}

}  // namespace cfaudit::cli
