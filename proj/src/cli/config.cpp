#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "cfaudit/cli.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"

namespace cfaudit::cli {

namespace fs = std::filesystem;

namespace {

void check_keys(const toml::table& table, const std::string& where,
                std::initializer_list<std::string_view> known) {
  const std::set<std::string_view> allowed(known);
  for (const auto& [key, _] : table) {
    if (!allowed.contains(key.str())) {
      throw ConfigError("unknown key '" + std::string(key.str()) + "' in " + where);
    }
  }
}

template <typename T>
void read(const toml::table& table, std::string_view key, T& out, const std::string& where) {
  const toml::node* node = table.get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value<bool>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node->value<double>()) {
      out = *v;
      return;
    }
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node->value<std::int64_t>()) {
      if (std::is_unsigned_v<T> && *v < 0) {
        throw ConfigError(where + "." + std::string(key) + " must not be negative");
      }
      out = static_cast<T>(*v);
      return;
    }
  } else {
    if (auto v = node->value<std::string>()) {
      out = *v;
      return;
    }
  }
  throw ConfigError(where + "." + std::string(key) + " has the wrong type");
}

void read_path(const toml::table& table, std::string_view key, fs::path& out,
               const fs::path& base) {
  std::string text;
  read(table, key, text, "paths");
  if (text.empty()) return;
  fs::path p(text);
  out = p.is_absolute() ? p : (base / p).lexically_normal();
}

template <typename T>
std::vector<T> read_array(const toml::table& table, std::string_view key, const std::string& where,
                          std::vector<T> fallback) {
  const toml::node* node = table.get(key);
  if (!node) return fallback;
  const toml::array* arr = node->as_array();
  if (!arr) throw ConfigError(where + "." + std::string(key) + " must be an array");
  std::vector<T> out;
  for (const auto& el : *arr) {
    if constexpr (std::is_floating_point_v<T>) {
      auto v = el.value<double>();
      if (!v) throw ConfigError(where + "." + std::string(key) + " must hold numbers");
      out.push_back(*v);
    } else if constexpr (std::is_integral_v<T>) {
      auto v = el.value<std::int64_t>();
      if (!v || (std::is_unsigned_v<T> && *v < 0)) {
        throw ConfigError(where + "." + std::string(key) + " must hold non-negative integers");
      }
      out.push_back(static_cast<T>(*v));
    } else {
      auto v = el.value<std::string>();
      if (!v) throw ConfigError(where + "." + std::string(key) + " must hold strings");
      out.push_back(*v);
    }
  }
  return out;
}

const toml::table* subtable(const toml::table& root, std::string_view key) {
  const toml::node* node = root.get(key);
  if (!node) return nullptr;
  const toml::table* t = node->as_table();
  if (!t) throw ConfigError("[" + std::string(key) + "] must be a table");
  return t;
}

}  // namespace

void RunConfig::validate() const {
  std::set<std::string> names;
  std::size_t sensitive = 0;
  for (const auto& a : attributes) {
    a.validate();
    if (!names.insert(a.name).second) throw ConfigError("attribute " + a.name + " declared twice");
    if (a.role == codec::AttributeRole::kSensitive) ++sensitive;
  }
  // simulate and stats runs may declare no attributes at all
  if (!attributes.empty()) {
    if (sensitive == 0) throw ConfigError("at least one attribute must be sensitive");
    const auto& g = spec(grid.attribute);
    if (g.role != codec::AttributeRole::kSensitive) {
      throw ConfigError("grid attribute " + grid.attribute + " is not sensitive");
    }
  }
  if (grid.K < 2) throw ConfigError("grid.K must be at least 2");
  if (!(grid.lo < grid.hi)) throw ConfigError("grid.lo must be below grid.hi");
  if (!(analysis.p_max > 0.0) || !(analysis.min_abs_slope > 0.0)) {
    throw ConfigError("analysis thresholds must be positive");
  }
  if (probe.rps < 0.0) throw ConfigError("probe.rps must not be negative");
  if (probe.max_in_flight == 0) throw ConfigError("probe.max_in_flight must be positive");
  if (train_steps <= 0) throw ConfigError("codec.steps must be positive");
  if (simulate.n == 0 || simulate.K < 3 || simulate.seeds.empty() || simulate.betas.empty()) {
    throw ConfigError("simulate needs n > 0, K >= 3, and non-empty seeds and betas");
  }
  codec.validate();
}

const codec::AttributeSpec& RunConfig::spec(const std::string& name) const {
  for (const auto& a : attributes) {
    if (a.name == name) return a;
  }
  throw ConfigError("unknown attribute '" + name + "'");
}

RunConfig parse_config(std::string_view text, const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(msg.str());
  }
  check_keys(root, "config",
             {"seed", "paths", "dataset", "attributes", "codec", "grid", "probe", "analysis",
              "simulate", "stats"});

  RunConfig c;
  c.base_dir = base_dir;
  read(root, "seed", c.seed, "config");

  if (const auto* t = subtable(root, "paths")) {
    check_keys(*t, "[paths]",
               {"dataset_root", "annotations", "train_root", "train_annotations", "manifest",
                "model", "checkpoint", "series_dir", "store", "analysis", "report_dir",
                "simulate_dir"});
    read_path(*t, "dataset_root", c.paths.dataset_root, base_dir);
    read_path(*t, "annotations", c.paths.annotations, base_dir);
    read_path(*t, "train_root", c.paths.train_root, base_dir);
    read_path(*t, "train_annotations", c.paths.train_annotations, base_dir);
    read_path(*t, "manifest", c.paths.manifest, base_dir);
    read_path(*t, "model", c.paths.model, base_dir);
    read_path(*t, "checkpoint", c.paths.checkpoint, base_dir);
    read_path(*t, "series_dir", c.paths.series_dir, base_dir);
    read_path(*t, "store", c.paths.store, base_dir);
    read_path(*t, "analysis", c.paths.analysis, base_dir);
    read_path(*t, "report_dir", c.paths.report_dir, base_dir);
    read_path(*t, "simulate_dir", c.paths.simulate_dir, base_dir);
  }

  if (const auto* t = subtable(root, "dataset")) {
    check_keys(*t, "[dataset]", {"keywords"});
    c.keywords = read_array<std::string>(*t, "keywords", "dataset", {});
  }

  if (const toml::node* node = root.get("attributes")) {
    const toml::array* arr = node->as_array();
    if (!arr) throw ConfigError("attributes must be an array of tables");
    for (const auto& el : *arr) {
      const toml::table* t = el.as_table();
      if (!t) throw ConfigError("attributes must be an array of tables");
      check_keys(*t, "[[attributes]]", {"name", "role", "negative", "positive", "test_range"});
      codec::AttributeSpec s;
      std::string role = "sensitive";
      read(*t, "name", s.name, "attributes");
      read(*t, "role", role, "attributes");
      read(*t, "negative", s.negative_value, "attributes");
      read(*t, "positive", s.positive_value, "attributes");
      try {
        s.role = codec::role_from_string(role);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      const auto range = read_array<double>(*t, "test_range", "attributes", {-2.0, 2.0});
      if (range.size() != 2) throw ConfigError("attributes.test_range needs two numbers");
      s.test_lo = range[0];
      s.test_hi = range[1];
      c.attributes.push_back(std::move(s));
    }
  }

  if (const auto* t = subtable(root, "codec")) {
    check_keys(*t, "[codec]",
               {"resolution", "channels", "encoder_hidden", "latent_dim", "decoder_hidden",
                "discriminator_hidden", "lambda_max", "lambda_ramp_steps", "lr_autoencoder",
                "lr_discriminator", "adam_beta1", "adam_beta2", "batch_size", "seed", "steps",
                "log_every", "checkpoint_every"});
    auto& k = c.codec;
    read(*t, "resolution", k.resolution, "codec");
    read(*t, "channels", k.channels, "codec");
    k.encoder_hidden = read_array<int>(*t, "encoder_hidden", "codec", k.encoder_hidden);
    read(*t, "latent_dim", k.latent_dim, "codec");
    k.decoder_hidden = read_array<int>(*t, "decoder_hidden", "codec", k.decoder_hidden);
    k.discriminator_hidden =
        read_array<int>(*t, "discriminator_hidden", "codec", k.discriminator_hidden);
    read(*t, "lambda_max", k.lambda_max, "codec");
    read(*t, "lambda_ramp_steps", k.lambda_ramp_steps, "codec");
    read(*t, "lr_autoencoder", k.lr_autoencoder, "codec");
    read(*t, "lr_discriminator", k.lr_discriminator, "codec");
    read(*t, "adam_beta1", k.adam_beta1, "codec");
    read(*t, "adam_beta2", k.adam_beta2, "codec");
    read(*t, "batch_size", k.batch_size, "codec");
    if (t->contains("seed")) {
      read(*t, "seed", k.seed, "codec");
      c.codec_seed_set = true;
    }
    read(*t, "steps", c.train_steps, "codec");
    read(*t, "log_every", c.log_every, "codec");
    read(*t, "checkpoint_every", c.checkpoint_every, "codec");
  }
  if (!c.codec_seed_set) c.codec.seed = c.seed;

  if (const auto* t = subtable(root, "grid")) {
    check_keys(*t, "[grid]", {"attribute", "K", "lo", "hi"});
    read(*t, "attribute", c.grid.attribute, "grid");
    read(*t, "K", c.grid.K, "grid");
    read(*t, "lo", c.grid.lo, "grid");
    read(*t, "hi", c.grid.hi, "grid");
  }
  if (c.grid.attribute.empty()) {
    for (const auto& a : c.attributes) {
      if (a.role == codec::AttributeRole::kSensitive) {
        c.grid.attribute = a.name;
        break;
      }
    }
  }

  if (const auto* t = subtable(root, "probe")) {
    check_keys(*t, "[probe]",
               {"backend", "rps", "max_in_flight", "max_attempts", "fsync", "replay_fixture",
                "simulated"});
    read(*t, "backend", c.probe.backend, "probe");
    read(*t, "rps", c.probe.rps, "probe");
    read(*t, "max_in_flight", c.probe.max_in_flight, "probe");
    read(*t, "max_attempts", c.probe.max_attempts, "probe");
    read(*t, "fsync", c.probe.fsync, "probe");
    std::string fixture;
    read(*t, "replay_fixture", fixture, "probe");
    if (!fixture.empty()) {
      fs::path p(fixture);
      c.probe.replay_fixture = p.is_absolute() ? p : (base_dir / p).lexically_normal();
    }
    if (const toml::node* node = t->get("simulated")) {
      const toml::array* arr = node->as_array();
      if (!arr) throw ConfigError("probe.simulated must be an array of tables");
      for (const auto& el : *arr) {
        const toml::table* s = el.as_table();
        if (!s) throw ConfigError("probe.simulated must be an array of tables");
        check_keys(*s, "[[probe.simulated]]", {"label", "beta0", "beta1", "seed", "deterministic"});
        probe::BiasSimSpec spec;
        read(*s, "label", spec.label, "probe.simulated");
        read(*s, "beta0", spec.beta0, "probe.simulated");
        read(*s, "beta1", spec.beta1, "probe.simulated");
        spec.seed = derive_seed(c.seed, "probe.simulated/" + spec.label);
        read(*s, "seed", spec.seed, "probe.simulated");
        read(*s, "deterministic", spec.deterministic, "probe.simulated");
        c.probe.simulated.push_back(std::move(spec));
      }
    }
  }

  if (const auto* t = subtable(root, "analysis")) {
    check_keys(*t, "[analysis]",
               {"p_max", "min_abs_slope", "mode", "use_confidence", "exclude_flagged"});
    read(*t, "p_max", c.analysis.p_max, "analysis");
    read(*t, "min_abs_slope", c.analysis.min_abs_slope, "analysis");
    std::string mode = slopes::to_string(c.analysis.mode);
    read(*t, "mode", mode, "analysis");
    c.analysis.mode = slopes::mode_from_string(mode);
    read(*t, "use_confidence", c.analysis.use_confidence, "analysis");
    read(*t, "exclude_flagged", c.analysis.exclude_flagged, "analysis");
  }

  if (const auto* t = subtable(root, "simulate")) {
    check_keys(*t, "[simulate]", {"n", "K", "lo", "hi", "beta0", "betas", "seeds"});
    read(*t, "n", c.simulate.n, "simulate");
    read(*t, "K", c.simulate.K, "simulate");
    read(*t, "lo", c.simulate.lo, "simulate");
    read(*t, "hi", c.simulate.hi, "simulate");
    read(*t, "beta0", c.simulate.beta0, "simulate");
    c.simulate.betas = read_array<double>(*t, "betas", "simulate", c.simulate.betas);
    c.simulate.seeds = read_array<std::uint64_t>(*t, "seeds", "simulate", c.simulate.seeds);
  }

  if (const auto* t = subtable(root, "stats")) {
    check_keys(*t, "[stats]", {"attribute"});
    read(*t, "attribute", c.stats_attribute, "stats");
  }

  const fs::path work = base_dir / "work";
  if (c.paths.manifest.empty()) c.paths.manifest = work / "manifest.json";
  if (c.paths.model.empty()) c.paths.model = work / "model.cfc";
  if (c.paths.checkpoint.empty()) c.paths.checkpoint = work / "train.ckpt";
  if (c.paths.series_dir.empty()) c.paths.series_dir = work / "series";
  if (c.paths.store.empty()) c.paths.store = work / "probe.jsonl";
  if (c.paths.analysis.empty()) c.paths.analysis = work / "analysis.json";
  if (c.paths.report_dir.empty()) c.paths.report_dir = work / "report";
  if (c.paths.simulate_dir.empty()) c.paths.simulate_dir = work / "simulate";
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const fs::path base = fs::absolute(path).parent_path();
  RunConfig c = parse_config(buf.str(), base);
  c.validate();
  return c;
}

void apply_overrides(RunConfig& config, const CommandOptions& options) {
  if (options.seed) {
    config.seed = *options.seed;
    config.codec.seed = *options.seed;
    config.codec_seed_set = true;
    for (auto& s : config.probe.simulated) s.seed = derive_seed(*options.seed, "probe.simulated/" + s.label);
  }
  if (options.backend) config.probe.backend = *options.backend;
  if (options.rps) config.probe.rps = *options.rps;
  if (options.max_in_flight) config.probe.max_in_flight = *options.max_in_flight;
  if (options.store) config.paths.store = *options.store;
  if (options.attribute) config.stats_attribute = *options.attribute;
}

}  // namespace cfaudit::cli
