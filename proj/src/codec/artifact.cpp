#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cfaudit/codec/codec.hpp"
#include "cfaudit/error.hpp"

namespace cfaudit::codec {

static_assert(std::endian::native == std::endian::little,
              "artifact blobs are written in host order and assume little-endian");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'F', 'C', 'O', 'D', 'E', 'C', '\0'};
enum class Kind : std::uint32_t { kModel = 0, kCheckpoint = 1 };

json config_to_json(const CodecConfig& c) {
  return json{{"resolution", c.resolution},
              {"channels", c.channels},
              {"encoder_hidden", c.encoder_hidden},
              {"latent_dim", c.latent_dim},
              {"decoder_hidden", c.decoder_hidden},
              {"discriminator_hidden", c.discriminator_hidden},
              {"lambda_max", c.lambda_max},
              {"lambda_ramp_steps", c.lambda_ramp_steps},
              {"lr_autoencoder", c.lr_autoencoder},
              {"lr_discriminator", c.lr_discriminator},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"batch_size", c.batch_size},
              {"seed", c.seed}};
}

CodecConfig config_from_json(const json& j) {
  CodecConfig c;
  c.resolution = j.at("resolution");
  c.channels = j.at("channels");
  c.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
  c.latent_dim = j.at("latent_dim");
  c.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
  c.discriminator_hidden = j.at("discriminator_hidden").get<std::vector<int>>();
  c.lambda_max = j.at("lambda_max");
  c.lambda_ramp_steps = j.at("lambda_ramp_steps");
  c.lr_autoencoder = j.at("lr_autoencoder");
  c.lr_discriminator = j.at("lr_discriminator");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  return c;
}

json specs_to_json(const std::vector<AttributeSpec>& specs) {
  json out = json::array();
  for (const auto& s : specs) {
    out.push_back(json{{"name", s.name},
                       {"role", to_string(s.role)},
                       {"negative", s.negative_value},
                       {"positive", s.positive_value},
                       {"test_range", {s.test_lo, s.test_hi}}});
  }
  return out;
}

std::vector<AttributeSpec> specs_from_json(const json& j) {
  std::vector<AttributeSpec> specs;
  for (const auto& e : j) {
    AttributeSpec s;
    s.name = e.at("name");
    s.role = role_from_string(e.at("role"));
    s.negative_value = e.at("negative");
    s.positive_value = e.at("positive");
    s.test_lo = e.at("test_range").at(0);
    s.test_hi = e.at("test_range").at(1);
    specs.push_back(std::move(s));
  }
  return specs;
}

template <typename T>
void put(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("truncated codec artifact");
  return value;
}

void put_blob(std::ostream& out, const Eigen::VectorXd& v) {
  put<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Eigen::VectorXd get_blob(std::istream& in, Eigen::Index expected) {
  const auto n = get<std::uint64_t>(in);
  if (expected >= 0 && n != static_cast<std::uint64_t>(expected)) {
    throw DataError("codec artifact blob has unexpected length");
  }
  if (n > (std::uint64_t{1} << 36)) throw DataError("codec artifact blob is implausibly large");
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("truncated codec artifact");
  return v;
}

void write_container(const std::filesystem::path& path, Kind kind, const json& header,
                     const std::vector<const Eigen::VectorXd*>& blobs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArtifactVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(kind));
    const std::string text = header.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(blobs.size()));
    for (const auto* b : blobs) put_blob(out, *b);
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct Container {
  Kind kind;
  json header;
  std::ifstream stream;
};

Container open_container(const std::filesystem::path& path) {
  Container c{Kind::kModel, {}, std::ifstream(path, std::ios::binary)};
  if (!c.stream) throw ConfigError("cannot open codec artifact " + path.string());
  char magic[8];
  c.stream.read(magic, sizeof(magic));
  if (!c.stream || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + " is not a codec artifact");
  }
  const auto version = get<std::uint32_t>(c.stream);
  if (version != kArtifactVersion) {
    throw DataError("unsupported codec artifact version " + std::to_string(version));
  }
  c.kind = static_cast<Kind>(get<std::uint32_t>(c.stream));
  const auto len = get<std::uint64_t>(c.stream);
  if (len > (1u << 24)) throw DataError("codec artifact header is implausibly large");
  std::string text(len, '\0');
  c.stream.read(text.data(), static_cast<std::streamsize>(len));
  if (!c.stream) throw DataError("truncated codec artifact");
  try {
    c.header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed codec artifact header: ") + e.what());
  }
  return c;
}

FaderCodec read_model_blobs(Container& c) {
  try {
    FaderCodec model(config_from_json(c.header.at("config")),
                     specs_from_json(c.header.at("attributes")));
    const auto count = get<std::uint32_t>(c.stream);
    if (count < 3) throw DataError("codec artifact is missing parameter blobs");
    model.encoder().params() = get_blob(c.stream, model.encoder().params().size());
    model.decoder().params() = get_blob(c.stream, model.decoder().params().size());
    model.discriminator().params() = get_blob(c.stream, model.discriminator().params().size());
    return model;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed codec artifact header: ") + e.what());
  }
}

json header_for(const FaderCodec& model, std::int64_t step) {
  return json{{"format", "cfaudit.codec"},
              {"config", config_to_json(model.config())},
              {"attributes", specs_to_json(model.specs())},
              {"step", step}};
}

}  // namespace

void save_model(const FaderCodec& model, const std::filesystem::path& path) {
  write_container(path, Kind::kModel, header_for(model, -1),
                  {&model.encoder().params(), &model.decoder().params(),
                   &model.discriminator().params()});
}

FaderCodec load_model(const std::filesystem::path& path) {
  Container c = open_container(path);
  return read_model_blobs(c);
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  json header = header_for(state.model, state.step);
  header["adam_steps"] = {state.encoder_opt.t, state.decoder_opt.t, state.discriminator_opt.t};
  header["last"] = {{"reconstruction", state.last.reconstruction},
                    {"adversarial", state.last.adversarial},
                    {"discriminator", state.last.discriminator},
                    {"lambda", state.last.lambda}};
  write_container(path, Kind::kCheckpoint, header,
                  {&state.model.encoder().params(), &state.model.decoder().params(),
                   &state.model.discriminator().params(), &state.encoder_opt.m,
                   &state.encoder_opt.v, &state.decoder_opt.m, &state.decoder_opt.v,
                   &state.discriminator_opt.m, &state.discriminator_opt.v});
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  Container c = open_container(path);
  if (c.kind != Kind::kCheckpoint) throw DataError(path.string() + " is not a training checkpoint");
  FaderCodec model = read_model_blobs(c);
  TrainState state{0, std::move(model), {}, {}, {}, {}};
  try {
    state.step = c.header.at("step");
    const auto& steps = c.header.at("adam_steps");
    state.encoder_opt.t = steps.at(0);
    state.decoder_opt.t = steps.at(1);
    state.discriminator_opt.t = steps.at(2);
    const auto& last = c.header.at("last");
    state.last = StepLosses{last.at("reconstruction"), last.at("adversarial"),
                            last.at("discriminator"), last.at("lambda")};
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  for (AdamState* opt : {&state.encoder_opt, &state.decoder_opt, &state.discriminator_opt}) {
    opt->m = get_blob(c.stream, -1);
    opt->v = get_blob(c.stream, -1);
  }
  return state;
}

}  // namespace cfaudit::codec
