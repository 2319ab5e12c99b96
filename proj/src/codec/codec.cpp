#include "cfaudit/codec/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "cfaudit/dataset.hpp"
#include "cfaudit/digest.hpp"
#include "cfaudit/error.hpp"

namespace cfaudit::codec {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Mean binary cross-entropy of sigmoid(logits) against targets, and its
// gradient with respect to the logits.
double bce_with_logits(const MatrixXd& logits, const MatrixXd& targets, MatrixXd* grad) {
  const double count = static_cast<double>(logits.size());
  double loss = 0.0;
  if (grad) grad->resize(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double l = logits(i, j);
      const double t = targets(i, j);
      loss += std::max(l, 0.0) - t * l + std::log1p(std::exp(-std::abs(l)));
      if (grad) (*grad)(i, j) = (sigmoid(l) - t) / count;
    }
  }
  return loss / count;
}

void require_finite(double value, const char* what, std::int64_t step) {
  if (!std::isfinite(value)) {
    throw NonFiniteLoss(std::string(what) + " loss became non-finite at step " +
                        std::to_string(step));
  }
}

}  // namespace

void AttributeSpec::validate() const {
  if (name.empty()) throw ConfigError("attribute spec without a name");
  if (negative_value.empty() || positive_value.empty() || negative_value == positive_value) {
    throw ConfigError("attribute " + name + " needs two distinct categorical values");
  }
  if (!(test_lo < test_hi)) throw ConfigError("attribute " + name + " has an empty test range");
}

double AttributeSpec::endpoint(const std::string& value) const {
  if (value == negative_value) return -1.0;
  if (value == positive_value) return 1.0;
  throw DataError("value '" + value + "' is not an endpoint of attribute " + name);
}

std::array<double, 2> conditioning_pair(double a) noexcept {
  const double t = (a + 1.0) / 2.0;
  return {1.0 - t, t};
}

std::string to_string(AttributeRole role) {
  return role == AttributeRole::kSensitive ? "sensitive" : "controlled";
}

AttributeRole role_from_string(const std::string& text) {
  if (text == "sensitive") return AttributeRole::kSensitive;
  if (text == "controlled") return AttributeRole::kControlled;
  throw ConfigError("unknown attribute role: " + text);
}

void CodecConfig::validate() const {
  auto positive = [](const std::vector<int>& v) {
    return std::all_of(v.begin(), v.end(), [](int w) { return w > 0; });
  };
  if (resolution <= 0 || channels <= 0 || latent_dim <= 0 || batch_size <= 0) {
    throw ConfigError("codec dimensions and batch size must be positive");
  }
  if (!positive(encoder_hidden) || !positive(decoder_hidden) || !positive(discriminator_hidden)) {
    throw ConfigError("codec layer widths must be positive");
  }
  if (!(lambda_max >= 0.0) || lambda_ramp_steps <= 0) {
    throw ConfigError("lambda_max must be >= 0 and lambda_ramp_steps positive");
  }
  if (!(lr_autoencoder > 0.0) || !(lr_discriminator > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
}

FaderCodec::FaderCodec(CodecConfig config, std::vector<AttributeSpec> specs)
    : config_(std::move(config)), specs_(std::move(specs)) {
  config_.validate();
  if (specs_.empty()) throw ConfigError("codec needs at least one attribute");
  std::set<std::string> names;
  for (const auto& s : specs_) {
    s.validate();
    if (!names.insert(s.name).second) throw ConfigError("duplicate attribute " + s.name);
  }
  const int n_attr = static_cast<int>(specs_.size());

  std::vector<int> enc{config_.input_dim()};
  enc.insert(enc.end(), config_.encoder_hidden.begin(), config_.encoder_hidden.end());
  enc.push_back(config_.latent_dim);
  encoder_ = Mlp(enc, 0, Activation::kLeakyRelu, Activation::kIdentity);

  std::vector<int> dec{config_.latent_dim};
  dec.insert(dec.end(), config_.decoder_hidden.begin(), config_.decoder_hidden.end());
  dec.push_back(config_.input_dim());
  decoder_ = Mlp(dec, 2 * n_attr, Activation::kLeakyRelu, Activation::kSigmoid);

  std::vector<int> dis{config_.latent_dim};
  dis.insert(dis.end(), config_.discriminator_hidden.begin(), config_.discriminator_hidden.end());
  dis.push_back(n_attr);
  discriminator_ = Mlp(dis, 0, Activation::kLeakyRelu, Activation::kIdentity);

  std::mt19937_64 rng(config_.seed);
  encoder_.initialize(rng);
  decoder_.initialize(rng);
  discriminator_.initialize(rng);
}

std::size_t FaderCodec::spec_index(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].name == name) return i;
  }
  throw ArgumentError("model has no attribute named " + name);
}

VectorXd FaderCodec::flatten(const ImagePlane& x) const {
  if (x.height() != config_.resolution || x.width() != config_.resolution ||
      x.channels() != config_.channels) {
    throw ArgumentError("image is " + std::to_string(x.height()) + "x" +
                        std::to_string(x.width()) + "x" + std::to_string(x.channels()) +
                        ", codec expects " + std::to_string(config_.resolution) + "x" +
                        std::to_string(config_.resolution) + "x" +
                        std::to_string(config_.channels));
  }
  VectorXd column(x.size());
  auto px = x.data();
  for (std::size_t i = 0; i < px.size(); ++i) column[static_cast<Eigen::Index>(i)] = px[i];
  return column;
}

ImagePlane FaderCodec::unflatten(const VectorXd& column) const {
  if (column.size() != config_.input_dim()) throw ArgumentError("decoded column has wrong size");
  ImagePlane out(config_.resolution, config_.resolution, config_.channels);
  auto px = out.data();
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<float>(std::clamp(column[static_cast<Eigen::Index>(i)], 0.0, 1.0));
  }
  return out;
}

VectorXd FaderCodec::conditioning(const AttributeVector& attrs) const {
  VectorXd cond(2 * static_cast<Eigen::Index>(specs_.size()));
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    auto it = attrs.values.find(specs_[i].name);
    if (it == attrs.values.end()) {
      throw ArgumentError("missing value for attribute " + specs_[i].name);
    }
    if (!std::isfinite(it->second)) {
      throw ArgumentError("non-finite value for attribute " + specs_[i].name);
    }
    const auto pair = conditioning_pair(it->second);
    cond[2 * static_cast<Eigen::Index>(i)] = pair[0];
    cond[2 * static_cast<Eigen::Index>(i) + 1] = pair[1];
  }
  return cond;
}

MatrixXd FaderCodec::conditioning_from_labels(const MatrixXd& labels01) {
  MatrixXd cond(2 * labels01.rows(), labels01.cols());
  for (Eigen::Index i = 0; i < labels01.rows(); ++i) {
    cond.row(2 * i) = (1.0 - labels01.row(i).array()).matrix();
    cond.row(2 * i + 1) = labels01.row(i);
  }
  return cond;
}

MatrixXd FaderCodec::encode_batch(const MatrixXd& x) const {
  return encoder_.forward(x, nullptr);
}

MatrixXd FaderCodec::decode_batch(const MatrixXd& z, const MatrixXd& cond) const {
  return decoder_.forward(z, &cond);
}

MatrixXd FaderCodec::discriminate_batch(const MatrixXd& z) const {
  return discriminator_.forward(z, nullptr).unaryExpr([](double l) { return sigmoid(l); });
}

LatentCode FaderCodec::encode(const ImagePlane& x) const {
  const MatrixXd column = flatten(x);
  return LatentCode{encode_batch(column).col(0)};
}

ImagePlane FaderCodec::decode(const LatentCode& z, const AttributeVector& attrs) const {
  if (z.values.size() != config_.latent_dim) throw ArgumentError("latent code has wrong shape");
  const MatrixXd cond = conditioning(attrs);
  const MatrixXd zc = z.values;
  return unflatten(decode_batch(zc, cond).col(0));
}

std::map<std::string, double> FaderCodec::discriminate(const LatentCode& z) const {
  if (z.values.size() != config_.latent_dim) throw ArgumentError("latent code has wrong shape");
  const MatrixXd zc = z.values;
  const MatrixXd p = discriminate_batch(zc);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) out[specs_[i].name] = p(static_cast<Eigen::Index>(i), 0);
  return out;
}

double FaderCodec::reconstruction_loss(const MatrixXd& x, const MatrixXd& cond,
                                       VectorXd* encoder_grad, VectorXd* decoder_grad) const {
  Mlp::Cache enc_cache, dec_cache;
  const MatrixXd z = encoder_.forward(x, nullptr, &enc_cache);
  const MatrixXd recon = decoder_.forward(z, &cond, &dec_cache);
  const MatrixXd diff = recon - x;
  const double count = static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() / count;
  if (encoder_grad || decoder_grad) {
    VectorXd dec_grad = VectorXd::Zero(decoder_.params().size());
    const MatrixXd g_z = decoder_.backward(dec_cache, (2.0 / count) * diff, &dec_grad);
    if (decoder_grad) *decoder_grad = std::move(dec_grad);
    if (encoder_grad) {
      *encoder_grad = VectorXd::Zero(encoder_.params().size());
      encoder_.backward(enc_cache, g_z, encoder_grad, false);
    }
  }
  return loss;
}

double lambda_at(const CodecConfig& config, std::int64_t step) noexcept {
  if (config.lambda_ramp_steps <= 0) return config.lambda_max;
  const double frac = std::min(1.0, static_cast<double>(step) /
                                        static_cast<double>(config.lambda_ramp_steps));
  return config.lambda_max * frac;
}

TrainState init_train_state(const CodecConfig& config, const std::vector<AttributeSpec>& specs) {
  return TrainState{0, FaderCodec(config, specs), {}, {}, {}, {}};
}

void train_step(TrainState& state, const TrainBatch& batch, const CodecConfig& config) {
  FaderCodec& model = state.model;
  if (batch.images.cols() == 0) throw ArgumentError("empty training batch");
  if (batch.images.rows() != config.input_dim() ||
      batch.labels.rows() != static_cast<Eigen::Index>(model.specs().size()) ||
      batch.labels.cols() != batch.images.cols()) {
    throw ArgumentError("training batch shape does not match the codec");
  }
  for (Eigen::Index i = 0; i < batch.labels.size(); ++i) {
    const double v = batch.labels.data()[i];
    if (v != 0.0 && v != 1.0) throw ArgumentError("training labels must be 0/1 endpoints");
  }
  const double lambda = lambda_at(config, state.step);

  // Discriminator half-step on detached codes.
  Mlp& disc = model.discriminator();
  const MatrixXd z_detached = model.encode_batch(batch.images);
  Mlp::Cache disc_cache;
  MatrixXd disc_logits = disc.forward(z_detached, nullptr, &disc_cache);
  MatrixXd g_logits;
  const double disc_loss = bce_with_logits(disc_logits, batch.labels, &g_logits);
  require_finite(disc_loss, "discriminator", state.step);
  VectorXd disc_grad = VectorXd::Zero(disc.params().size());
  disc.backward(disc_cache, g_logits, &disc_grad, false);
  const VectorXd disc_backup = disc.params();
  const AdamState disc_opt_backup = state.discriminator_opt;
  adam_update(disc.params(), disc_grad, state.discriminator_opt,
              AdamParams{config.lr_discriminator, config.adam_beta1, config.adam_beta2});

  // Encoder/decoder half-step.
  Mlp::Cache enc_cache, dec_cache, adv_cache;
  const MatrixXd cond = FaderCodec::conditioning_from_labels(batch.labels);
  const MatrixXd z = model.encoder().forward(batch.images, nullptr, &enc_cache);
  const MatrixXd recon = model.decoder().forward(z, &cond, &dec_cache);
  const MatrixXd diff = recon - batch.images;
  const double count = static_cast<double>(diff.size());
  const double recon_loss = diff.squaredNorm() / count;

  const MatrixXd adv_logits = disc.forward(z, nullptr, &adv_cache);
  // Confusion target: the encoder pushes every discriminator output to 1/2.
  const MatrixXd confused = MatrixXd::Constant(adv_logits.rows(), adv_logits.cols(), 0.5);
  MatrixXd g_adv;
  const double adv_loss = bce_with_logits(adv_logits, confused, &g_adv);

  if (!std::isfinite(recon_loss) || !std::isfinite(adv_loss)) {
    disc.params() = disc_backup;
    state.discriminator_opt = disc_opt_backup;
    require_finite(recon_loss, "reconstruction", state.step);
    require_finite(adv_loss, "adversarial", state.step);
  }

  VectorXd dec_grad = VectorXd::Zero(model.decoder().params().size());
  MatrixXd g_z = model.decoder().backward(dec_cache, (2.0 / count) * diff, &dec_grad);
  if (lambda > 0.0) {
    g_z += disc.backward(adv_cache, lambda * g_adv, nullptr);
  }
  VectorXd enc_grad = VectorXd::Zero(model.encoder().params().size());
  model.encoder().backward(enc_cache, g_z, &enc_grad, false);

  const AdamParams ae{config.lr_autoencoder, config.adam_beta1, config.adam_beta2};
  adam_update(model.encoder().params(), enc_grad, state.encoder_opt, ae);
  adam_update(model.decoder().params(), dec_grad, state.decoder_opt, ae);

  state.last = StepLosses{recon_loss, adv_loss, disc_loss, lambda};
  ++state.step;
}

TrainBatch sample_batch(const TrainingSet& data, std::uint64_t seed, std::int64_t step,
                        int batch_size) {
  const Eigen::Index n = data.size();
  if (n == 0) throw ArgumentError("empty training set");
  const Eigen::Index b = std::min<Eigen::Index>(batch_size, n);
  std::mt19937_64 rng(derive_seed(seed, "batch:" + std::to_string(step)));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (Eigen::Index i = 0; i < b; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  TrainBatch batch;
  batch.images.resize(data.images.rows(), b);
  batch.labels.resize(data.labels.rows(), b);
  for (Eigen::Index i = 0; i < b; ++i) {
    batch.images.col(i) = data.images.col(order[static_cast<std::size_t>(i)]);
    batch.labels.col(i) = data.labels.col(order[static_cast<std::size_t>(i)]);
  }
  return batch;
}

TrainingSet load_training_set(const DatasetManifest& manifest,
                              const std::vector<AttributeSpec>& specs,
                              const CodecConfig& config) {
  std::vector<std::string> missing;
  for (const auto& r : manifest.records) {
    for (const auto& s : specs) {
      if (!r.annotations.contains(s.name)) {
        missing.push_back(r.id);
        break;
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "unannotated training records (" + std::to_string(missing.size()) + "):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  if (manifest.records.empty()) throw EmptyDatasetError("training manifest is empty");

  TrainingSet data;
  const auto n = static_cast<Eigen::Index>(manifest.records.size());
  data.images.resize(config.input_dim(), n);
  data.labels.resize(static_cast<Eigen::Index>(specs.size()), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& r = manifest.records[static_cast<std::size_t>(j)];
    ImagePlane img = resize_bilinear(read_image(r.path), config.resolution, config.resolution);
    auto px = img.data();
    for (int i = 0; i < config.resolution * config.resolution; ++i) {
      for (int c = 0; c < config.channels; ++c) {
        double v;
        if (config.channels == 1) {
          v = (px[3 * i] + px[3 * i + 1] + px[3 * i + 2]) / 3.0;
        } else {
          v = px[static_cast<std::size_t>(3 * i + std::min(c, 2))];
        }
        data.images(i * config.channels + c, j) = v;
      }
    }
    for (std::size_t s = 0; s < specs.size(); ++s) {
      const double a = specs[s].endpoint(r.annotations.at(specs[s].name));
      data.labels(static_cast<Eigen::Index>(s), j) = (a + 1.0) / 2.0;
    }
    data.ids.push_back(r.id);
  }
  return data;
}

void run_training(TrainState& state, const TrainingSet& data, const CodecConfig& config,
                  const TrainOptions& options) {
  while (state.step < options.steps) {
    const TrainBatch batch = sample_batch(data, config.seed, state.step, config.batch_size);
    try {
      train_step(state, batch, config);
    } catch (const NonFiniteLoss& e) {
      if (!options.failure_dump_path.empty()) {
        save_checkpoint(state, options.failure_dump_path);
        throw NonFiniteLoss(std::string(e.what()) + "; state dumped to " +
                            options.failure_dump_path.string());
      }
      throw;
    }
    const bool last = state.step == options.steps;
    if (options.progress && options.log_every > 0 &&
        (state.step % options.log_every == 0 || last || state.step == 1)) {
      nlohmann::json line{{"step", state.step},
                          {"reconstruction", state.last.reconstruction},
                          {"adversarial", state.last.adversarial},
                          {"discriminator", state.last.discriminator},
                          {"lambda", state.last.lambda}};
      *options.progress << line.dump() << '\n';
      options.progress->flush();
    }
    if (!options.checkpoint_path.empty() && options.checkpoint_every > 0 &&
        state.step % options.checkpoint_every == 0) {
      save_checkpoint(state, options.checkpoint_path);
    }
  }
}

FaderCodec train(const DatasetManifest& manifest, const std::vector<AttributeSpec>& specs,
                 const CodecConfig& config, const TrainOptions& options,
                 const std::filesystem::path& artifact_path) {
  const TrainingSet data = load_training_set(manifest, specs, config);
  TrainState state = init_train_state(config, specs);
  run_training(state, data, config, options);
  save_model(state.model, artifact_path);
  return state.model;
}

double reconstruction_mse(const FaderCodec& model, const TrainingSet& data) {
  const MatrixXd cond = FaderCodec::conditioning_from_labels(data.labels);
  return model.reconstruction_loss(data.images, cond);
}

double discriminator_accuracy(const FaderCodec& model, const TrainingSet& data,
                              std::size_t attribute) {
  if (attribute >= model.specs().size()) throw ArgumentError("attribute index out of range");
  if (data.size() == 0) throw ArgumentError("empty evaluation set");
  const MatrixXd p = model.discriminate_batch(model.encode_batch(data.images));
  const auto row = static_cast<Eigen::Index>(attribute);
  Eigen::Index correct = 0;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const bool predicted = p(row, j) >= 0.5;
    const bool truth = data.labels(row, j) >= 0.5;
    if (predicted == truth) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(p.cols());
}

}  // namespace cfaudit::codec
