#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cfaudit/codec/mlp.hpp"
#include "cfaudit/image.hpp"

namespace cfaudit {
struct DatasetManifest;
}

namespace cfaudit::codec {

enum class AttributeRole { kSensitive, kControlled };

// A binary attribute. Its two categorical values map to the training
// endpoints a = -1 (negative) and a = +1 (positive).
struct AttributeSpec {
  std::string name;
  AttributeRole role = AttributeRole::kSensitive;
  std::string negative_value;
  std::string positive_value;
  double test_lo = -2.0;
  double test_hi = 2.0;

  void validate() const;
  // -1 or +1 for the declared categorical values; throws DataError otherwise.
  double endpoint(const std::string& value) const;

  bool operator==(const AttributeSpec&) const = default;
};

// Decoder conditioning for a real attribute value: (1 - t, t) with
// t = (a + 1) / 2, so a = -1 and a = +1 give the one-hot training columns and
// |a| > 1 extrapolates.
std::array<double, 2> conditioning_pair(double a) noexcept;

struct AttributeVector {
  std::map<std::string, double> values;
};

struct LatentCode {
  Eigen::VectorXd values;
};

struct CodecConfig {
  int resolution = 64;
  int channels = 3;
  std::vector<int> encoder_hidden{256};
  int latent_dim = 32;
  std::vector<int> decoder_hidden{256};
  std::vector<int> discriminator_hidden{64};
  double lambda_max = 0.01;
  std::int64_t lambda_ramp_steps = 500;
  double lr_autoencoder = 1e-3;
  double lr_discriminator = 1e-3;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
  int input_dim() const noexcept { return resolution * resolution * channels; }

  bool operator==(const CodecConfig&) const = default;
};

// Encoder E, attribute-conditioned decoder D(z, a), and a latent
// discriminator predicting every attribute from E(x). The decoder sees the
// conditioning block at every layer.
class FaderCodec {
 public:
  FaderCodec(CodecConfig config, std::vector<AttributeSpec> specs);

  const CodecConfig& config() const noexcept { return config_; }
  const std::vector<AttributeSpec>& specs() const noexcept { return specs_; }
  std::size_t spec_index(const std::string& name) const;

  LatentCode encode(const ImagePlane& x) const;
  ImagePlane decode(const LatentCode& z, const AttributeVector& attrs) const;
  std::map<std::string, double> discriminate(const LatentCode& z) const;

  // Batched forms. Images are columns of flattened HWC samples.
  Eigen::MatrixXd encode_batch(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd decode_batch(const Eigen::MatrixXd& z, const Eigen::MatrixXd& cond) const;
  Eigen::MatrixXd discriminate_batch(const Eigen::MatrixXd& z) const;  // probabilities

  Eigen::VectorXd flatten(const ImagePlane& x) const;
  ImagePlane unflatten(const Eigen::VectorXd& column) const;
  Eigen::VectorXd conditioning(const AttributeVector& attrs) const;
  // Labels in {0, 1} (rows = attributes) to the two-column conditioning block.
  static Eigen::MatrixXd conditioning_from_labels(const Eigen::MatrixXd& labels01);

  // Mean squared reconstruction error of D(E(x), cond) and, optionally, its
  // gradients with respect to encoder and decoder parameters.
  double reconstruction_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                             Eigen::VectorXd* encoder_grad = nullptr,
                             Eigen::VectorXd* decoder_grad = nullptr) const;

  Mlp& encoder() noexcept { return encoder_; }
  Mlp& decoder() noexcept { return decoder_; }
  Mlp& discriminator() noexcept { return discriminator_; }
  const Mlp& encoder() const noexcept { return encoder_; }
  const Mlp& decoder() const noexcept { return decoder_; }
  const Mlp& discriminator() const noexcept { return discriminator_; }

 private:
  CodecConfig config_;
  std::vector<AttributeSpec> specs_;
  Mlp encoder_;
  Mlp decoder_;
  Mlp discriminator_;
};

struct StepLosses {
  double reconstruction = 0.0;
  double adversarial = 0.0;
  double discriminator = 0.0;
  double lambda = 0.0;

  bool operator==(const StepLosses&) const = default;
};

struct TrainState {
  std::int64_t step = 0;
  FaderCodec model;
  AdamState encoder_opt;
  AdamState decoder_opt;
  AdamState discriminator_opt;
  StepLosses last;
};

struct TrainBatch {
  Eigen::MatrixXd images;  // input_dim x B
  Eigen::MatrixXd labels;  // attributes x B, values in {0, 1}
};

// lambda_max * min(1, step / ramp_steps).
double lambda_at(const CodecConfig& config, std::int64_t step) noexcept;

TrainState init_train_state(const CodecConfig& config, const std::vector<AttributeSpec>& specs);

// One discriminator update on detached codes, then one encoder/decoder update
// on reconstruction + lambda * BCE(discriminator(E(x)), 1/2).
// Throws NonFiniteLoss (state untouched for the failing half-step's outputs).
void train_step(TrainState& state, const TrainBatch& batch, const CodecConfig& config);

struct TrainingSet {
  Eigen::MatrixXd images;
  Eigen::MatrixXd labels;
  std::vector<std::string> ids;

  Eigen::Index size() const noexcept { return images.cols(); }
};

// Batch for a given step. Depends only on (seed, step), so resumed runs see the
// same sequence as uninterrupted ones.
TrainBatch sample_batch(const TrainingSet& data, std::uint64_t seed, std::int64_t step,
                        int batch_size);

// Loads and resizes every record; throws DataError listing unannotated ids.
TrainingSet load_training_set(const DatasetManifest& manifest,
                              const std::vector<AttributeSpec>& specs,
                              const CodecConfig& config);

struct TrainOptions {
  std::int64_t steps = 2000;
  std::ostream* progress = nullptr;  // one JSON line per logged step
  std::int64_t log_every = 100;
  std::filesystem::path checkpoint_path;  // empty: no periodic checkpoints
  std::int64_t checkpoint_every = 0;
  std::filesystem::path failure_dump_path;  // state dump on non-finite loss
};

// Runs train_step until state.step reaches options.steps.
void run_training(TrainState& state, const TrainingSet& data, const CodecConfig& config,
                  const TrainOptions& options);

// Full pipeline: validate annotations, train from scratch, persist artifact.
FaderCodec train(const DatasetManifest& manifest, const std::vector<AttributeSpec>& specs,
                 const CodecConfig& config, const TrainOptions& options,
                 const std::filesystem::path& artifact_path);

double reconstruction_mse(const FaderCodec& model, const TrainingSet& data);
// Fraction of samples whose thresholded discriminator output matches the label.
double discriminator_accuracy(const FaderCodec& model, const TrainingSet& data,
                              std::size_t attribute);

// Artifact container: magic, format version, JSON header (config, specs,
// step), then raw little-endian float64 parameter blobs.
inline constexpr std::uint32_t kArtifactVersion = 1;
void save_model(const FaderCodec& model, const std::filesystem::path& path);
FaderCodec load_model(const std::filesystem::path& path);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

std::string to_string(AttributeRole role);
AttributeRole role_from_string(const std::string& text);

}  // namespace cfaudit::codec
