#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "cfaudit/codec/codec.hpp"
#include "cfaudit/dataset.hpp"
#include "cfaudit/error.hpp"
#include "cfaudit/toy.hpp"
#include "test_util.hpp"

namespace cfaudit::codec {
namespace {

using testing::TempDir;

CodecConfig tiny_config(int resolution = 8, int channels = 1) {
  CodecConfig c;
  c.resolution = resolution;
  c.channels = channels;
  c.encoder_hidden = {16};
  c.latent_dim = 4;
  c.decoder_hidden = {16};
  c.discriminator_hidden = {8};
  c.batch_size = 8;
  c.lambda_ramp_steps = 10;
  c.seed = 3;
  return c;
}

CodecConfig small_config(std::uint64_t seed, double lambda_max) {
  CodecConfig c;
  c.resolution = 16;
  c.channels = 3;
  c.encoder_hidden = {64};
  c.latent_dim = 8;
  c.decoder_hidden = {64};
  c.discriminator_hidden = {32};
  c.batch_size = 32;
  c.lambda_max = lambda_max;
  c.lambda_ramp_steps = 100;
  c.seed = seed;
  return c;
}

TEST(Lambda, RampEndpoints) {
  CodecConfig c;
  c.lambda_max = 0.01;
  c.lambda_ramp_steps = 500;
  EXPECT_EQ(lambda_at(c, 0), 0.0);
  EXPECT_EQ(lambda_at(c, 500), 0.01);
  EXPECT_EQ(lambda_at(c, 5000), 0.01);
  EXPECT_DOUBLE_EQ(lambda_at(c, 250), 0.005);
}

TEST(Conditioning, EndpointsAreOneHot) {
  EXPECT_EQ(conditioning_pair(-1.0), (std::array<double, 2>{1.0, 0.0}));
  EXPECT_EQ(conditioning_pair(1.0), (std::array<double, 2>{0.0, 1.0}));
  EXPECT_EQ(conditioning_pair(0.0), (std::array<double, 2>{0.5, 0.5}));
  EXPECT_EQ(conditioning_pair(2.0), (std::array<double, 2>{-0.5, 1.5}));
}

TEST(AttributeSpec, EndpointMapping) {
  const AttributeSpec g = toy::gender_spec();
  EXPECT_EQ(g.endpoint("female"), -1.0);
  EXPECT_EQ(g.endpoint("male"), 1.0);
  EXPECT_THROW(g.endpoint("other"), DataError);
  AttributeSpec bad = g;
  bad.test_lo = 2.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Codec, EncodeShapeAndDeterminism) {
  const TrainState s = init_train_state(tiny_config(), toy::default_specs());
  std::mt19937_64 rng(1);
  const ImagePlane x = testing::random_plane(rng, 8, 8, 1);
  const LatentCode a = s.model.encode(x);
  const LatentCode b = s.model.encode(x);
  EXPECT_EQ(a.values.size(), 4);
  EXPECT_EQ(a.values, b.values);
  EXPECT_THROW(s.model.encode(ImagePlane(9, 8, 1)), ArgumentError);
}

TEST(Codec, DecodeRangeDeterminismAndMissingAttribute) {
  const TrainState s = init_train_state(tiny_config(), toy::default_specs());
  LatentCode z;
  z.values = Eigen::VectorXd::Constant(4, 50.0);
  const AttributeVector attrs{{{"gender", 0.3}, {"mouth_open", -1.0}}};
  const ImagePlane d1 = s.model.decode(z, attrs);
  const ImagePlane d2 = s.model.decode(z, attrs);
  EXPECT_TRUE(d1.bit_equal(d2));
  for (float v : d1.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(s.model.decode(z, AttributeVector{{{"gender", 0.0}}}), ArgumentError);
}

TEST(Codec, DiscriminatorProbabilitiesInRange) {
  const TrainState s = init_train_state(tiny_config(), toy::default_specs());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const auto p = s.model.discriminate(s.model.encode(testing::random_plane(rng, 8, 8, 1)));
    ASSERT_EQ(p.size(), 2u);
    for (const auto& [name, v] : p) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Codec, ReconstructionGradientMatchesFiniteDifferences) {
  TrainState s = init_train_state(tiny_config(), toy::default_specs());
  FaderCodec& m = s.model;
  std::mt19937_64 rng(17);
  const int batch = 5;
  Eigen::MatrixXd x(64, batch);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  Eigen::MatrixXd labels(2, batch);
  for (Eigen::Index i = 0; i < labels.size(); ++i) labels.data()[i] = (u(rng) < 0.5) ? 0.0 : 1.0;
  const Eigen::MatrixXd cond = FaderCodec::conditioning_from_labels(labels);

  Eigen::VectorXd ge = Eigen::VectorXd::Zero(m.encoder().params().size());
  Eigen::VectorXd gd = Eigen::VectorXd::Zero(m.decoder().params().size());
  m.reconstruction_loss(x, cond, &ge, &gd);

  const Eigen::Index ne = ge.size();
  const Eigen::Index total = ne + gd.size();
  std::uniform_int_distribution<Eigen::Index> pick(0, total - 1);
  const double h = 1e-6;
  int checked = 0;
  while (checked < 20) {
    const Eigen::Index idx = pick(rng);
    Eigen::VectorXd& params = idx < ne ? m.encoder().params() : m.decoder().params();
    const Eigen::Index j = idx < ne ? idx : idx - ne;
    const double analytic = idx < ne ? ge[j] : gd[j];
    const double saved = params[j];
    params[j] = saved + h;
    const double up = m.reconstruction_loss(x, cond);
    params[j] = saved - h;
    const double down = m.reconstruction_loss(x, cond);
    params[j] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    EXPECT_LT(std::abs(analytic - numeric) / scale, 1e-3)
        << "param " << idx << " analytic " << analytic << " numeric " << numeric;
    ++checked;
  }
}

TEST(Training, AutoencoderLossFallsOnFixedBatch) {
  CodecConfig c = small_config(5, 0.0);
  const toy::ToySet set = toy::make_training_set(32, 16, 3, 5);
  TrainState s = init_train_state(c, toy::default_specs());
  const TrainBatch batch{set.data.images, set.data.labels};
  const Eigen::MatrixXd cond = FaderCodec::conditioning_from_labels(batch.labels);
  const double before = s.model.reconstruction_loss(batch.images, cond);
  for (int i = 0; i < 200; ++i) train_step(s, batch, c);
  EXPECT_EQ(s.step, 200);
  EXPECT_LT(s.model.reconstruction_loss(batch.images, cond), 0.5 * before);
}

TEST(Training, SeededRunsHaveIdenticalLosses) {
  const CodecConfig c = small_config(9, 0.01);
  const toy::ToySet set = toy::make_training_set(64, 16, 3, 9);
  TrainState a = init_train_state(c, toy::default_specs());
  TrainState b = init_train_state(c, toy::default_specs());
  for (int i = 0; i < 30; ++i) {
    train_step(a, sample_batch(set.data, c.seed, a.step, c.batch_size), c);
    train_step(b, sample_batch(set.data, c.seed, b.step, c.batch_size), c);
    ASSERT_EQ(a.last, b.last) << "step " << i;
  }
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  TempDir dir;
  const CodecConfig c = small_config(4, 0.01);
  const toy::ToySet set = toy::make_training_set(64, 16, 3, 4);

  TrainState full = init_train_state(c, toy::default_specs());
  TrainOptions opts;
  opts.steps = 40;
  run_training(full, set.data, c, opts);

  TrainState first = init_train_state(c, toy::default_specs());
  opts.steps = 20;
  run_training(first, set.data, c, opts);
  save_checkpoint(first, dir / "ckpt");
  TrainState resumed = load_checkpoint(dir / "ckpt");
  EXPECT_EQ(resumed.step, 20);
  opts.steps = 40;
  run_training(resumed, set.data, c, opts);

  EXPECT_EQ(resumed.step, full.step);
  EXPECT_EQ(resumed.last, full.last);
  EXPECT_EQ(resumed.model.encoder().params(), full.model.encoder().params());
  EXPECT_EQ(resumed.model.decoder().params(), full.model.decoder().params());
  EXPECT_EQ(resumed.model.discriminator().params(), full.model.discriminator().params());
}

TEST(Training, ProgressLinesAreEmitted) {
  const CodecConfig c = small_config(2, 0.01);
  const toy::ToySet set = toy::make_training_set(32, 16, 3, 2);
  TrainState s = init_train_state(c, toy::default_specs());
  std::ostringstream log;
  TrainOptions opts;
  opts.steps = 10;
  opts.log_every = 5;
  opts.progress = &log;
  run_training(s, set.data, c, opts);
  const std::string text = log.str();
  EXPECT_NE(text.find("\"step\":5"), std::string::npos);
  EXPECT_NE(text.find("\"step\":10"), std::string::npos);
  EXPECT_NE(text.find("\"lambda\""), std::string::npos);
}

TEST(Training, NonFiniteLossAbortsWithDump) {
  TempDir dir;
  const CodecConfig c = small_config(2, 0.01);
  const toy::ToySet set = toy::make_training_set(32, 16, 3, 2);
  TrainState s = init_train_state(c, toy::default_specs());
  s.model.decoder().params()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainOptions opts;
  opts.steps = 5;
  opts.failure_dump_path = dir / "dump";
  EXPECT_THROW(run_training(s, set.data, c, opts), NonFiniteLoss);
  EXPECT_TRUE(std::filesystem::exists(dir / "dump"));
  EXPECT_EQ(s.step, 0);
}

TEST(Artifact, ReloadReproducesOutputsExactly) {
  TempDir dir;
  const CodecConfig c = small_config(6, 0.01);
  const toy::ToySet set = toy::make_training_set(32, 16, 3, 6);
  TrainState s = init_train_state(c, toy::default_specs());
  TrainOptions opts;
  opts.steps = 10;
  run_training(s, set.data, c, opts);
  save_model(s.model, dir / "m.cfc");
  const FaderCodec back = load_model(dir / "m.cfc");
  EXPECT_EQ(back.config(), c);
  EXPECT_EQ(back.specs(), toy::default_specs());
  const ImagePlane x = s.model.unflatten(set.data.images.col(0));
  const AttributeVector attrs{{{"gender", 1.7}, {"mouth_open", 1.0}}};
  EXPECT_EQ(back.encode(x).values, s.model.encode(x).values);
  EXPECT_TRUE(back.decode(back.encode(x), attrs).bit_equal(s.model.decode(s.model.encode(x), attrs)));
}

TEST(Artifact, CorruptFileIsRejected) {
  TempDir dir;
  write_file_atomic(dir / "bad.cfc", std::string("definitely not a model"));
  EXPECT_THROW(load_model(dir / "bad.cfc"), DataError);
}

TEST(Training, UnannotatedRecordsAreListed) {
  TempDir dir;
  std::filesystem::create_directories(dir / "faces");
  std::mt19937_64 rng(1);
  write_png(dir / "faces/a.png", testing::random_plane(rng, 16, 16));
  write_png(dir / "faces/b.png", testing::random_plane(rng, 16, 16));
  DatasetManifest m = build_manifest(dir.path(), {}).manifest;
  const std::string annotated = m.records[0].id;
  const std::string missing = m.records[1].id;
  attach_annotations(m, {{annotated, "gender", "male"}, {annotated, "mouth_open", "open"}});
  try {
    load_training_set(m, toy::default_specs(), small_config(1, 0.0));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(missing), std::string::npos);
    EXPECT_EQ(std::string(e.what()).find(annotated), std::string::npos);
  }
}

TEST(Training, ConditioningIsLive) {
  const CodecConfig c = small_config(8, 0.01);
  const toy::ToySet set = toy::make_training_set(64, 16, 3, 8);
  TrainState s = init_train_state(c, toy::default_specs());
  TrainOptions opts;
  opts.steps = 50;
  run_training(s, set.data, c, opts);
  const LatentCode z = s.model.encode(s.model.unflatten(set.data.images.col(0)));
  const ImagePlane lo = s.model.decode(z, {{{"gender", -2.0}, {"mouth_open", 0.0}}});
  const ImagePlane hi = s.model.decode(z, {{{"gender", 2.0}, {"mouth_open", 0.0}}});
  const ImagePlane lo2 = s.model.decode(z, {{{"gender", -2.0}, {"mouth_open", 0.0}}});
  EXPECT_GT(mean_squared_error(lo, hi), 0.0);
  EXPECT_EQ(mean_squared_error(lo, lo2), 0.0);
}

// Paired comparison: the adversarial term lowers held-out discriminator
// accuracy on the sensitive attribute for every seed.
TEST(Training, AdversaryLowersHeldOutAccuracy) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const toy::ToySet train = toy::make_training_set(300, 16, 3, 100 + seed);
    const toy::ToySet held = toy::make_training_set(200, 16, 3, 200 + seed);
    double acc[2];
    for (int arm = 0; arm < 2; ++arm) {
      CodecConfig c = small_config(seed, arm == 0 ? 0.0 : 0.05);
      c.lambda_ramp_steps = 250;
      TrainState s = init_train_state(c, toy::default_specs());
      TrainOptions opts;
      opts.steps = 1000;
      run_training(s, train.data, c, opts);
      acc[arm] = discriminator_accuracy(s.model, held.data, 0);
    }
    EXPECT_LT(acc[1], acc[0]) << "seed " << seed << " ablation " << acc[0] << " adversarial "
                              << acc[1];
  }
}

}  // namespace
}  // namespace cfaudit::codec
