#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>

namespace cfaudit::codec {

enum class Activation { kIdentity, kLeakyRelu, kSigmoid };

// Fully connected stack whose parameters live in one flat vector, so the
// optimizer, serializer, and gradient checker all see a single buffer.
// Samples are columns. When `cond_dim` > 0 the conditioning block is stacked
// under every layer's input.
class Mlp {
 public:
  struct Cache {
    std::vector<Eigen::MatrixXd> inputs;  // per layer, including the cond block
    std::vector<Eigen::MatrixXd> pre;     // pre-activation per layer
  };

  Mlp() = default;
  Mlp(std::vector<int> widths, int cond_dim, Activation hidden, Activation output);

  // He-normal weights for rectified layers, Glorot-style for the output layer.
  void initialize(std::mt19937_64& rng);

  int input_dim() const noexcept { return widths_.empty() ? 0 : widths_.front(); }
  int output_dim() const noexcept { return widths_.empty() ? 0 : widths_.back(); }
  int cond_dim() const noexcept { return cond_dim_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  const std::vector<int>& widths() const noexcept { return widths_; }

  Eigen::VectorXd& params() noexcept { return params_; }
  const Eigen::VectorXd& params() const noexcept { return params_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, const Eigen::MatrixXd* cond,
                          Cache* cache = nullptr) const;

  // Accumulates parameter gradients into `grad` (layout of params(), may be
  // null to skip) and returns the gradient with respect to `x`, or an empty
  // matrix when `input_grad` is false.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                           Eigen::VectorXd* grad, bool input_grad = true) const;

 private:
  struct Layer {
    int in = 0;  // including cond block
    int out = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    Activation act = Activation::kIdentity;
  };

  std::vector<int> widths_;
  int cond_dim_ = 0;
  std::vector<Layer> layers_;
  Eigen::VectorXd params_;
};

inline constexpr double kLeakySlope = 0.2;

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t t = 0;
};

void adam_update(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
                 const AdamParams& hp);

// Numerically stable sigmoid.
double sigmoid(double x) noexcept;

}  // namespace cfaudit::codec
