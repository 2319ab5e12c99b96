#include "cfaudit/codec/mlp.hpp"

#include <cmath>

#include "cfaudit/error.hpp"

namespace cfaudit::codec {

namespace {

using Eigen::MatrixXd;

void apply_activation(MatrixXd& m, Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return;
    case Activation::kLeakyRelu:
      m = m.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
      return;
    case Activation::kSigmoid:
      m = m.unaryExpr([](double v) { return sigmoid(v); });
      return;
  }
}

// Multiplies `grad` in place by the activation derivative at `pre`.
void scale_by_derivative(MatrixXd& grad, const MatrixXd& pre, Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return;
    case Activation::kLeakyRelu:
      grad = grad.binaryExpr(pre, [](double g, double p) { return p > 0.0 ? g : kLeakySlope * g; });
      return;
    case Activation::kSigmoid:
      grad = grad.binaryExpr(pre, [](double g, double p) {
        const double s = sigmoid(p);
        return g * s * (1.0 - s);
      });
      return;
  }
}

}  // namespace

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mlp::Mlp(std::vector<int> widths, int cond_dim, Activation hidden, Activation output)
    : widths_(std::move(widths)), cond_dim_(cond_dim) {
  if (widths_.size() < 2) throw ArgumentError("an MLP needs at least input and output widths");
  for (int w : widths_) {
    if (w <= 0) throw ArgumentError("MLP widths must be positive");
  }
  if (cond_dim_ < 0) throw ArgumentError("negative conditioning width");
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    Layer layer;
    layer.in = widths_[l] + cond_dim_;
    layer.out = widths_[l + 1];
    layer.weight_offset = offset;
    offset += static_cast<std::size_t>(layer.in) * layer.out;
    layer.bias_offset = offset;
    offset += static_cast<std::size_t>(layer.out);
    layer.act = (l + 2 == widths_.size()) ? output : hidden;
    layers_.push_back(layer);
  }
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
}

void Mlp::initialize(std::mt19937_64& rng) {
  params_.setZero();
  for (const auto& layer : layers_) {
    const double gain = layer.act == Activation::kLeakyRelu ? 2.0 : 1.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / layer.in));
    const std::size_t n = static_cast<std::size_t>(layer.in) * layer.out;
    for (std::size_t i = 0; i < n; ++i) params_[layer.weight_offset + i] = dist(rng);
  }
}

Eigen::MatrixXd Mlp::forward(const MatrixXd& x, const MatrixXd* cond, Cache* cache) const {
  if (x.rows() != input_dim()) throw ArgumentError("MLP input has the wrong width");
  if (cond_dim_ > 0) {
    if (cond == nullptr || cond->rows() != cond_dim_ || cond->cols() != x.cols()) {
      throw ArgumentError("MLP conditioning block has the wrong shape");
    }
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  MatrixXd h = x;
  for (const auto& layer : layers_) {
    MatrixXd input;
    if (cond_dim_ > 0) {
      input.resize(layer.in, x.cols());
      input.topRows(layer.in - cond_dim_) = h;
      input.bottomRows(cond_dim_) = *cond;
    } else {
      input = std::move(h);
    }
    Eigen::Map<const MatrixXd> w(params_.data() + layer.weight_offset, layer.out, layer.in);
    Eigen::Map<const Eigen::VectorXd> b(params_.data() + layer.bias_offset, layer.out);
    MatrixXd pre = w * input;
    pre.colwise() += b;
    h = pre;
    apply_activation(h, layer.act);
    if (cache) {
      cache->inputs.push_back(std::move(input));
      cache->pre.push_back(std::move(pre));
    }
  }
  return h;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const MatrixXd& grad_output,
                              Eigen::VectorXd* grad, bool input_grad) const {
  if (cache.pre.size() != layers_.size()) throw ArgumentError("MLP cache does not match network");
  if (grad && grad->size() != params_.size()) {
    *grad = Eigen::VectorXd::Zero(params_.size());
  }
  MatrixXd g = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const Layer& layer = layers_[i];
    scale_by_derivative(g, cache.pre[i], layer.act);
    if (grad) {
      Eigen::Map<MatrixXd> dw(grad->data() + layer.weight_offset, layer.out, layer.in);
      Eigen::Map<Eigen::VectorXd> db(grad->data() + layer.bias_offset, layer.out);
      dw.noalias() += g * cache.inputs[i].transpose();
      db += g.rowwise().sum();
    }
    if (i == 0 && !input_grad) return MatrixXd();
    Eigen::Map<const MatrixXd> w(params_.data() + layer.weight_offset, layer.out, layer.in);
    MatrixXd g_in = w.transpose() * g;
    g = g_in.topRows(layer.in - cond_dim_);
  }
  return g;
}

void adam_update(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
                 const AdamParams& hp) {
  if (grad.size() != params.size()) throw ArgumentError("gradient size differs from parameters");
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.t = 0;
  }
  ++state.t;
  state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * grad;
  state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  const double step = hp.learning_rate * std::sqrt(c2) / c1;
  params.array() -= step * state.m.array() / (state.v.array().sqrt() + hp.epsilon * std::sqrt(c2));
}

}  // namespace cfaudit::codec
