#include "fdet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fdet/kernels.hpp"

namespace fdet {

void he_uniform(Tensor& t, int fan_in, std::mt19937_64& rng, double gain) {
  const double limit = gain * std::sqrt(6.0 / std::max(1, fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.data()) v = dist(rng);
}

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
               int pad)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", Tensor({out_channels, in_channels, kernel, kernel})),
      bias_(name + ".bias", Tensor({out_channels})) {}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.rank() != 4 || x.c() != in_)
    throw std::invalid_argument("conv2d: input " + shape_string(x.shape()) +
                                " incompatible with weights " +
                                shape_string(weight_.value.shape()));
  kernels::ConvShape s{x.n(), in_, x.h(), x.w(), out_, k_, stride_, pad_};
  if (x.h() + 2 * pad_ < k_ || x.w() + 2 * pad_ < k_)
    throw std::invalid_argument("conv2d: kernel " + shape_string(weight_.value.shape()) +
                                " does not fit padded input " + shape_string(x.shape()));
  input_ = x;
  Tensor y({x.n(), out_, s.out_height(), s.out_width()});
  kernels::parallel::conv2d_forward(s, x.span(), weight_.value.span(), bias_.value.span(),
                                    y.span());
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = input_;
  kernels::ConvShape s{x.n(), in_, x.h(), x.w(), out_, k_, stride_, pad_};
  Tensor dx(x.shape());
  kernels::parallel::conv2d_backward_weights(s, x.span(), dy.span(), weight_.grad.span(),
                                             bias_.grad.span());
  kernels::parallel::conv2d_backward_input(s, dy.span(), weight_.value.span(), dx.span());
  return dx;
}

Tensor ReLU::forward(const Tensor& x) {
  input_ = x;
  Tensor y = x;
  for (double& v : y.data()) v = v > 0 ? v : 0.0;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(input_[i] > 0)) dx[i] = 0.0;
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x) {
  if (x.rank() != 4 || x.h() < k_ || x.w() < k_)
    throw std::invalid_argument("max_pool2d: input " + shape_string(x.shape()) +
                                " smaller than kernel " + std::to_string(k_));
  kernels::PoolShape s{x.n() * x.c(), x.h(), x.w(), k_, k_};
  in_shape_ = x.shape();
  Tensor y({x.n(), x.c(), s.out_height(), s.out_width()});
  argmax_.assign(y.size(), 0);
  kernels::parallel::maxpool_forward(s, x.span(), y.span(), argmax_);
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) const {
  kernels::PoolShape s{in_shape_[0] * in_shape_[1], in_shape_[2], in_shape_[3], k_, k_};
  Tensor dx(in_shape_);
  kernels::parallel::maxpool_backward(s, dy.span(), argmax_, dx.span());
  return dx;
}

Linear::Linear(std::string name, int in, int out)
    : in_(in),
      out_(out),
      weight_(name + ".weight", Tensor({out, in})),
      bias_(name + ".bias", Tensor({out})) {}

Tensor Linear::forward(const Tensor& x) {
  if (x.rank() < 2 || static_cast<int>(x.size() / x.dim(0)) != in_)
    throw std::invalid_argument("linear: input " + shape_string(x.shape()) +
                                " incompatible with weights " +
                                shape_string(weight_.value.shape()));
  const int rows = x.dim(0);
  input_ = x.reshaped({rows, in_});
  Tensor y({rows, out_});
  kernels::parallel::linear_forward(rows, in_, out_, input_.span(), weight_.value.span(),
                                    bias_.value.span(), y.span());
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const int rows = input_.dim(0);
  Tensor dx({rows, in_});
  kernels::parallel::linear_backward(rows, in_, out_, dy.span(), input_.span(),
                                     weight_.value.span(), dx.span(), weight_.grad.span(),
                                     bias_.grad.span());
  return dx;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax expects (rows, k)");
  Tensor p = logits;
  const int rows = logits.dim(0), k = logits.dim(1);
  for (int r = 0; r < rows; ++r) {
    double m = p.at(r, 0);
    for (int j = 1; j < k; ++j) m = std::max(m, p.at(r, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += (p.at(r, j) = std::exp(p.at(r, j) - m));
    for (int j = 0; j < k; ++j) p.at(r, j) /= z;
  }
  return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& dy) {
  Tensor dx(probs.shape());
  const int rows = probs.dim(0), k = probs.dim(1);
  for (int r = 0; r < rows; ++r) {
    double dot = 0;
    for (int j = 0; j < k; ++j) dot += probs.at(r, j) * dy.at(r, j);
    for (int j = 0; j < k; ++j) dx.at(r, j) = probs.at(r, j) * (dy.at(r, j) - dot);
  }
  return dx;
}

LossGrad softmax_ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw std::invalid_argument("softmax_ce_loss: logits " + shape_string(logits.shape()) +
                                " vs " + std::to_string(labels.size()) + " labels");
  const int rows = logits.dim(0), k = logits.dim(1);
  LossGrad out{0.0, softmax(logits)};
  if (rows == 0) return out;
  for (int r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= k)
      throw std::out_of_range("softmax_ce_loss: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(k) + ")");
    // log-sum-exp form keeps the loss finite for saturated logits
    double m = logits.at(r, 0);
    for (int j = 1; j < k; ++j) m = std::max(m, logits.at(r, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(logits.at(r, j) - m);
    out.loss += (m + std::log(z)) - logits.at(r, y);
    out.grad.at(r, y) -= 1.0;
  }
  out.loss /= rows;
  out.grad *= 1.0 / rows;
  return out;
}

LossGrad smooth_l1_loss(const Tensor& pred, const Tensor& target, const Tensor& inside_weights) {
  if (pred.shape() != target.shape() || pred.shape() != inside_weights.shape())
    throw std::invalid_argument("smooth_l1_loss: shapes " + shape_string(pred.shape()) + ", " +
                                shape_string(target.shape()) + ", " +
                                shape_string(inside_weights.shape()));
  LossGrad out{0.0, Tensor(pred.shape())};
  std::size_t active = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) active += inside_weights[i] > 0;
  if (active == 0) return out;
  const double norm = 1.0 / static_cast<double>(active);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double w = inside_weights[i];
    if (w == 0) continue;
    const double d = pred[i] - target[i];
    const double ad = std::abs(d);
    out.loss += w * (ad < 1 ? 0.5 * d * d : ad - 0.5);
    out.grad[i] = w * norm * (ad < 1 ? d : (d > 0 ? 1.0 : -1.0));
  }
  out.loss *= norm;
  return out;
}

void sgd_step(std::span<Param* const> params, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  for (Param* p : params) {
    if (p->grad.shape() != p->value.shape())
      throw std::invalid_argument("sgd_step: gradient shape mismatch for " + p->name);
    const double step = lr * p->lr_mult;
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= step * p->grad[i];
  }
}

MomentumSgd::MomentumSgd(double momentum, double weight_decay)
    : momentum_(momentum), decay_(weight_decay) {
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
}

void MomentumSgd::step(std::span<Param* const> params, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (velocity_.empty())
    for (Param* p : params) velocity_.emplace_back(p->value.shape());
  if (velocity_.size() != params.size())
    throw std::invalid_argument("sgd: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    Tensor& v = velocity_[k];
    if (p.grad.shape() != p.value.shape() || v.shape() != p.value.shape())
      throw std::invalid_argument("sgd: shape mismatch for " + p.name);
    const double step = lr * p.lr_mult;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = decay_ > 0 ? p.grad[i] + decay_ * p.value[i] : p.grad[i];
      v[i] = momentum_ * v[i] + step * g;
      p.value[i] -= v[i];
    }
  }
}

}  // namespace fdet
