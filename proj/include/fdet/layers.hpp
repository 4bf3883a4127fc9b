#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fdet/tensor.hpp"

namespace fdet {

/// A trainable array with its gradient buffer. `lr_mult` scales the learning
/// rate for this parameter only.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  double lr_mult = 1.0;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

/// He-uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)) times `gain`.
void he_uniform(Tensor& t, int fan_in, std::mt19937_64& rng, double gain = 1.0);

/// 2-D cross-correlation over (N, C, H, W) inputs. Layers cache what their
/// backward needs; call forward then backward on the same instance.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad);

  Tensor forward(const Tensor& x);
  /// Accumulates parameter gradients; returns dL/dx.
  Tensor backward(const Tensor& dy);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  std::vector<Param*> params() { return {&weight_, &bias_}; }

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor input_;
};

/// Non-overlapping max pooling (kernel == stride). Ties go to the lowest index.
class MaxPool2d {
 public:
  explicit MaxPool2d(int k = 2) : k_(k) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  int k_;
  std::vector<int> in_shape_;
  std::vector<std::int32_t> argmax_;
};

/// y = x W^T + b over (rows, in) inputs; W is (out, in).
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  std::vector<Param*> params() { return {&weight_, &bias_}; }

 private:
  int in_ = 0, out_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

/// Row-wise softmax over a (rows, k) tensor.
Tensor softmax(const Tensor& logits);
/// Backward of row-wise softmax given its output.
Tensor softmax_backward(const Tensor& probs, const Tensor& dy);

struct LossGrad {
  double loss = 0;
  Tensor grad;
};

/// Mean cross-entropy over rows; gradient (softmax - onehot) / rows.
/// Throws std::out_of_range for labels outside [0, k).
LossGrad softmax_ce_loss(const Tensor& logits, std::span<const int> labels);

/// sum_i w_i * smoothL1(pred_i - target_i) / #{w_i > 0}.
LossGrad smooth_l1_loss(const Tensor& pred, const Tensor& target, const Tensor& inside_weights);

/// p <- p - lr * lr_mult * g for every parameter.
void sgd_step(std::span<Param* const> params, double lr);

/// Caffe-style momentum SGD: v <- m v + lr lr_mult (g + wd p); p <- p - v.
/// With m = wd = 0 this is exactly sgd_step.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9, double weight_decay = 0.0);

  void step(std::span<Param* const> params, double lr);
  /// One buffer per parameter, created on the first step.
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  double momentum_, decay_;
  std::vector<Tensor> velocity_;
};

}  // namespace fdet
