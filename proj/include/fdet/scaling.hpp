#pragma once

#include <random>
#include <utility>
#include <vector>

#include "fdet/data.hpp"
#include "fdet/tensor.hpp"

namespace fdet {

/// Resize policy: the shorter side goes to one of `targets` unless the longer
/// side would then exceed `cap`.
struct ScalePolicy {
  std::vector<double> targets{600};
  double cap = 1000;

  void validate() const;

  static ScalePolicy pretrain() { return {{600}, 1000}; }
  static ScalePolicy finetune() { return {{480, 600, 750}, 1250}; }
};

/// Single aspect-preserving factor; the target is drawn uniformly.
double choose_scale(double width, double height, const ScalePolicy& policy, std::mt19937_64& rng);
/// Deterministic variant for a given target (used at test time with the
/// first target of the policy).
double scale_for_target(double width, double height, double target, double cap);

/// Bilinear resize of a (N, C, H, W) tensor to round(dim * factor), min 1.
Tensor resize_image(const Tensor& image, double factor);

/// Scales every annotation (and the recorded dims) by `factor`.
ImageRecord scale_record(const ImageRecord& record, double factor);

/// Mirrors columns; x1' = W - x2, x2' = W - x1; ellipse cx' = W - cx and
/// angle' = -angle.
std::pair<Tensor, ImageRecord> hflip(const Tensor& image, const ImageRecord& record);

}  // namespace fdet
