#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fdet/layers.hpp"
#include "fdet/tensor.hpp"

namespace fdet {

/// One backbone stage: `convs` 3x3 conv+relu blocks followed by a max pool
/// with kernel and stride `downsample` (1 = no pooling).
struct StageSpec {
  int channels = 16;
  int convs = 1;
  int downsample = 2;
};

/// Toy stand-in for VGG16. Taps name the stages whose outputs are exposed;
/// the default exposes strides 4, 8 and 16 like conv3_3/conv4_3/conv5_3.
struct BackboneSpec {
  int input_channels = 1;
  std::vector<StageSpec> stages{{16, 1, 4}, {32, 1, 2}, {32, 1, 2}};
  std::vector<int> taps{0, 1, 2};

  /// Throws std::invalid_argument when tap strides are not strictly
  /// increasing powers of two or a tap index is out of range.
  void validate() const;
  int stage_stride(int stage) const;
  int tap_stride(std::size_t tap) const { return stage_stride(taps.at(tap)); }
  int tap_channels(std::size_t tap) const { return stages.at(taps.at(tap)).channels; }
  int max_stride() const { return tap_stride(taps.size() - 1); }
};

struct FeatureMap {
  Tensor map;
  int stride = 1;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, std::mt19937_64& rng);

  /// Image dims must be multiples of spec.max_stride(); see pad_to_multiple.
  std::vector<FeatureMap> forward(const Tensor& image);
  /// `tap_grads` aligned with the taps; empty tensors mean zero gradient.
  void backward(const std::vector<Tensor>& tap_grads);

  const BackboneSpec& spec() const { return spec_; }
  std::vector<Param*> params();

 private:
  struct Block {
    Conv2d conv;
    ReLU relu;
  };
  struct Stage {
    std::vector<Block> blocks;
    MaxPool2d pool;
    int downsample = 1;
  };
  BackboneSpec spec_;
  std::vector<Stage> stages_;
};

/// Zero-pads the bottom/right of a (1, C, H, W) image up to multiples of
/// `multiple`; image coordinates are unchanged.
Tensor pad_to_multiple(const Tensor& image, int multiple);

}  // namespace fdet
