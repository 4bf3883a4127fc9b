#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "fdet/anchors.hpp"
#include "fdet/backbone.hpp"
#include "fdet/data.hpp"
#include "fdet/featconcat.hpp"
#include "fdet/layers.hpp"
#include "fdet/sampling.hpp"

namespace fdet {

struct RpnConfig {
  int channels = 32;
  std::size_t batch = 256;
  double fg_fraction = 0.5;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  double nms = 0.7;
  std::size_t pre_nms_train = 12000;
  std::size_t post_nms_train = 2000;
  std::size_t pre_nms_test = 6000;
  std::size_t post_nms_test = 100;
  double min_size = 4;  // proposals narrower or shorter than this are dropped
};

struct HeadConfig {
  int hidden = 128;
  /// Regression targets are divided by these before the loss.
  std::array<double, 4> target_stds{0.1, 0.1, 0.2, 0.2};
};

struct ModelConfig {
  BackboneSpec backbone;
  AnchorConfig anchors;
  RpnConfig rpn;
  HeadConfig head;
  /// Multi-layer concatenation head; otherwise plain RoI pooling on the last
  /// tap. concat.pooled sets the pooled size in both cases.
  bool use_concat = true;
  ConcatConfig concat;

  void validate() const;
};

struct RoiSampling {
  double fg_iou = 0.5;
  double fg_fraction = 0.25;
  std::size_t batch = 128;
};

struct LossWeights {
  double rpn_cls = 1, rpn_box = 1, head_cls = 1, head_box = 1;
};

struct LossBreakdown {
  double rpn_cls = 0, rpn_box = 0, head_cls = 0, head_box = 0;
  double total(const LossWeights& w = {}) const {
    return w.rpn_cls * rpn_cls + w.rpn_box * rpn_box + w.head_cls * head_cls + w.head_box * head_box;
  }
};

struct StepStats {
  LossBreakdown loss;
  double total = 0;
  std::size_t foreground = 0, background = 0, hard = 0, hard_overflow = 0, dropped = 0;
  std::vector<double> blob_norms;  // concat head only
};

struct DetectParams {
  double score_threshold = 0.8;
  double nms = 0.3;
};

/// Toy Faster R-CNN: backbone, RPN on the last tap, and a two-layer head on
/// pooled RoI features. Anchors and boxes live in the coordinates of the
/// (already scaled) input image.
class Detector {
 public:
  Detector() = default;
  Detector(const ModelConfig& cfg, std::uint64_t seed);

  /// One joint RPN + head forward/backward on a single image. Zeroes the
  /// gradients first; afterwards every Param::grad holds d(total)/dparam.
  /// `hards` must already be in the image's coordinates.
  StepStats train_step(const Tensor& image, const ImageRecord& record,
                       std::span<const HardNegative> hards, const RoiSampling& sampling,
                       const LossWeights& weights, std::mt19937_64& rng);

  /// Boxes above the threshold after NMS, clipped to width x height.
  std::vector<ScoredRegion> detect(const Tensor& image, const DetectParams& params);

  /// RPN proposals for an image (test-time counts).
  std::vector<ScoredRegion> proposals(const Tensor& image);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param*> params();
  /// Blob norms from the most recent concat forward.
  const std::vector<double>& blob_norms() const { return concat_.blob_norms(); }

 private:
  struct RpnOut {
    std::vector<FeatureMap> taps;
    Tensor cls, box;  // (1, 2A, h, w), (1, 4A, h, w)
    std::vector<BBox> anchors;
  };
  RpnOut run_rpn(const Tensor& padded);
  std::vector<ScoredRegion> make_proposals(const RpnOut& out, int width, int height,
                                           std::size_t pre_k, std::size_t post_k) const;
  Tensor head_features(std::span<const FeatureMap> taps, std::span<const BBox> rois,
                       std::vector<std::size_t>* dropped);
  std::vector<Tensor> head_features_backward(const Tensor& dy);

  ModelConfig cfg_;
  Backbone backbone_;
  Conv2d rpn_conv_, rpn_cls_, rpn_box_;
  ReLU rpn_relu_;
  FeatureConcat concat_;
  RoiPoolLayer pool_;
  Linear fc_, cls_, box_;
  ReLU fc_relu_;
};

/// Anchor-major gather: row k of the result holds anchor k's (bg, fg) logits.
Tensor rpn_logits(const Tensor& cls, std::size_t per_location);
/// Row k holds anchor k's (tx, ty, tw, th).
Tensor rpn_deltas(const Tensor& box, std::size_t per_location);

}  // namespace fdet
