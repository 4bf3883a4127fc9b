#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fdet/backbone.hpp"
#include "fdet/geometry.hpp"
#include "fdet/layers.hpp"

namespace fdet {

/// Multi-layer RoI feature concatenation settings. `taps` index into the
/// backbone's tap list.
struct ConcatConfig {
  std::vector<int> taps{0, 1, 2};
  int pooled = 7;
  double target_norm = 4700;
  int out_channels = 32;

  void validate() const;
};

/// Raised by l2_normalize when a blob has (near) zero norm, i.e. a dead tap.
struct UnnormalizableBlob : std::domain_error {
  using std::domain_error::domain_error;
};

struct RoiPoolResult {
  Tensor pooled;                    // (1, C, out, out)
  std::vector<std::int32_t> argmax;  // per output cell: y * W + x in its channel plane
};

/// Max RoI pooling of a (1, C, H, W) map. The RoI is divided by `stride`,
/// clipped to the map, and split into out x out bins whose edges are rounded
/// outward so no bin is empty. Ties resolve to the lowest linear index.
/// Throws std::invalid_argument("empty roi") when the RoI misses the map.
RoiPoolResult roi_pool(const Tensor& fmap, int stride, const BBox& roi, int out);

/// Scatters `dy` (1, C, out, out) into `dfmap` (same shape as the pooled map).
void roi_pool_backward(const RoiPoolResult& r, const Tensor& dy, Tensor& dfmap);

/// x / ||x||_F over the whole tensor. Throws UnnormalizableBlob below 1e-12.
Tensor l2_normalize(const Tensor& x);
/// Gradient of l2_normalize given input x and upstream dy.
Tensor l2_normalize_backward(const Tensor& x, const Tensor& dy);

/// Channel-axis concatenation of (1, C_i, P, P) blobs, rescaled so the result
/// has Frobenius norm exactly `target_norm`.
Tensor concat_rescale(std::span<const Tensor> blobs, double target_norm);
/// Returns per-blob gradients.
std::vector<Tensor> concat_rescale_backward(std::span<const Tensor> blobs, double target_norm,
                                            const Tensor& dy);

/// Pointwise channel mixing with a (C_out, C_in, 1, 1) weight tensor.
Tensor reduce_1x1(const Tensor& blob, const Tensor& weights);

/// Layer form of the whole composition:
///   roi_pool -> l2_normalize (per tap) -> concat_rescale -> 1x1 reduction.
class FeatureConcat {
 public:
  FeatureConcat() = default;
  /// `tap_channels` lists channels of every backbone tap. The 1x1 weights are
  /// He-initialized with a gain of 1/s and lr_mult 1/s^2, where s is the
  /// per-element magnitude implied by target_norm, so optimization behaves
  /// as if the blob had unit-scale entries.
  FeatureConcat(const ConcatConfig& cfg, std::vector<int> tap_channels, std::mt19937_64& rng);

  /// Output (R, out_channels, P, P). When `dropped` is non-null, RoIs with a
  /// dead tap are skipped and their indices appended instead of throwing.
  Tensor forward(std::span<const FeatureMap> taps, std::span<const BBox> rois,
                 std::vector<std::size_t>* dropped = nullptr);
  /// Gradients for every backbone tap (empty tensor for taps not pooled).
  std::vector<Tensor> backward(const Tensor& dy);

  /// Frobenius norms of each concatenated blob from the last forward.
  const std::vector<double>& blob_norms() const { return blob_norms_; }
  const ConcatConfig& config() const { return cfg_; }
  Conv2d& reduction() { return reduce_; }
  std::vector<Param*> params() { return reduce_.params(); }

 private:
  struct Cache {
    std::vector<RoiPoolResult> pooled;  // one per configured tap
    std::vector<Tensor> normalized;
  };
  ConcatConfig cfg_;
  std::vector<int> tap_channels_;
  int concat_channels_ = 0;
  Conv2d reduce_;
  std::vector<Cache> cache_;
  std::vector<std::vector<int>> tap_shapes_;
  std::vector<double> blob_norms_;
};

/// Single-RoI composition using `layer`'s weights.
Tensor concat_features(std::span<const FeatureMap> taps, const BBox& roi, FeatureConcat& layer);

/// Plain Fast R-CNN pooling from one tap, batched over RoIs, with backward.
class RoiPoolLayer {
 public:
  RoiPoolLayer() = default;
  RoiPoolLayer(int tap, int pooled) : tap_(tap), pooled_(pooled) {}

  Tensor forward(std::span<const FeatureMap> taps, std::span<const BBox> rois);
  std::vector<Tensor> backward(const Tensor& dy);

 private:
  int tap_ = 0, pooled_ = 7;
  std::size_t n_taps_ = 0;
  std::vector<int> tap_shape_;
  std::vector<RoiPoolResult> cache_;
};

}  // namespace fdet
