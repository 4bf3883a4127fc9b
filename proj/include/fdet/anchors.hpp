#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fdet/geometry.hpp"

namespace fdet {

/// RPN anchor set. A "size" is the side of the square anchor; ratios are
/// height:width and preserve area.
struct AnchorConfig {
  std::vector<double> sizes{64, 128, 256, 512};
  std::vector<double> ratios{1.0, 2.0, 0.5};
  double stride = 16;

  /// Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
  std::size_t per_location() const { return sizes.size() * ratios.size(); }
};

/// Faster R-CNN box parameterization relative to an anchor.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

/// Anchors ordered (row j, column i, size, ratio), i.e. location-major with
/// per_location() anchors per cell.
std::vector<BBox> generate_anchors(const AnchorConfig& cfg, int fmap_w, int fmap_h);

BoxDelta encode_delta(const BBox& anchor, const BBox& gt);
BBox decode_delta(const BBox& anchor, const BoxDelta& d);

enum class AnchorLabel { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct AnchorLabels {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;  // argmax gt per anchor, -1 when there are no gts
  std::vector<double> max_iou;
};

AnchorLabels label_anchors(std::span<const BBox> anchors, std::span<const BBox> gts,
                           double pos_thr = 0.7, double neg_thr = 0.3);

/// Top `pre_nms_k` by score, NMS at `nms_thr`, truncated to `post_nms_k`.
/// Inputs must be rectangles.
std::vector<ScoredRegion> select_proposals(std::span<const ScoredRegion> scored,
                                           std::size_t pre_nms_k, double nms_thr,
                                           std::size_t post_nms_k);

}  // namespace fdet
