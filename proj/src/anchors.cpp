#include "fdet/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fdet {

void AnchorConfig::validate() const {
  if (sizes.empty()) throw std::invalid_argument("anchor sizes must be non-empty");
  if (ratios.empty()) throw std::invalid_argument("anchor ratios must be non-empty");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (!(sizes[i] > 0)) throw std::invalid_argument("anchor sizes must be positive");
    if (i > 0 && !(sizes[i] > sizes[i - 1]))
      throw std::invalid_argument("anchor sizes must be strictly increasing");
  }
  for (double r : ratios)
    if (!(r > 0)) throw std::invalid_argument("anchor ratios must be positive");
  if (!(stride > 0)) throw std::invalid_argument("anchor stride must be positive");
}

std::vector<BBox> generate_anchors(const AnchorConfig& cfg, int fmap_w, int fmap_h) {
  cfg.validate();
  if (fmap_w < 1 || fmap_h < 1) throw std::invalid_argument("feature map must be at least 1x1");
  std::vector<BBox> out;
  out.reserve(static_cast<std::size_t>(fmap_w) * fmap_h * cfg.per_location());
  for (int j = 0; j < fmap_h; ++j)
    for (int i = 0; i < fmap_w; ++i) {
      const double cx = (i + 0.5) * cfg.stride, cy = (j + 0.5) * cfg.stride;
      for (double s : cfg.sizes)
        for (double r : cfg.ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          out.emplace_back(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2);
        }
    }
  return out;
}

BoxDelta encode_delta(const BBox& anchor, const BBox& gt) {
  if (!(anchor.area() > 0) || !(gt.area() > 0)) throw std::invalid_argument("degenerate box");
  const double aw = anchor.width(), ah = anchor.height();
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
          std::log(gt.width() / aw), std::log(gt.height() / ah)};
}

BBox decode_delta(const BBox& anchor, const BoxDelta& d) {
  if (!(anchor.area() > 0)) throw std::invalid_argument("degenerate box");
  if (!std::isfinite(d.tx) || !std::isfinite(d.ty) || !std::isfinite(d.tw) ||
      !std::isfinite(d.th))
    throw std::invalid_argument("non-finite box delta");
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.cx() + d.tx * aw, cy = anchor.cy() + d.ty * ah;
  const double w = aw * std::exp(d.tw), h = ah * std::exp(d.th);
  return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2);
}

AnchorLabels label_anchors(std::span<const BBox> anchors, std::span<const BBox> gts,
                           double pos_thr, double neg_thr) {
  if (!(0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1))
    throw std::invalid_argument("label_anchors requires 0 <= neg_thr <= pos_thr <= 1");
  AnchorLabels out;
  out.labels.assign(anchors.size(), AnchorLabel::kNegative);
  out.matched_gt.assign(anchors.size(), -1);
  out.max_iou.assign(anchors.size(), 0.0);
  if (gts.empty()) return out;

  std::vector<double> best_for_gt(gts.size(), -1.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double iou = iou_rect(anchors[a], gts[g]);
      if (out.matched_gt[a] < 0 || iou > out.max_iou[a]) {
        out.max_iou[a] = iou;
        out.matched_gt[a] = static_cast<int>(g);
      }
      best_for_gt[g] = std::max(best_for_gt[g], iou);
    }
    const double m = out.max_iou[a];
    out.labels[a] = m >= pos_thr  ? AnchorLabel::kPositive
                    : m < neg_thr ? AnchorLabel::kNegative
                                  : AnchorLabel::kIgnore;
  }
  // Every gt keeps its best anchor(s) as positives, even below pos_thr.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!(best_for_gt[g] > 0)) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (iou_rect(anchors[a], gts[g]) == best_for_gt[g]) {
        out.labels[a] = AnchorLabel::kPositive;
        out.matched_gt[a] = static_cast<int>(g);
        out.max_iou[a] = std::max(out.max_iou[a], best_for_gt[g]);
      }
    }
  }
  return out;
}

std::vector<ScoredRegion> select_proposals(std::span<const ScoredRegion> scored,
                                           std::size_t pre_nms_k, double nms_thr,
                                           std::size_t post_nms_k) {
  if (post_nms_k < 1 || pre_nms_k < post_nms_k)
    throw std::invalid_argument("select_proposals requires pre_nms_k >= post_nms_k >= 1");
  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return scored[i].score > scored[j].score;
  });
  if (order.size() > pre_nms_k) order.resize(pre_nms_k);
  std::vector<ScoredRegion> top;
  top.reserve(order.size());
  for (std::size_t i : order) top.push_back(scored[i]);
  std::vector<ScoredRegion> out;
  for (std::size_t k : nms(top, nms_thr)) {
    if (out.size() >= post_nms_k) break;
    out.push_back(top[k]);
  }
  return out;
}

}  // namespace fdet
