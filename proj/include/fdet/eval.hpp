#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fdet/data.hpp"
#include "fdet/geometry.hpp"

namespace fdet {

/// Maximum-weight one-to-one assignment. `weights` is rows x cols; entries
/// below `min_weight` are forbidden. Returns the column assigned to each row
/// or -1.
std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weights,
                                       double min_weight);

struct MatchPair {
  std::size_t det = 0;
  std::size_t gt = 0;
  double iou = 0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<std::size_t> unmatched_dets;
  std::vector<std::size_t> unmatched_gts;

  double total_iou() const;
};

struct EvalOptions {
  double min_iou = 1e-6;
  int resolution = 256;  // raster_iou grid for non-rectangle pairs
  /// Matched IoUs at or below this are left out of the continuous score.
  /// 0 counts every match.
  double continuous_floor = 0.0;
};

/// IoU matrix (dets x gts) in native shapes.
std::vector<std::vector<double>> iou_matrix(std::span<const ScoredRegion> dets,
                                            std::span<const Annotation> gts, int resolution);

/// Hungarian matching maximizing total IoU; pairs below min_iou are never
/// matched.
MatchResult match_detections(std::span<const ScoredRegion> dets, std::span<const Annotation> gts,
                             const EvalOptions& opts = {});

struct RocPoint {
  double threshold = 0;
  double false_positives = 0;
  double y = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;
};

/// Both FDDB curves over one sweep; they share thresholds and x values.
struct RocPair {
  RocCurve discrete;
  RocCurve continuous;
  std::size_t total_faces = 0;
  std::size_t images = 0;
};

struct ImageEval {
  std::string id;
  std::vector<ScoredRegion> dets;
  std::vector<Annotation> gts;
};

/// Sweeps the threshold over the distinct detection scores, high to low.
/// At each threshold x is the number of unmatched detections across the
/// corpus under the max-total-IoU matching. The discrete y is the largest
/// number of one-to-one pairs with IoU > 0.5 divided by the face count; the
/// continuous y is the matched IoU sum divided by the face count.
/// Throws std::invalid_argument when the corpus has no faces.
RocPair compute_roc(std::span<const ImageEval> images, const EvalOptions& opts = {});
RocCurve discrete_roc(std::span<const ImageEval> images, const EvalOptions& opts = {});
RocCurve continuous_roc(std::span<const ImageEval> images, const EvalOptions& opts = {});

/// y at the largest x not exceeding `max_fp` (0 when no point qualifies).
double y_at_false_positives(const RocCurve& c, double max_fp);

/// Axis-aligned ellipse centred on the box with semi-axes (k w/2, k h/2).
/// k maximizes rasterized IoU with the box; by affine invariance it is the
/// same for every box, so it is found once by golden-section search on the
/// unit square over [0.8, 1.6].
EllipseRegion box_to_ellipse(const BBox& b);
/// The shared factor k (cached after the first call).
double ellipse_fit_factor();
/// Golden-section search at a given raster resolution (uncached).
double fit_ellipse_factor(int resolution, double tol = 1e-4);

struct FoldReport {
  RocPair pooled;
  std::vector<RocPair> per_fold;
};

/// Pools every fold's images into one corpus curve and keeps per-fold curves.
/// Throws std::invalid_argument on an empty list or when `expected_folds`
/// is given and differs from the number of folds.
FoldReport aggregate_folds(std::span<const std::vector<ImageEval>> folds,
                           std::optional<std::size_t> expected_folds = std::nullopt,
                           const EvalOptions& opts = {});

/// Writes <stem>.csv (threshold,false_positives,y_discrete,y_continuous) and
/// <stem>.svg into `dir`.
void emit_report(const RocPair& curves, const std::filesystem::path& dir,
                 const std::string& stem = "roc");
std::string roc_csv(const RocPair& curves);
/// Multiple labelled curves in one plot (used for ablation comparisons).
std::string roc_svg(std::span<const std::pair<std::string, RocPair>> curves);

enum class DetectionMode { kRect, kEllipse };

/// FDDB-style detection listing: image name line, count line, then per
/// detection "x y w h score" (rect) or "major minor angle cx cy score".
std::vector<std::pair<std::string, std::vector<ScoredRegion>>> parse_detections(
    std::string_view text, DetectionMode mode);
std::string serialize_detections(
    std::span<const std::pair<std::string, std::vector<ScoredRegion>>> dets, DetectionMode mode);

}  // namespace fdet
