#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fdet/anchors.hpp"
#include "fdet/geometry.hpp"

namespace fdet {

enum class RoiLabel { kBackground = 0, kForeground = 1 };

struct RoiSample {
  BBox roi;
  RoiLabel label = RoiLabel::kBackground;
  int gt_index = -1;              // foreground only
  std::optional<BoxDelta> target;  // foreground only
  bool is_hard = false;
  double max_iou = 0;
};

struct SampleBatch {
  std::vector<RoiSample> samples;
  std::size_t foreground = 0;
  std::size_t background = 0;
  std::size_t hard = 0;
  /// foreground / (foreground + background); 0 for an empty batch.
  double achieved_fg_fraction = 0;
  /// Set when the requested fg:bg ratio could not be met.
  bool ratio_violated = false;
  /// Hard negatives that did not fit into the background slots.
  std::size_t hard_overflow = 0;
};

/// Labels proposals by max IoU against `gts` (> fg_iou is foreground), then
/// draws up to round(batch * fg_fraction) foregrounds and fills the rest with
/// backgrounds; a short pool is topped up from the other one.
SampleBatch sample_rois(std::span<const BBox> proposals, std::span<const BBox> gts,
                        double fg_iou, std::size_t batch, double fg_fraction,
                        std::mt19937_64& rng);

struct HardNegative {
  BBox roi;
  double score = 0;
  std::string image_id;
};

/// Detections scoring above `score_thr` whose max IoU over all gts is below
/// `iou_thr`. Detections must be rectangles.
std::vector<HardNegative> mine_hard_negatives(std::span<const ScoredRegion> dets,
                                              std::span<const BBox> gts, double score_thr,
                                              double iou_thr, const std::string& image_id = {});

/// Puts every hard negative (hardest first, up to the background slot count)
/// into the batch as a background flagged is_hard, evicting ordinary
/// backgrounds uniformly at random so the batch size and fg count stay put.
SampleBatch inject_hard_negatives(const SampleBatch& batch, std::span<const HardNegative> hards,
                                  std::size_t batch_size, std::mt19937_64& rng);

/// JSON-lines store, one {"image_id","box":[x1,y1,x2,y2],"score"} per line.
class HardNegativeStore {
 public:
  void add(const HardNegative& h) { by_image_[h.image_id].push_back(h); }
  std::span<const HardNegative> for_image(const std::string& id) const;
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  const std::map<std::string, std::vector<HardNegative>>& all() const { return by_image_; }

  /// Appends every held record to `path` (creating it if missing).
  void append_to(const std::filesystem::path& path) const;
  static HardNegativeStore load(const std::filesystem::path& path);

 private:
  std::map<std::string, std::vector<HardNegative>> by_image_;
};

}  // namespace fdet
