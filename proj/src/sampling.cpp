#include "fdet/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include "json.hpp"
#include <numeric>
#include <stdexcept>

namespace fdet {
namespace {

// Uniform sample of k indices from `pool` without replacement, in draw order.
std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t k, std::mt19937_64& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

void finish_counts(SampleBatch& b) {
  b.foreground = b.background = b.hard = 0;
  for (const auto& s : b.samples) {
    if (s.label == RoiLabel::kForeground)
      ++b.foreground;
    else
      ++b.background;
    b.hard += s.is_hard;
  }
  const std::size_t n = b.samples.size();
  b.achieved_fg_fraction = n ? static_cast<double>(b.foreground) / static_cast<double>(n) : 0.0;
}

}  // namespace

SampleBatch sample_rois(std::span<const BBox> proposals, std::span<const BBox> gts, double fg_iou,
                        std::size_t batch, double fg_fraction, std::mt19937_64& rng) {
  if (batch < 4) throw std::invalid_argument("sample_rois: batch must be >= 4");
  if (!(fg_fraction >= 0 && fg_fraction <= 1))
    throw std::invalid_argument("sample_rois: fg_fraction must lie in [0, 1]");
  SampleBatch out;
  if (proposals.empty()) return out;

  std::vector<double> max_iou(proposals.size(), 0.0);
  std::vector<int> argmax(proposals.size(), -1);
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double iou = iou_rect(proposals[i], gts[g]);
      if (argmax[i] < 0 || iou > max_iou[i]) {
        max_iou[i] = iou;
        argmax[i] = static_cast<int>(g);
      }
    }
    (max_iou[i] > fg_iou ? fg : bg).push_back(i);
  }

  const auto fg_quota = static_cast<std::size_t>(std::lround(static_cast<double>(batch) * fg_fraction));
  std::size_t n_fg = std::min(fg_quota, fg.size());
  std::size_t n_bg = std::min(batch - n_fg, bg.size());
  if (n_fg + n_bg < batch) n_fg = std::min(fg.size(), batch - n_bg);  // top up from fg
  out.ratio_violated = n_fg != fg_quota || n_bg != batch - fg_quota;

  for (std::size_t i : draw(fg, n_fg, rng)) {
    RoiSample s;
    s.roi = proposals[i];
    s.label = RoiLabel::kForeground;
    s.gt_index = argmax[i];
    s.max_iou = max_iou[i];
    if (proposals[i].area() > 0) s.target = encode_delta(proposals[i], gts[static_cast<std::size_t>(argmax[i])]);
    out.samples.push_back(s);
  }
  for (std::size_t i : draw(bg, n_bg, rng)) {
    RoiSample s;
    s.roi = proposals[i];
    s.max_iou = max_iou[i];
    out.samples.push_back(s);
  }
  finish_counts(out);
  return out;
}

std::vector<HardNegative> mine_hard_negatives(std::span<const ScoredRegion> dets,
                                              std::span<const BBox> gts, double score_thr,
                                              double iou_thr, const std::string& image_id) {
  if (!(score_thr >= 0 && score_thr <= 1 && iou_thr >= 0 && iou_thr <= 1))
    throw std::invalid_argument("mine_hard_negatives: thresholds must lie in [0, 1]");
  std::vector<HardNegative> out;
  for (const auto& d : dets) {
    if (!(d.score > score_thr)) continue;
    const auto* box = std::get_if<BBox>(&d.region);
    if (!box) throw std::invalid_argument("mine_hard_negatives expects rectangular detections");
    double best = 0;
    for (const auto& g : gts) best = std::max(best, iou_rect(*box, g));
    if (best < iou_thr) out.push_back({*box, d.score, image_id});
  }
  return out;
}

SampleBatch inject_hard_negatives(const SampleBatch& batch, std::span<const HardNegative> hards,
                                  std::size_t batch_size, std::mt19937_64& rng) {
  if (hards.empty()) return batch;
  SampleBatch out;
  std::vector<std::size_t> ordinary;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    if (batch.samples[i].label == RoiLabel::kForeground)
      out.samples.push_back(batch.samples[i]);
    else
      ordinary.push_back(i);
  }
  const std::size_t fg = out.samples.size();
  const std::size_t slots = batch_size > fg ? batch_size - fg : 0;

  std::vector<std::size_t> order(hards.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hards[a].score > hards[b].score; });
  const std::size_t n_hard = std::min(slots, order.size());
  for (std::size_t k = 0; k < n_hard; ++k) {
    RoiSample s;
    s.roi = hards[order[k]].roi;
    s.is_hard = true;
    out.samples.push_back(s);
  }
  const std::size_t keep = std::min(ordinary.size(), slots - n_hard);
  auto kept = draw(ordinary, keep, rng);
  std::sort(kept.begin(), kept.end());
  for (std::size_t i : kept) out.samples.push_back(batch.samples[i]);

  finish_counts(out);
  out.hard_overflow = order.size() - n_hard;
  out.ratio_violated = batch.ratio_violated || out.hard_overflow > 0;
  return out;
}

std::span<const HardNegative> HardNegativeStore::for_image(const std::string& id) const {
  auto it = by_image_.find(id);
  if (it == by_image_.end()) return {};
  return it->second;
}

std::size_t HardNegativeStore::size() const {
  std::size_t n = 0;
  for (const auto& [id, v] : by_image_) n += v.size();
  return n;
}

void HardNegativeStore::append_to(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot open hard-negative store " + path.string());
  for (const auto& [id, v] : by_image_)
    for (const auto& h : v) {
      nlohmann::json j{{"image_id", h.image_id},
                       {"box", {h.roi.x1, h.roi.y1, h.roi.x2, h.roi.y2}},
                       {"score", h.score}};
      os << j.dump() << "\n";
    }
}

HardNegativeStore HardNegativeStore::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open hard-negative store " + path.string());
  HardNegativeStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto& b = j.at("box");
      store.add({BBox(b.at(0), b.at(1), b.at(2), b.at(3)), j.at("score").get<double>(),
                 j.at("image_id").get<std::string>()});
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

}  // namespace fdet
