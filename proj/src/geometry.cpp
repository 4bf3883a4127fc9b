#include "fdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fdet/kernels.hpp"

namespace fdet {

BBox::BBox(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
  if (!(x2 >= x1) || !(y2 >= y1))
    throw std::invalid_argument("box has negative extent: (" + std::to_string(x1) + ", " +
                                std::to_string(y1) + ", " + std::to_string(x2) + ", " +
                                std::to_string(y2) + ")");
}

double normalize_ellipse_angle(double angle) {
  constexpr double pi = std::numbers::pi;
  double a = std::fmod(angle + pi / 2, pi);
  if (a < 0) a += pi;
  a -= pi / 2;
  if (a >= pi / 2) a -= pi;  // fmod rounding at the upper edge
  return a;
}

EllipseRegion::EllipseRegion(double cx_, double cy_, double r1, double r2, double angle_)
    : cx(cx_), cy(cy_), major_r(r1), minor_r(r2), angle(angle_) {
  if (!(r1 > 0) || !(r2 > 0))
    throw std::invalid_argument("ellipse radii must be positive");
  if (minor_r > major_r) {
    std::swap(major_r, minor_r);
    angle += std::numbers::pi / 2;
  }
  angle = normalize_ellipse_angle(angle);
}

double EllipseRegion::area() const { return std::numbers::pi * major_r * minor_r; }

bool EllipseRegion::contains(double x, double y) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double dx = x - cx, dy = y - cy;
  const double u = (dx * c + dy * s) / major_r;
  const double v = (-dx * s + dy * c) / minor_r;
  return u * u + v * v <= 1.0;
}

BBox EllipseRegion::bounding_box() const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double hw = std::sqrt(major_r * major_r * c * c + minor_r * minor_r * s * s);
  const double hh = std::sqrt(major_r * major_r * s * s + minor_r * minor_r * c * c);
  return BBox(cx - hw, cy - hh, cx + hw, cy + hh);
}

BBox bounding_box(const Region& r) {
  return std::visit(
      [](const auto& shape) -> BBox {
        if constexpr (std::is_same_v<std::decay_t<decltype(shape)>, BBox>)
          return shape;
        else
          return shape.bounding_box();
      },
      r);
}

bool region_contains(const Region& r, double x, double y) {
  return std::visit([&](const auto& shape) { return shape.contains(x, y); }, r);
}

double iou_rect(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double raster_iou(const Region& a, const Region& b, int resolution) {
  if (resolution < 64)
    throw std::invalid_argument("raster_iou resolution must be >= 64, got " +
                                std::to_string(resolution));
  const BBox ba = bounding_box(a), bb = bounding_box(b);
  double x1 = std::min(ba.x1, bb.x1), y1 = std::min(ba.y1, bb.y1);
  double x2 = std::max(ba.x2, bb.x2), y2 = std::max(ba.y2, bb.y2);
  const double mx = 0.01 * (x2 - x1) + 1e-9, my = 0.01 * (y2 - y1) + 1e-9;
  const BBox frame(x1 - mx, y1 - my, x2 + mx, y2 + my);
  const auto c = kernels::parallel::raster_counts(a, b, frame, resolution);
  return c.in_either > 0 ? static_cast<double>(c.in_both) / static_cast<double>(c.in_either) : 0.0;
}

double region_iou(const Region& a, const Region& b, int resolution) {
  if (std::holds_alternative<BBox>(a) && std::holds_alternative<BBox>(b))
    return iou_rect(std::get<BBox>(a), std::get<BBox>(b));
  // Disjoint bounding boxes cannot overlap.
  if (iou_rect(bounding_box(a), bounding_box(b)) <= 0) return 0.0;
  return raster_iou(a, b, resolution);
}

std::vector<std::size_t> nms(std::span<const BBox> boxes, std::span<const double> scores,
                             double threshold) {
  if (boxes.size() != scores.size())
    throw std::invalid_argument("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });
  std::vector<std::size_t> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou_rect(boxes[i], boxes[j]) > threshold) suppressed[j] = 1;
    }
  }
  return kept;
}

std::vector<std::size_t> nms(std::span<const ScoredRegion> dets, double threshold) {
  std::vector<BBox> boxes;
  std::vector<double> scores;
  boxes.reserve(dets.size());
  scores.reserve(dets.size());
  for (const auto& d : dets) {
    const auto* b = std::get_if<BBox>(&d.region);
    if (!b) throw std::invalid_argument("nms expects rectangular detections");
    boxes.push_back(*b);
    scores.push_back(d.score);
  }
  return nms(boxes, scores, threshold);
}

BBox clip_box(const BBox& b, double width, double height) {
  return BBox(std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
              std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height));
}

}  // namespace fdet
