#pragma once

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

namespace fdet {

/// Axis-aligned rectangle in continuous pixel coordinates.
/// Area is (x2 - x1) * (y2 - y1); there is no "+1" pixel convention.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  BBox() = default;
  /// Throws std::invalid_argument when x2 < x1 or y2 < y1.
  BBox(double x1, double y1, double x2, double y2);

  static BBox from_xywh(double x, double y, double w, double h) {
    return BBox(x, y, x + w, y + h);
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool contains(double x, double y) const {
    return x >= x1 && x <= x2 && y >= y1 && y <= y2;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Rotated ellipse; `angle` is the rotation of the major axis from +x.
struct EllipseRegion {
  double cx = 0, cy = 0;
  double major_r = 1, minor_r = 1;
  double angle = 0;

  EllipseRegion() = default;
  /// Swaps the radii if needed (rotating by pi/2) and normalizes the angle to
  /// [-pi/2, pi/2). Throws std::invalid_argument on non-positive radii.
  EllipseRegion(double cx, double cy, double r1, double r2, double angle);

  double area() const;
  bool contains(double x, double y) const;
  BBox bounding_box() const;

  friend bool operator==(const EllipseRegion&, const EllipseRegion&) = default;
};

/// Wraps any angle into [-pi/2, pi/2); an ellipse is symmetric under a pi turn.
double normalize_ellipse_angle(double angle);

using Region = std::variant<BBox, EllipseRegion>;

BBox bounding_box(const Region& r);
bool region_contains(const Region& r, double x, double y);

struct ScoredRegion {
  Region region;
  double score = 0;
};

/// Exact IoU of two rectangles; 0 when the union is empty.
double iou_rect(const BBox& a, const BBox& b);

/// Grid-rasterized IoU over the joint bounding box of both regions (plus a
/// small margin), `resolution` cells per axis sampled at cell centers.
/// Throws std::invalid_argument when resolution < 64.
double raster_iou(const Region& a, const Region& b, int resolution);

/// IoU in native shapes: exact for rectangle pairs, rasterized otherwise.
double region_iou(const Region& a, const Region& b, int resolution);

/// Greedy NMS. Visits boxes by descending score (ties: lower index first) and
/// drops any box whose IoU with an already kept box exceeds `threshold`.
/// Returns kept indices in visiting order.
std::vector<std::size_t> nms(std::span<const BBox> boxes,
                             std::span<const double> scores, double threshold);

/// Convenience overload over scored rectangles. Throws if any region is an
/// ellipse.
std::vector<std::size_t> nms(std::span<const ScoredRegion> dets,
                             double threshold);

BBox clip_box(const BBox& b, double width, double height);

}  // namespace fdet
