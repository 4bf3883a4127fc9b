#include "fdet/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fdet/kernels.hpp"

namespace fdet {

void ScalePolicy::validate() const {
  if (targets.empty()) throw std::invalid_argument("scale policy needs at least one target");
  for (double t : targets)
    if (!(t > 0)) throw std::invalid_argument("scale targets must be positive");
  if (cap < *std::max_element(targets.begin(), targets.end()))
    throw std::invalid_argument("scale cap must be >= every target");
}

double scale_for_target(double width, double height, double target, double cap) {
  if (!(width > 0) || !(height > 0)) throw std::invalid_argument("image dims must be positive");
  double f = target / std::min(width, height);
  if (f * std::max(width, height) > cap) f = cap / std::max(width, height);
  return f;
}

double choose_scale(double width, double height, const ScalePolicy& policy, std::mt19937_64& rng) {
  policy.validate();
  std::uniform_int_distribution<std::size_t> pick(0, policy.targets.size() - 1);
  return scale_for_target(width, height, policy.targets[pick(rng)], policy.cap);
}

Tensor resize_image(const Tensor& image, double factor) {
  if (!(factor > 0)) throw std::invalid_argument("resize factor must be positive");
  if (image.rank() != 4) throw std::invalid_argument("resize_image expects (N, C, H, W)");
  const int oh = std::max(1, static_cast<int>(std::lround(image.h() * factor)));
  const int ow = std::max(1, static_cast<int>(std::lround(image.w() * factor)));
  if (oh == image.h() && ow == image.w()) return image;
  Tensor out({image.n(), image.c(), oh, ow});
  kernels::parallel::resize_bilinear(image.n() * image.c(), image.h(), image.w(), oh, ow,
                                     image.span(), out.span());
  return out;
}

ImageRecord scale_record(const ImageRecord& record, double factor) {
  ImageRecord out = record;
  out.width = static_cast<int>(std::lround(record.width * factor));
  out.height = static_cast<int>(std::lround(record.height * factor));
  for (auto& a : out.annotations) {
    if (auto* b = std::get_if<BBox>(&a.region)) {
      *b = BBox(b->x1 * factor, b->y1 * factor, b->x2 * factor, b->y2 * factor);
    } else {
      auto& e = std::get<EllipseRegion>(a.region);
      e = EllipseRegion(e.cx * factor, e.cy * factor, e.major_r * factor, e.minor_r * factor, e.angle);
    }
  }
  return out;
}

std::pair<Tensor, ImageRecord> hflip(const Tensor& image, const ImageRecord& record) {
  if (image.rank() != 4 || (record.width && record.width != image.w()) ||
      (record.height && record.height != image.h()))
    throw std::invalid_argument("hflip: record dims do not match image " +
                                shape_string(image.shape()));
  const int W = image.w();
  Tensor out(image.shape());
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < W; ++x) out.at(n, c, y, x) = image.at(n, c, y, W - 1 - x);
  ImageRecord rec = record;
  for (auto& a : rec.annotations) {
    if (auto* b = std::get_if<BBox>(&a.region)) {
      *b = BBox(W - b->x2, b->y1, W - b->x1, b->y2);
    } else {
      auto& e = std::get<EllipseRegion>(a.region);
      e = EllipseRegion(W - e.cx, e.cy, e.major_r, e.minor_r, -e.angle);
    }
  }
  return {std::move(out), std::move(rec)};
}

}  // namespace fdet
