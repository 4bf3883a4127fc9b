#include "fdet/featconcat.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fdet {

void ConcatConfig::validate() const {
  if (taps.empty()) throw std::invalid_argument("concat config needs at least one tap");
  if (pooled < 1) throw std::invalid_argument("concat pooled size must be >= 1");
  if (!(target_norm > 0)) throw std::invalid_argument("concat target_norm must be positive");
  if (out_channels < 1) throw std::invalid_argument("concat out_channels must be >= 1");
}

namespace {

struct Bin {
  int start, end;
};

// Bin edges along one axis, rounded outward and clamped to [0, size).
std::vector<Bin> bin_edges(double lo, double hi, int size, int out) {
  std::vector<Bin> bins(out);
  const double step = (hi - lo) / out;
  for (int b = 0; b < out; ++b) {
    int s = static_cast<int>(std::floor(lo + b * step));
    int e = static_cast<int>(std::ceil(lo + (b + 1) * step));
    s = std::clamp(s, 0, size - 1);
    e = std::clamp(e, s + 1, size);
    bins[b] = {s, e};
  }
  return bins;
}

}  // namespace

RoiPoolResult roi_pool(const Tensor& fmap, int stride, const BBox& roi, int out) {
  if (fmap.rank() != 4 || fmap.n() != 1)
    throw std::invalid_argument("roi_pool expects a (1, C, H, W) map, got " +
                                shape_string(fmap.shape()));
  if (out < 1 || stride < 1) throw std::invalid_argument("roi_pool: bad out size or stride");
  const int C = fmap.c(), H = fmap.h(), W = fmap.w();
  const double x1 = roi.x1 / stride, y1 = roi.y1 / stride;
  const double x2 = roi.x2 / stride, y2 = roi.y2 / stride;
  if (x2 <= 0 || y2 <= 0 || x1 >= W || y1 >= H) throw std::invalid_argument("empty roi");
  const auto xb = bin_edges(std::max(x1, 0.0), std::min(x2, static_cast<double>(W)), W, out);
  const auto yb = bin_edges(std::max(y1, 0.0), std::min(y2, static_cast<double>(H)), H, out);

  RoiPoolResult r{Tensor({1, C, out, out}), std::vector<std::int32_t>(static_cast<std::size_t>(C) * out * out)};
  for (int c = 0; c < C; ++c) {
    const double* plane = fmap.data().data() + static_cast<std::size_t>(c) * H * W;
    for (int by = 0; by < out; ++by)
      for (int bx = 0; bx < out; ++bx) {
        int best = -1;
        double best_v = 0;
        for (int y = yb[by].start; y < yb[by].end; ++y)
          for (int x = xb[bx].start; x < xb[bx].end; ++x) {
            const int idx = y * W + x;
            if (best < 0 || plane[idx] > best_v) {
              best = idx;
              best_v = plane[idx];
            }
          }
        const std::size_t o = (static_cast<std::size_t>(c) * out + by) * out + bx;
        r.pooled[o] = best_v;
        r.argmax[o] = best;
      }
  }
  return r;
}

void roi_pool_backward(const RoiPoolResult& r, const Tensor& dy, Tensor& dfmap) {
  const int C = r.pooled.c(), P = r.pooled.h();
  const std::size_t plane = static_cast<std::size_t>(dfmap.h()) * dfmap.w();
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < P * P; ++i) {
      const std::size_t o = static_cast<std::size_t>(c) * P * P + i;
      dfmap[c * plane + r.argmax[o]] += dy[o];
    }
}

Tensor l2_normalize(const Tensor& x) {
  const double norm = x.frobenius_norm();
  if (!(norm > 1e-12)) throw UnnormalizableBlob("unnormalizable blob");
  Tensor y = x;
  y *= 1.0 / norm;
  return y;
}

Tensor l2_normalize_backward(const Tensor& x, const Tensor& dy) {
  const double norm = x.frobenius_norm();
  double dot = 0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * dy[i];
  Tensor dx(x.shape());
  const double inv = 1.0 / norm, k = dot / (norm * norm * norm);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * inv - x[i] * k;
  return dx;
}

namespace {

Tensor concat_channels(std::span<const Tensor> blobs) {
  if (blobs.empty()) throw std::invalid_argument("concat_rescale: no blobs");
  const int P = blobs[0].h(), Q = blobs[0].w();
  int C = 0;
  for (const auto& b : blobs) {
    if (b.rank() != 4 || b.n() != 1 || b.h() != P || b.w() != Q)
      throw std::invalid_argument("concat_rescale: spatial mismatch " +
                                  shape_string(blobs[0].shape()) + " vs " +
                                  shape_string(b.shape()));
    C += b.c();
  }
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(C) * P * Q);
  for (const auto& b : blobs) data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor({1, C, P, Q}, std::move(data));
}

}  // namespace

Tensor concat_rescale(std::span<const Tensor> blobs, double target_norm) {
  Tensor z = concat_channels(blobs);
  const double norm = z.frobenius_norm();
  if (!(norm > 0)) throw UnnormalizableBlob("unnormalizable blob");
  z *= target_norm / norm;
  return z;
}

std::vector<Tensor> concat_rescale_backward(std::span<const Tensor> blobs, double target_norm,
                                            const Tensor& dy) {
  const Tensor z = concat_channels(blobs);
  Tensor dz = l2_normalize_backward(z, dy);
  dz *= target_norm;
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const auto& b : blobs) {
    std::vector<double> d(dz.data().begin() + static_cast<std::ptrdiff_t>(off),
                          dz.data().begin() + static_cast<std::ptrdiff_t>(off + b.size()));
    out.emplace_back(b.shape(), std::move(d));
    off += b.size();
  }
  return out;
}

Tensor reduce_1x1(const Tensor& blob, const Tensor& weights) {
  if (weights.rank() != 4 || weights.h() != 1 || weights.w() != 1 || blob.rank() != 4 ||
      weights.c() != blob.c())
    throw std::invalid_argument("reduce_1x1: channel mismatch between blob " +
                                shape_string(blob.shape()) + " and weights " +
                                shape_string(weights.shape()));
  Conv2d conv("reduce", weights.c(), weights.n(), 1, 1, 0);
  conv.weight().value = weights;
  return conv.forward(blob);
}

FeatureConcat::FeatureConcat(const ConcatConfig& cfg, std::vector<int> tap_channels,
                             std::mt19937_64& rng)
    : cfg_(cfg), tap_channels_(std::move(tap_channels)) {
  cfg_.validate();
  for (int t : cfg_.taps) {
    if (t < 0 || t >= static_cast<int>(tap_channels_.size()))
      throw std::invalid_argument("concat tap " + std::to_string(t) + " not exposed by backbone");
    concat_channels_ += tap_channels_[t];
  }
  reduce_ = Conv2d("concat.reduce", concat_channels_, cfg_.out_channels, 1, 1, 0);
  const double elems = static_cast<double>(concat_channels_) * cfg_.pooled * cfg_.pooled;
  const double s = cfg_.target_norm / std::sqrt(elems);
  he_uniform(reduce_.weight().value, concat_channels_, rng, 1.0 / s);
  reduce_.weight().lr_mult = 1.0 / (s * s);
}

Tensor FeatureConcat::forward(std::span<const FeatureMap> taps, std::span<const BBox> rois,
                              std::vector<std::size_t>* dropped) {
  tap_shapes_.clear();
  for (const auto& t : taps) tap_shapes_.push_back(t.map.shape());
  cache_.clear();
  blob_norms_.clear();
  const int P = cfg_.pooled;
  std::vector<double> concat_data;
  int kept = 0;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    Cache c;
    try {
      for (int t : cfg_.taps) {
        const auto& fm = taps[static_cast<std::size_t>(t)];
        c.pooled.push_back(roi_pool(fm.map, fm.stride, rois[r], P));
        c.normalized.push_back(l2_normalize(c.pooled.back().pooled));
      }
    } catch (const UnnormalizableBlob&) {
      if (!dropped) throw;
      dropped->push_back(r);
      continue;
    }
    Tensor blob = concat_rescale(c.normalized, cfg_.target_norm);
    blob_norms_.push_back(blob.frobenius_norm());
    concat_data.insert(concat_data.end(), blob.data().begin(), blob.data().end());
    cache_.push_back(std::move(c));
    ++kept;
  }
  if (kept == 0) return Tensor({0, cfg_.out_channels, P, P});
  Tensor concat({kept, concat_channels_, P, P}, std::move(concat_data));
  return reduce_.forward(concat);
}

std::vector<Tensor> FeatureConcat::backward(const Tensor& dy) {
  std::vector<Tensor> grads(tap_shapes_.size());
  for (int t : cfg_.taps) grads[static_cast<std::size_t>(t)] = Tensor(tap_shapes_[static_cast<std::size_t>(t)]);
  if (cache_.empty()) return grads;
  const Tensor dconcat = reduce_.backward(dy);
  const int P = cfg_.pooled;
  const std::size_t per_roi = static_cast<std::size_t>(concat_channels_) * P * P;
  for (std::size_t r = 0; r < cache_.size(); ++r) {
    const auto& c = cache_[r];
    std::vector<double> d(dconcat.data().begin() + static_cast<std::ptrdiff_t>(r * per_roi),
                          dconcat.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * per_roi));
    const Tensor dblob({1, concat_channels_, P, P}, std::move(d));
    const auto dnorm = concat_rescale_backward(c.normalized, cfg_.target_norm, dblob);
    for (std::size_t k = 0; k < cfg_.taps.size(); ++k) {
      const Tensor dpool = l2_normalize_backward(c.pooled[k].pooled, dnorm[k]);
      roi_pool_backward(c.pooled[k], dpool, grads[static_cast<std::size_t>(cfg_.taps[k])]);
    }
  }
  return grads;
}

Tensor concat_features(std::span<const FeatureMap> taps, const BBox& roi, FeatureConcat& layer) {
  const BBox one[] = {roi};
  Tensor out = layer.forward(taps, one);
  return out.reshaped({1, out.c(), out.h(), out.w()});
}

Tensor RoiPoolLayer::forward(std::span<const FeatureMap> taps, std::span<const BBox> rois) {
  const auto& fm = taps[static_cast<std::size_t>(tap_)];
  n_taps_ = taps.size();
  tap_shape_ = fm.map.shape();
  cache_.clear();
  const int C = fm.map.c();
  Tensor out({static_cast<int>(rois.size()), C, pooled_, pooled_});
  const std::size_t per = static_cast<std::size_t>(C) * pooled_ * pooled_;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    cache_.push_back(roi_pool(fm.map, fm.stride, rois[r], pooled_));
    std::copy(cache_.back().pooled.data().begin(), cache_.back().pooled.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(r * per));
  }
  return out;
}

std::vector<Tensor> RoiPoolLayer::backward(const Tensor& dy) {
  std::vector<Tensor> grads(n_taps_);
  grads[static_cast<std::size_t>(tap_)] = Tensor(tap_shape_);
  const std::size_t per = cache_.empty() ? 0 : cache_[0].pooled.size();
  for (std::size_t r = 0; r < cache_.size(); ++r) {
    std::vector<double> d(dy.data().begin() + static_cast<std::ptrdiff_t>(r * per),
                          dy.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
    roi_pool_backward(cache_[r], Tensor(cache_[r].pooled.shape(), std::move(d)),
                      grads[static_cast<std::size_t>(tap_)]);
  }
  return grads;
}

}  // namespace fdet
