#include <cmath>
#include <random>

#include "doctest.h"
#include "fdet/featconcat.hpp"

using namespace fdet;

namespace {

Tensor random_map(int c, int h, int w, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t({1, c, h, w});
  std::uniform_real_distribution<double> u(0, scale);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

std::vector<FeatureMap> three_taps(std::mt19937_64& rng) {
  // magnitudes differ by orders of magnitude, like conv3/conv4/conv5
  return {{random_map(4, 32, 32, rng, 100.0), 4}, {random_map(6, 16, 16, rng, 1.0), 8},
          {random_map(8, 8, 8, rng, 0.01), 16}};
}

}  // namespace

TEST_CASE("roi pool by hand") {
  Tensor m({1, 1, 4, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  const auto r = roi_pool(m, 1, BBox(0, 0, 4, 4), 2);
  CHECK(r.pooled.data() == std::vector<double>{6, 8, 14, 16});
  CHECK(r.argmax == std::vector<std::int32_t>{5, 7, 13, 15});
  // stride maps image coordinates onto the grid
  const auto s = roi_pool(m, 4, BBox(0, 0, 8, 8), 1);
  CHECK(s.pooled[0] == 6);
  CHECK_THROWS_AS(roi_pool(m, 1, BBox(10, 10, 12, 12), 2), std::invalid_argument);
  Tensor dm({1, 1, 4, 4});
  roi_pool_backward(r, Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), dm);
  CHECK(dm[5] == 1);
  CHECK(dm[15] == 4);
  CHECK(dm[0] == 0);
}

TEST_CASE("roi pool never leaves a bin empty") {
  std::mt19937_64 rng(1);
  const Tensor m = random_map(2, 9, 9, rng);
  for (const BBox b : {BBox(0, 0, 1, 1), BBox(3.2, 3.3, 3.4, 3.5), BBox(-5, -5, 100, 2), BBox(8.5, 8.5, 9, 9)}) {
    const auto r = roi_pool(m, 1, b, 7);
    for (auto a : r.argmax) {
      CHECK(a >= 0);
      CHECK(a < 81);
    }
  }
}

TEST_CASE("l2 normalize and dead blobs") {
  const Tensor x({1, 1, 1, 2}, std::vector<double>{3, 4});
  const Tensor y = l2_normalize(x);
  CHECK(y[0] == doctest::Approx(0.6));
  CHECK(y[1] == doctest::Approx(0.8));
  CHECK_THROWS_AS(l2_normalize(Tensor({1, 1, 2, 2})), UnnormalizableBlob);
}

TEST_CASE("concat rescale hits the target norm for any input scales") {
  std::mt19937_64 rng(2);
  for (double target : {1.0, 4700.0, 1e6}) {
    std::vector<Tensor> blobs{l2_normalize(random_map(3, 5, 5, rng, 1e4)),
                              l2_normalize(random_map(2, 5, 5, rng, 1e-4))};
    const Tensor z = concat_rescale(blobs, target);
    CHECK(z.c() == 5);
    CHECK(std::abs(z.frobenius_norm() - target) / target < 1e-12);
    // equal share per normalized blob
    double first = 0;
    for (std::size_t k = 0; k < blobs[0].size(); ++k) first += z[k] * z[k];
    CHECK(std::sqrt(first) == doctest::Approx(target / std::sqrt(2.0)));
  }
  std::vector<Tensor> mismatched{Tensor({1, 1, 2, 2}, 1.0), Tensor({1, 1, 3, 3}, 1.0)};
  CHECK_THROWS_AS(concat_rescale(mismatched, 1.0), std::invalid_argument);
}

TEST_CASE("1x1 reduction") {
  Tensor blob({1, 2, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor w({1, 2, 1, 1}, std::vector<double>{10, 1});
  CHECK(reduce_1x1(blob, w).data() == std::vector<double>{13, 24});
  CHECK_THROWS_AS(reduce_1x1(blob, Tensor({1, 3, 1, 1})), std::invalid_argument);
}

TEST_CASE("feature concat layer shapes and blob norms") {
  std::mt19937_64 rng(3);
  const auto taps = three_taps(rng);
  ConcatConfig cfg;
  cfg.out_channels = 5;
  FeatureConcat layer(cfg, {4, 6, 8}, rng);
  const std::vector<BBox> rois{BBox(0, 0, 64, 64), BBox(20, 30, 100, 90), BBox(100, 100, 128, 128)};
  const Tensor out = layer.forward(taps, rois);
  CHECK(out.shape() == std::vector<int>{3, 5, 7, 7});
  REQUIRE(layer.blob_norms().size() == 3);
  for (double n : layer.blob_norms()) CHECK(std::abs(n - 4700) / 4700 < 1e-12);
  CHECK(out.all_finite());
  const Tensor single = concat_features(taps, rois[1], layer);
  CHECK(single.shape() == std::vector<int>{1, 5, 7, 7});
  const auto grads = layer.backward(Tensor(out.shape(), 1.0));
  // the single-roi call replaced the cache; gradients still have tap shapes
  REQUIRE(grads.size() == 3);
  CHECK(grads[0].shape() == taps[0].map.shape());
}

TEST_CASE("dead taps drop the roi or throw") {
  std::mt19937_64 rng(4);
  auto taps = three_taps(rng);
  taps[2].map.fill(0.0);
  FeatureConcat layer(ConcatConfig{}, {4, 6, 8}, rng);
  const std::vector<BBox> rois{BBox(0, 0, 64, 64), BBox(10, 10, 50, 50)};
  CHECK_THROWS_AS(layer.forward(taps, rois), UnnormalizableBlob);
  std::vector<std::size_t> dropped;
  const Tensor out = layer.forward(taps, rois, &dropped);
  CHECK(dropped == std::vector<std::size_t>{0, 1});
  CHECK(out.n() == 0);
  const auto grads = layer.backward(out);
  for (const auto& g : grads) CHECK(g.frobenius_norm() == 0.0);
}

TEST_CASE("concat config validation") {
  ConcatConfig c;
  c.taps.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ConcatConfig{};
  c.target_norm = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  std::mt19937_64 rng(5);
  ConcatConfig far;
  far.taps = {0, 3};
  CHECK_THROWS_AS(FeatureConcat(far, {4, 6, 8}, rng), std::invalid_argument);
}

TEST_CASE("plain roi pooling layer") {
  std::mt19937_64 rng(6);
  const auto taps = three_taps(rng);
  RoiPoolLayer pool(2, 7);
  const std::vector<BBox> rois{BBox(0, 0, 64, 64), BBox(32, 32, 96, 96)};
  const Tensor out = pool.forward(taps, rois);
  CHECK(out.shape() == std::vector<int>{2, 8, 7, 7});
  const auto g = pool.backward(Tensor(out.shape(), 1.0));
  CHECK(g[0].empty());
  double total = 0;
  for (double v : g[2].data()) total += v;
  CHECK(total == doctest::Approx(2 * 8 * 49));
}
