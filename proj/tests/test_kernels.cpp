#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fdet/kernels.hpp"

using namespace fdet;
namespace ks = fdet::kernels::serial;
namespace kp = fdet::kernels::parallel;

namespace {

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Direct definition of cross-correlation, written independently of both
// kernel sets.
std::vector<double> conv_ref(const kernels::ConvShape& s, const std::vector<double>& x,
                             const std::vector<double>& w, const std::vector<double>& b) {
  const int oh = s.out_height(), ow = s.out_width();
  std::vector<double> y(static_cast<std::size_t>(s.batch) * s.out_channels * oh * ow);
  for (int n = 0; n < s.batch; ++n)
    for (int o = 0; o < s.out_channels; ++o)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b[o];
          for (int c = 0; c < s.in_channels; ++c)
            for (int ky = 0; ky < s.kernel; ++ky)
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int iy = yy * s.stride - s.pad + ky, ix = xx * s.stride - s.pad + kx;
                if (iy < 0 || ix < 0 || iy >= s.height || ix >= s.width) continue;
                acc += x[((n * s.in_channels + c) * s.height + iy) * s.width + ix] *
                       w[((o * s.in_channels + c) * s.kernel + ky) * s.kernel + kx];
              }
          y[((n * s.out_channels + o) * oh + yy) * ow + xx] = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv kernels agree bit for bit and match the definition") {
  std::mt19937_64 rng(1);
  for (const kernels::ConvShape s :
       {kernels::ConvShape{1, 3, 9, 11, 4, 3, 1, 1}, kernels::ConvShape{2, 2, 8, 8, 3, 3, 2, 0},
        kernels::ConvShape{1, 5, 6, 7, 2, 1, 1, 0}}) {
    const auto x = rand_vec(static_cast<std::size_t>(s.batch) * s.in_channels * s.height * s.width, rng);
    const auto w = rand_vec(static_cast<std::size_t>(s.out_channels) * s.in_channels * s.kernel * s.kernel, rng);
    const auto b = rand_vec(static_cast<std::size_t>(s.out_channels), rng);
    const std::size_t ny = static_cast<std::size_t>(s.batch) * s.out_channels * s.out_height() * s.out_width();
    std::vector<double> ys(ny), yp(ny);
    ks::conv2d_forward(s, x, w, b, ys);
    kp::conv2d_forward(s, x, w, b, yp);
    CHECK(ys == yp);
    const auto ref = conv_ref(s, x, w, b);
    for (std::size_t k = 0; k < ny; ++k) CHECK(ys[k] == doctest::Approx(ref[k]).epsilon(1e-12));

    const auto dy = rand_vec(ny, rng);
    std::vector<double> dxs(x.size()), dxp(x.size()), dws(w.size()), dwp(w.size()), dbs(b.size()), dbp(b.size());
    ks::conv2d_backward_input(s, dy, w, dxs);
    kp::conv2d_backward_input(s, dy, w, dxp);
    ks::conv2d_backward_weights(s, x, dy, dws, dbs);
    kp::conv2d_backward_weights(s, x, dy, dwp, dbp);
    CHECK(dxs == dxp);
    CHECK(dws == dwp);
    CHECK(dbs == dbp);
    // adjoint identity: <conv(x) - b, dy> = <x, dx> = <w, dw>
    double lhs = 0, rx = 0, rw = 0;
    for (std::size_t k = 0; k < ny; ++k) lhs += (ref[k] - b[k / (ny / s.batch / s.out_channels) % s.out_channels]) * dy[k];
    for (std::size_t k = 0; k < x.size(); ++k) rx += x[k] * dxs[k];
    for (std::size_t k = 0; k < w.size(); ++k) rw += w[k] * dws[k];
    CHECK(lhs == doctest::Approx(rx).epsilon(1e-10));
    CHECK(lhs == doctest::Approx(rw).epsilon(1e-10));
  }
}

TEST_CASE("gradient kernels accumulate") {
  const kernels::ConvShape s{1, 1, 3, 3, 1, 1, 1, 0};
  const std::vector<double> x(9, 1.0), dy(9, 1.0), w{2.0};
  std::vector<double> dx(9, 5.0), dw{1.0}, db{1.0};
  ks::conv2d_backward_input(s, dy, w, dx);
  ks::conv2d_backward_weights(s, x, dy, dw, db);
  CHECK(dx[0] == 7.0);
  CHECK(dw[0] == 10.0);
  CHECK(db[0] == 10.0);
}

TEST_CASE("maxpool by hand, ties to lowest index") {
  const kernels::PoolShape s{1, 4, 4, 2, 2};
  const std::vector<double> x{1, 5, 2, 2,  //
                              3, 4, 2, 2,  //
                              0, 0, 9, 1,  //
                              0, 0, 1, 9};
  std::vector<double> ys(4), yp(4);
  std::vector<std::int32_t> as(4), ap(4);
  ks::maxpool_forward(s, x, ys, as);
  kp::maxpool_forward(s, x, yp, ap);
  CHECK(ys == std::vector<double>{5, 2, 0, 9});
  CHECK(ys == yp);
  CHECK(as == ap);
  CHECK(as[1] == 2);  // first of four equal 2s
  CHECK(as[2] == 8);
  std::vector<double> dx(16, 0.0);
  ks::maxpool_backward(s, std::vector<double>{1, 2, 3, 4}, as, dx);
  CHECK(dx[1] == 1);
  CHECK(dx[2] == 2);
  CHECK(dx[8] == 3);
  CHECK(dx[10] == 4);
}

TEST_CASE("linear kernels") {
  std::mt19937_64 rng(2);
  const int rows = 5, in = 7, out = 3;
  const auto x = rand_vec(rows * in, rng), w = rand_vec(out * in, rng), b = rand_vec(out, rng);
  std::vector<double> ys(rows * out), yp(rows * out);
  ks::linear_forward(rows, in, out, x, w, b, ys);
  kp::linear_forward(rows, in, out, x, w, b, yp);
  CHECK(ys == yp);
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      for (int i = 0; i < in; ++i) acc += x[r * in + i] * w[o * in + i];
      CHECK(ys[r * out + o] == doctest::Approx(acc).epsilon(1e-12));
    }
  const auto dy = rand_vec(rows * out, rng);
  std::vector<double> dxs(x.size()), dxp(x.size()), dws(w.size()), dwp(w.size()), dbs(out), dbp(out);
  ks::linear_backward(rows, in, out, dy, x, w, dxs, dws, dbs);
  kp::linear_backward(rows, in, out, dy, x, w, dxp, dwp, dbp);
  CHECK(dxs == dxp);
  CHECK(dws == dwp);
  CHECK(dbs == dbp);
}

TEST_CASE("bilinear resize matches the independent oracle") {
  std::ifstream f(FDET_FIXTURES "/bilinear_expected.txt");
  REQUIRE(f);
  int ih, iw, oh, ow, cases = 0;
  while (f >> ih >> iw >> oh >> ow) {
    std::vector<double> src(static_cast<std::size_t>(ih) * iw), want(static_cast<std::size_t>(oh) * ow);
    for (auto& v : src) f >> v;
    for (auto& v : want) f >> v;
    std::vector<double> gs(want.size()), gp(want.size());
    ks::resize_bilinear(1, ih, iw, oh, ow, src, gs);
    kp::resize_bilinear(1, ih, iw, oh, ow, src, gp);
    CHECK(gs == gp);
    for (std::size_t k = 0; k < want.size(); ++k) CHECK(gs[k] == doctest::Approx(want[k]).epsilon(1e-12));
    ++cases;
  }
  CHECK(cases == 2);
}

TEST_CASE("bilinear identity and constant preservation") {
  std::mt19937_64 rng(3);
  const auto src = rand_vec(2 * 6 * 5, rng);
  std::vector<double> dst(src.size());
  ks::resize_bilinear(2, 6, 5, 6, 5, src, dst);
  CHECK(dst == src);
  const std::vector<double> c(20, 0.25);
  std::vector<double> up(9 * 13);
  kp::resize_bilinear(1, 4, 5, 9, 13, c, up);
  for (double v : up) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("raster counts agree and scale with area") {
  const Region a = BBox(0, 0, 10, 10), b = EllipseRegion(8, 8, 6, 3, 0.5);
  const BBox frame(-2, -2, 16, 16);
  for (int res : {64, 200}) {
    const auto s = ks::raster_counts(a, b, frame, res), p = kp::raster_counts(a, b, frame, res);
    CHECK(s.in_a == p.in_a);
    CHECK(s.in_b == p.in_b);
    CHECK(s.in_both == p.in_both);
    CHECK(s.in_either == p.in_either);
    CHECK(s.in_a + s.in_b == s.in_both + s.in_either);
  }
  const auto big = ks::raster_counts(a, a, BBox(0, 0, 20, 20), 400);
  CHECK(static_cast<double>(big.in_a) / (400.0 * 400.0) == doctest::Approx(0.25).epsilon(0.01));
}

TEST_CASE("parallel kernels are bit identical across thread counts") {
  std::mt19937_64 rng(4);
  const kernels::ConvShape s{1, 4, 16, 16, 8, 3, 1, 1};
  const auto x = rand_vec(4 * 256, rng), w = rand_vec(8 * 4 * 9, rng), b = rand_vec(8, rng);
  std::vector<double> y1(8 * 256), y2(8 * 256);
  kernels::set_threads(1);
  kp::conv2d_forward(s, x, w, b, y1);
  kernels::set_threads(4);
  kp::conv2d_forward(s, x, w, b, y2);
  kernels::set_threads(kernels::max_threads());
  CHECK(y1 == y2);
}
