#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fdet/kernels.hpp"

namespace fdet::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace parallel {

// Each output plane accumulates terms in (ci, ky, kx) order, matching the
// serial reference element for element.
void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const int oh = s.out_height(), ow = s.out_width();
  const int planes = s.batch * s.out_channels;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int n = p / s.out_channels, co = p % s.out_channels;
    double* out = y.data() + static_cast<std::size_t>(p) * oh * ow;
    std::fill(out, out + oh * ow, b[co]);
    for (int ci = 0; ci < s.in_channels; ++ci) {
      const double* in = x.data() + (static_cast<std::size_t>(n) * s.in_channels + ci) * s.height * s.width;
      for (int ky = 0; ky < s.kernel; ++ky)
        for (int kx = 0; kx < s.kernel; ++kx) {
          const double wv = w[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
          // valid ox range: 0 <= ox*stride - pad + kx < width
          int ox_lo = 0;
          while (ox_lo < ow && ox_lo * s.stride - s.pad + kx < 0) ++ox_lo;
          int ox_hi = ow;
          while (ox_hi > ox_lo && (ox_hi - 1) * s.stride - s.pad + kx >= s.width) --ox_hi;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s.stride - s.pad + ky;
            if (iy < 0 || iy >= s.height) continue;
            const double* row = in + static_cast<std::size_t>(iy) * s.width;
            double* orow = out + static_cast<std::size_t>(oy) * ow;
            if (s.stride == 1) {
              const double* src = row - s.pad + kx;
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * src[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * row[ox * s.stride - s.pad + kx];
            }
          }
        }
    }
  }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const int oh = s.out_height(), ow = s.out_width();
  const int planes = s.batch * s.in_channels;
#pragma omp parallel
  {
    std::vector<double> acc(static_cast<std::size_t>(s.height) * s.width);
#pragma omp for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const int n = p / s.in_channels, ci = p % s.in_channels;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int co = 0; co < s.out_channels; ++co) {
        const double* g = dy.data() + (static_cast<std::size_t>(n) * s.out_channels + co) * oh * ow;
        for (int ky = 0; ky < s.kernel; ++ky)
          for (int kx = 0; kx < s.kernel; ++kx) {
            const double wv = w[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.height) continue;
              double* arow = acc.data() + static_cast<std::size_t>(iy) * s.width;
              const double* grow = g + static_cast<std::size_t>(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.width) continue;
                arow[ix] += wv * grow[ox];
              }
            }
          }
      }
      double* out = dx.data() + static_cast<std::size_t>(p) * s.height * s.width;
      for (std::size_t i = 0; i < acc.size(); ++i) out[i] += acc[i];
    }
  }
}

void conv2d_backward_weights(const ConvShape& s, std::span<const double> x,
                             std::span<const double> dy, std::span<double> dw,
                             std::span<double> db) {
  const int oh = s.out_height(), ow = s.out_width();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < s.out_channels; ++co) {
    double bacc = 0;
    for (int n = 0; n < s.batch; ++n) {
      const double* g = dy.data() + (static_cast<std::size_t>(n) * s.out_channels + co) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) bacc += g[i];
    }
    db[co] += bacc;
    for (int ci = 0; ci < s.in_channels; ++ci)
      for (int ky = 0; ky < s.kernel; ++ky)
        for (int kx = 0; kx < s.kernel; ++kx) {
          double acc = 0;
          for (int n = 0; n < s.batch; ++n) {
            const double* g = dy.data() + (static_cast<std::size_t>(n) * s.out_channels + co) * oh * ow;
            const double* in = x.data() + (static_cast<std::size_t>(n) * s.in_channels + ci) * s.height * s.width;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.height) continue;
              const double* row = in + static_cast<std::size_t>(iy) * s.width;
              const double* grow = g + static_cast<std::size_t>(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.width) continue;
                acc += grow[ox] * row[ix];
              }
            }
          }
          dw[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] += acc;
        }
  }
}

void maxpool_forward(const PoolShape& s, std::span<const double> x, std::span<double> y,
                     std::span<std::int32_t> argmax) {
  const int oh = s.out_height(), ow = s.out_width();
#pragma omp parallel for schedule(static)
  for (int p = 0; p < s.planes; ++p) {
    const double* in = x.data() + static_cast<std::size_t>(p) * s.height * s.width;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int best = -1;
        double best_v = 0;
        for (int ky = 0; ky < s.kernel; ++ky)
          for (int kx = 0; kx < s.kernel; ++kx) {
            const int idx = (oy * s.stride + ky) * s.width + ox * s.stride + kx;
            if (best < 0 || in[idx] > best_v) {
              best = idx;
              best_v = in[idx];
            }
          }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + oy) * ow + ox;
        y[o] = best_v;
        argmax[o] = best;
      }
  }
}

void maxpool_backward(const PoolShape& s, std::span<const double> dy,
                      std::span<const std::int32_t> argmax, std::span<double> dx) {
  const int oh = s.out_height(), ow = s.out_width();
#pragma omp parallel for schedule(static)
  for (int p = 0; p < s.planes; ++p) {
    double* out = dx.data() + static_cast<std::size_t>(p) * s.height * s.width;
    for (int o = 0; o < oh * ow; ++o) {
      const std::size_t oi = static_cast<std::size_t>(p) * oh * ow + o;
      out[argmax[oi]] += dy[oi];
    }
  }
}

void linear_forward(int rows, int in, int out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + static_cast<std::size_t>(r) * in;
    for (int o = 0; o < out; ++o) {
      const double* wo = w.data() + static_cast<std::size_t>(o) * in;
      double acc = b[o];
      for (int i = 0; i < in; ++i) acc += wo[i] * xr[i];
      y[static_cast<std::size_t>(r) * out + o] = acc;
    }
  }
}

void linear_backward(int rows, int in, int out, std::span<const double> dy,
                     std::span<const double> x, std::span<const double> w, std::span<double> dx,
                     std::span<double> dw, std::span<double> db) {
#pragma omp parallel
  {
    std::vector<double> acc(static_cast<std::size_t>(in));
#pragma omp for schedule(static)
    for (int r = 0; r < rows; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int o = 0; o < out; ++o) {
        const double g = dy[static_cast<std::size_t>(r) * out + o];
        const double* wo = w.data() + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) acc[i] += wo[i] * g;
      }
      double* dxr = dx.data() + static_cast<std::size_t>(r) * in;
      for (int i = 0; i < in; ++i) dxr[i] += acc[i];
    }
#pragma omp for schedule(static)
    for (int o = 0; o < out; ++o) {
      double bacc = 0;
      for (int r = 0; r < rows; ++r) bacc += dy[static_cast<std::size_t>(r) * out + o];
      db[o] += bacc;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int r = 0; r < rows; ++r) {
        const double g = dy[static_cast<std::size_t>(r) * out + o];
        const double* xr = x.data() + static_cast<std::size_t>(r) * in;
        for (int i = 0; i < in; ++i) acc[i] += g * xr[i];
      }
      double* dwo = dw.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) dwo[i] += acc[i];
    }
  }
}

void resize_bilinear(int planes, int in_h, int in_w, int out_h, int out_w,
                     std::span<const double> src, std::span<double> dst) {
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  std::vector<int> x0s(out_w), x1s(out_w);
  std::vector<double> wxs(out_w);
  for (int ox = 0; ox < out_w; ++ox) {
    const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, in_w - 1.0);
    x0s[ox] = static_cast<int>(fx);
    x1s[ox] = std::min(x0s[ox] + 1, in_w - 1);
    wxs[ox] = fx - x0s[ox];
  }
#pragma omp parallel for schedule(static)
  for (int row = 0; row < planes * out_h; ++row) {
    const int p = row / out_h, oy = row % out_h;
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, in_h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - y0;
    const double* plane = src.data() + static_cast<std::size_t>(p) * in_h * in_w;
    const double* r0 = plane + static_cast<std::size_t>(y0) * in_w;
    const double* r1 = plane + static_cast<std::size_t>(y1) * in_w;
    double* out = dst.data() + static_cast<std::size_t>(row) * out_w;
    for (int ox = 0; ox < out_w; ++ox) {
      const double wx = wxs[ox];
      const double top = r0[x0s[ox]] * (1 - wx) + r0[x1s[ox]] * wx;
      const double bot = r1[x0s[ox]] * (1 - wx) + r1[x1s[ox]] * wx;
      out[ox] = top * (1 - wy) + bot * wy;
    }
  }
}

RasterCounts raster_counts(const Region& a, const Region& b, const BBox& frame, int resolution) {
  const double cw = frame.width() / resolution, ch = frame.height() / resolution;
  std::int64_t in_a = 0, in_b = 0, in_both = 0, in_either = 0;
#pragma omp parallel for schedule(static) reduction(+ : in_a, in_b, in_both, in_either)
  for (int row = 0; row < resolution; ++row) {
    const double y = frame.y1 + (row + 0.5) * ch;
    for (int col = 0; col < resolution; ++col) {
      const double x = frame.x1 + (col + 0.5) * cw;
      const bool ia = region_contains(a, x, y), ib = region_contains(b, x, y);
      in_a += ia;
      in_b += ib;
      in_both += ia && ib;
      in_either += ia || ib;
    }
  }
  return {in_a, in_b, in_both, in_either};
}

}  // namespace parallel
}  // namespace fdet::kernels
