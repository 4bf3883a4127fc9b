#include <algorithm>
#include <cmath>

#include "fdet/kernels.hpp"

namespace fdet::kernels::serial {

void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int n = 0; n < s.batch; ++n)
    for (int co = 0; co < s.out_channels; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = b[co];
          for (int ci = 0; ci < s.in_channels; ++ci)
            for (int ky = 0; ky < s.kernel; ++ky) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.height) continue;
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.width) continue;
                acc += w[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] *
                       x[((n * s.in_channels + ci) * s.height + iy) * s.width + ix];
              }
            }
          y[((n * s.out_channels + co) * oh + oy) * ow + ox] = acc;
        }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int n = 0; n < s.batch; ++n)
    for (int ci = 0; ci < s.in_channels; ++ci)
      for (int iy = 0; iy < s.height; ++iy)
        for (int ix = 0; ix < s.width; ++ix) {
          double acc = 0;
          for (int co = 0; co < s.out_channels; ++co)
            for (int ky = 0; ky < s.kernel; ++ky) {
              const int ty = iy + s.pad - ky;
              if (ty < 0 || ty % s.stride) continue;
              const int oy = ty / s.stride;
              if (oy >= oh) continue;
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int tx = ix + s.pad - kx;
                if (tx < 0 || tx % s.stride) continue;
                const int ox = tx / s.stride;
                if (ox >= ow) continue;
                acc += w[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] *
                       dy[((n * s.out_channels + co) * oh + oy) * ow + ox];
              }
            }
          dx[((n * s.in_channels + ci) * s.height + iy) * s.width + ix] += acc;
        }
}

void conv2d_backward_weights(const ConvShape& s, std::span<const double> x,
                             std::span<const double> dy, std::span<double> dw,
                             std::span<double> db) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int co = 0; co < s.out_channels; ++co) {
    double bacc = 0;
    for (int n = 0; n < s.batch; ++n)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) bacc += dy[((n * s.out_channels + co) * oh + oy) * ow + ox];
    db[co] += bacc;
    for (int ci = 0; ci < s.in_channels; ++ci)
      for (int ky = 0; ky < s.kernel; ++ky)
        for (int kx = 0; kx < s.kernel; ++kx) {
          double acc = 0;
          for (int n = 0; n < s.batch; ++n)
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.height) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.width) continue;
                acc += dy[((n * s.out_channels + co) * oh + oy) * ow + ox] *
                       x[((n * s.in_channels + ci) * s.height + iy) * s.width + ix];
              }
            }
          dw[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] += acc;
        }
  }
}

void maxpool_forward(const PoolShape& s, std::span<const double> x, std::span<double> y,
                     std::span<std::int32_t> argmax) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int p = 0; p < s.planes; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int best = -1;
        double best_v = 0;
        for (int ky = 0; ky < s.kernel; ++ky)
          for (int kx = 0; kx < s.kernel; ++kx) {
            const int idx = (oy * s.stride + ky) * s.width + ox * s.stride + kx;
            const double v = x[static_cast<std::size_t>(p) * s.height * s.width + idx];
            if (best < 0 || v > best_v) {
              best = idx;
              best_v = v;
            }
          }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + oy) * ow + ox;
        y[o] = best_v;
        argmax[o] = best;
      }
}

void maxpool_backward(const PoolShape& s, std::span<const double> dy,
                      std::span<const std::int32_t> argmax, std::span<double> dx) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int p = 0; p < s.planes; ++p)
    for (int o = 0; o < oh * ow; ++o) {
      const std::size_t oi = static_cast<std::size_t>(p) * oh * ow + o;
      dx[static_cast<std::size_t>(p) * s.height * s.width + argmax[oi]] += dy[oi];
    }
}

void linear_forward(int rows, int in, int out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y) {
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      for (int i = 0; i < in; ++i)
        acc += w[static_cast<std::size_t>(o) * in + i] * x[static_cast<std::size_t>(r) * in + i];
      y[static_cast<std::size_t>(r) * out + o] = acc;
    }
}

void linear_backward(int rows, int in, int out, std::span<const double> dy,
                     std::span<const double> x, std::span<const double> w, std::span<double> dx,
                     std::span<double> dw, std::span<double> db) {
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < in; ++i) {
      double acc = 0;
      for (int o = 0; o < out; ++o)
        acc += w[static_cast<std::size_t>(o) * in + i] * dy[static_cast<std::size_t>(r) * out + o];
      dx[static_cast<std::size_t>(r) * in + i] += acc;
    }
  for (int o = 0; o < out; ++o) {
    double bacc = 0;
    for (int r = 0; r < rows; ++r) bacc += dy[static_cast<std::size_t>(r) * out + o];
    db[o] += bacc;
    for (int i = 0; i < in; ++i) {
      double acc = 0;
      for (int r = 0; r < rows; ++r)
        acc += dy[static_cast<std::size_t>(r) * out + o] * x[static_cast<std::size_t>(r) * in + i];
      dw[static_cast<std::size_t>(o) * in + i] += acc;
    }
  }
}

void resize_bilinear(int planes, int in_h, int in_w, int out_h, int out_w,
                     std::span<const double> src, std::span<double> dst) {
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, in_h - 1.0);
        double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, in_w - 1.0);
        const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        const int y1 = std::min(y0 + 1, in_h - 1), x1 = std::min(x0 + 1, in_w - 1);
        const double wy = fy - y0, wx = fx - x0;
        const double* plane = src.data() + static_cast<std::size_t>(p) * in_h * in_w;
        const double top = plane[y0 * in_w + x0] * (1 - wx) + plane[y0 * in_w + x1] * wx;
        const double bot = plane[y1 * in_w + x0] * (1 - wx) + plane[y1 * in_w + x1] * wx;
        dst[(static_cast<std::size_t>(p) * out_h + oy) * out_w + ox] = top * (1 - wy) + bot * wy;
      }
}

RasterCounts raster_counts(const Region& a, const Region& b, const BBox& frame, int resolution) {
  RasterCounts c;
  const double cw = frame.width() / resolution, ch = frame.height() / resolution;
  for (int row = 0; row < resolution; ++row) {
    const double y = frame.y1 + (row + 0.5) * ch;
    for (int col = 0; col < resolution; ++col) {
      const double x = frame.x1 + (col + 0.5) * cw;
      const bool ia = region_contains(a, x, y), ib = region_contains(b, x, y);
      c.in_a += ia;
      c.in_b += ib;
      c.in_both += ia && ib;
      c.in_either += ia || ib;
    }
  }
  return c;
}

}  // namespace fdet::kernels::serial
