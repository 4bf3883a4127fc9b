#pragma once

// Data-parallel inner loops. Every kernel exists twice:
//   serial::   plain nested loops, the reference used by tests;
//   parallel:: OpenMP over an independent output axis with cache-friendly
//              loop order.
// Both versions add the terms of every output element in the same order, so
// their results are bit-identical regardless of thread count.

#include <cstdint>
#include <span>

#include "fdet/geometry.hpp"

namespace fdet::kernels {

struct ConvShape {
  int batch = 1, in_channels = 1, height = 1, width = 1;
  int out_channels = 1, kernel = 1, stride = 1, pad = 0;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

struct PoolShape {
  int planes = 1;  // batch * channels
  int height = 1, width = 1;
  int kernel = 2, stride = 2;

  int out_height() const { return (height - kernel) / stride + 1; }
  int out_width() const { return (width - kernel) / stride + 1; }
};

struct RasterCounts {
  std::int64_t in_a = 0, in_b = 0, in_both = 0, in_either = 0;
};

#define FDET_KERNEL_SET                                                              \
  void conv2d_forward(const ConvShape& s, std::span<const double> x,                 \
                      std::span<const double> w, std::span<const double> b,          \
                      std::span<double> y);                                          \
  void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,         \
                             std::span<const double> w, std::span<double> dx);       \
  void conv2d_backward_weights(const ConvShape& s, std::span<const double> x,        \
                               std::span<const double> dy, std::span<double> dw,     \
                               std::span<double> db);                                \
  void maxpool_forward(const PoolShape& s, std::span<const double> x,                \
                       std::span<double> y, std::span<std::int32_t> argmax);         \
  void maxpool_backward(const PoolShape& s, std::span<const double> dy,              \
                        std::span<const std::int32_t> argmax, std::span<double> dx); \
  void linear_forward(int rows, int in, int out, std::span<const double> x,          \
                      std::span<const double> w, std::span<const double> b,          \
                      std::span<double> y);                                          \
  void linear_backward(int rows, int in, int out, std::span<const double> dy,        \
                       std::span<const double> x, std::span<const double> w,         \
                       std::span<double> dx, std::span<double> dw,                   \
                       std::span<double> db);                                        \
  void resize_bilinear(int planes, int in_h, int in_w, int out_h, int out_w,         \
                       std::span<const double> src, std::span<double> dst);          \
  RasterCounts raster_counts(const Region& a, const Region& b, const BBox& frame,    \
                             int resolution);

// Gradient kernels accumulate (+=) into dx/dw/db; forward kernels overwrite.
namespace serial {
FDET_KERNEL_SET
}  // namespace serial

namespace parallel {
FDET_KERNEL_SET
}  // namespace parallel

#undef FDET_KERNEL_SET

/// Number of worker threads used by parallel:: kernels (1 without OpenMP).
int max_threads();
/// Sets the OpenMP thread count; no-op without OpenMP.
void set_threads(int n);

}  // namespace fdet::kernels
