#pragma once

#include <array>
#include <span>
#include <vector>

#include "mdbank/boxes.hpp"
#include "mdbank/tensor.hpp"

// Compute kernels shared by every network in the project. The default entry
// points are OpenMP-parallel; each thread owns a disjoint slice of the output
// so results are bit-identical for any thread count. The `reference`
// namespace holds plain serial loops used as test oracles and as the
// benchmark baseline.

namespace mdbank::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_channels * kernel * kernel; }
};

using mdbank::Box;

struct RoiAlignConfig {
  int grid = 4;       // output bins per side
  int sampling = 2;   // bilinear samples per bin per side
  double stride = 8;  // image pixels per feature cell
};

// Convolution. `input` is C×H×W, `weight` is O×(C·k·k), `output` O×H'×W'.
void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);

// Accumulates into grad_weight / grad_bias; overwrites grad_input when it is
// non-empty.
void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight, std::span<const double> grad_output,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_input);

// Fully connected layer over rows: Y[n] = W·X[n] + b. W is out×in.
void linear_forward(int rows, int in_dim, int out_dim, std::span<const double> x,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> y);

// Accumulates grad_weight / grad_bias; overwrites grad_x when non-empty.
void linear_backward(int rows, int in_dim, int out_dim, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> grad_y,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_x);

// Bilinear region pooling. `features` is D×h×w; output is N×(D·grid·grid),
// laid out channel-major within each row. Returns the number of degenerate
// (zero-area) boxes, which are pooled from the nearest single cell.
int roi_align_forward(const RoiAlignConfig& cfg, int channels, int height, int width,
                      std::span<const double> features, std::span<const Box> boxes,
                      std::span<double> output);

// Accumulates into grad_features.
void roi_align_backward(const RoiAlignConfig& cfg, int channels, int height, int width,
                        std::span<const Box> boxes, std::span<const double> grad_output,
                        std::span<double> grad_features);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);
void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight, std::span<const double> grad_output,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_input);
void linear_forward(int rows, int in_dim, int out_dim, std::span<const double> x,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> y);
void linear_backward(int rows, int in_dim, int out_dim, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> grad_y,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_x);
int roi_align_forward(const RoiAlignConfig& cfg, int channels, int height, int width,
                      std::span<const double> features, std::span<const Box> boxes,
                      std::span<double> output);
void roi_align_backward(const RoiAlignConfig& cfg, int channels, int height, int width,
                        std::span<const Box> boxes, std::span<const double> grad_output,
                        std::span<double> grad_features);

}  // namespace reference
}  // namespace mdbank::kernels
