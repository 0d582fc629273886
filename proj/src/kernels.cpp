#include "mdbank/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mdbank::kernels {
namespace {

void im2col(const ConvGeometry& g, std::span<const double> input, std::vector<double>& col) {
  const int oh = g.out_height(), ow = g.out_width();
  const std::size_t spatial = static_cast<std::size_t>(oh) * ow;
  col.assign(static_cast<std::size_t>(g.patch()) * spatial, 0.0);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    const double* plane = input.data() + static_cast<std::size_t>(c) * g.in_height * g.in_width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        double* dst = col.data() + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * spatial;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_width) continue;
            dst[oy * ow + ox] = plane[iy * g.in_width + ix];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const std::vector<double>& col, std::span<double> grad_input) {
  const int oh = g.out_height(), ow = g.out_width();
  const std::size_t spatial = static_cast<std::size_t>(oh) * ow;
  std::fill(grad_input.begin(), grad_input.end(), 0.0);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    double* plane = grad_input.data() + static_cast<std::size_t>(c) * g.in_height * g.in_width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const double* src =
            col.data() + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * spatial;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_width) continue;
            plane[iy * g.in_width + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

// Dot product with eight independent partial sums so the loop vectorizes.
double dot(const double* a, const double* b, std::size_t n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) lane[k] += a[i + k] * b[i + k];
  }
  double acc = ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

struct Tap {
  int index[4];
  double weight[4];
};

Tap bilinear_tap(double fy, double fx, int height, int width, double scale) {
  fy = std::clamp(fy, 0.0, static_cast<double>(height - 1));
  fx = std::clamp(fx, 0.0, static_cast<double>(width - 1));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y1 = std::min(y0 + 1, height - 1);
  const int x1 = std::min(x0 + 1, width - 1);
  const double ly = fy - y0, lx = fx - x0;
  return Tap{{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
             {scale * (1 - ly) * (1 - lx), scale * (1 - ly) * lx, scale * ly * (1 - lx),
              scale * ly * lx}};
}

bool degenerate(const Box& b) { return !(b[2] > b[0]) || !(b[3] > b[1]); }

int nearest_cell(double coord, double stride, int extent) {
  const int c = static_cast<int>(std::lround(coord / stride - 0.5));
  return std::clamp(c, 0, extent - 1);
}

// Taps for one box: grid·grid bins, each with sampling² taps.
void box_taps(const RoiAlignConfig& cfg, int height, int width, const Box& b, std::vector<Tap>& taps) {
  const int bins = cfg.grid * cfg.grid;
  const int per_bin = cfg.sampling * cfg.sampling;
  taps.resize(static_cast<std::size_t>(bins) * per_bin);
  if (degenerate(b)) {
    const int cy = nearest_cell(0.5 * (b[1] + b[3]), cfg.stride, height);
    const int cx = nearest_cell(0.5 * (b[0] + b[2]), cfg.stride, width);
    const double w = 1.0 / per_bin;
    for (auto& t : taps) t = Tap{{cy * width + cx, 0, 0, 0}, {w, 0, 0, 0}};
    return;
  }
  const double bw = (b[2] - b[0]) / cfg.grid;
  const double bh = (b[3] - b[1]) / cfg.grid;
  const double scale = 1.0 / per_bin;
  for (int py = 0; py < cfg.grid; ++py) {
    for (int px = 0; px < cfg.grid; ++px) {
      for (int sy = 0; sy < cfg.sampling; ++sy) {
        for (int sx = 0; sx < cfg.sampling; ++sx) {
          const double y = b[1] + (py + (sy + 0.5) / cfg.sampling) * bh;
          const double x = b[0] + (px + (sx + 0.5) / cfg.sampling) * bw;
          taps[(static_cast<std::size_t>(py * cfg.grid + px)) * per_bin + sy * cfg.sampling + sx] =
              bilinear_tap(y / cfg.stride - 0.5, x / cfg.stride - 0.5, height, width, scale);
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  const std::size_t spatial = static_cast<std::size_t>(g.out_height()) * g.out_width();
  const int patch = g.patch();
  std::vector<double> col;
  const double* cols = input.data();
  if (!is_pointwise(g)) {
    im2col(g, input, col);
    cols = col.data();
  }
#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.out_channels; ++o) {
    double* out = output.data() + static_cast<std::size_t>(o) * spatial;
    const double b = bias.empty() ? 0.0 : bias[o];
    for (std::size_t s = 0; s < spatial; ++s) out[s] = b;
    const double* w = weight.data() + static_cast<std::size_t>(o) * patch;
    for (int r = 0; r < patch; ++r) {
      const double wr = w[r];
      const double* src = cols + static_cast<std::size_t>(r) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) out[s] += wr * src[s];
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight, std::span<const double> grad_output,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_input) {
  const std::size_t spatial = static_cast<std::size_t>(g.out_height()) * g.out_width();
  const int patch = g.patch();
  std::vector<double> col;
  const double* cols = input.data();
  if (!is_pointwise(g)) {
    im2col(g, input, col);
    cols = col.data();
  }
#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.out_channels; ++o) {
    const double* go = grad_output.data() + static_cast<std::size_t>(o) * spatial;
    double* gw = grad_weight.data() + static_cast<std::size_t>(o) * patch;
    for (int r = 0; r < patch; ++r) {
      const double* src = cols + static_cast<std::size_t>(r) * spatial;
      gw[r] += dot(go, src, spatial);
    }
    if (!grad_bias.empty()) {
      double acc = 0.0;
      for (std::size_t s = 0; s < spatial; ++s) acc += go[s];
      grad_bias[o] += acc;
    }
  }
  if (grad_input.empty()) return;

  std::vector<double> dcol_storage;
  double* dcol = nullptr;
  if (is_pointwise(g)) {
    dcol = grad_input.data();
  } else {
    dcol_storage.assign(static_cast<std::size_t>(patch) * spatial, 0.0);
    dcol = dcol_storage.data();
  }
#pragma omp parallel for schedule(static)
  for (int r = 0; r < patch; ++r) {
    double* dst = dcol + static_cast<std::size_t>(r) * spatial;
    for (std::size_t s = 0; s < spatial; ++s) dst[s] = 0.0;
    for (int o = 0; o < g.out_channels; ++o) {
      const double w = weight[static_cast<std::size_t>(o) * patch + r];
      const double* go = grad_output.data() + static_cast<std::size_t>(o) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) dst[s] += w * go[s];
    }
  }
  if (!is_pointwise(g)) col2im(g, dcol_storage, grad_input);
}

void linear_forward(int rows, int in_dim, int out_dim, std::span<const double> x,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> y) {
#pragma omp parallel for schedule(static)
  for (int n = 0; n < rows; ++n) {
    const double* xr = x.data() + static_cast<std::size_t>(n) * in_dim;
    double* yr = y.data() + static_cast<std::size_t>(n) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* w = weight.data() + static_cast<std::size_t>(o) * in_dim;
      yr[o] = dot(w, xr, static_cast<std::size_t>(in_dim)) + (bias.empty() ? 0.0 : bias[o]);
    }
  }
}

void linear_backward(int rows, int in_dim, int out_dim, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> grad_y,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_x) {
  if (!grad_weight.empty()) {
#pragma omp parallel for schedule(static)
    for (int o = 0; o < out_dim; ++o) {
      double* gw = grad_weight.data() + static_cast<std::size_t>(o) * in_dim;
      double gb = 0.0;
      for (int n = 0; n < rows; ++n) {
        const double gy = grad_y[static_cast<std::size_t>(n) * out_dim + o];
        if (gy == 0.0) continue;
        gb += gy;
        const double* xr = x.data() + static_cast<std::size_t>(n) * in_dim;
        for (int i = 0; i < in_dim; ++i) gw[i] += gy * xr[i];
      }
      if (!grad_bias.empty()) grad_bias[o] += gb;
    }
  }
  if (grad_x.empty()) return;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < rows; ++n) {
    double* gx = grad_x.data() + static_cast<std::size_t>(n) * in_dim;
    for (int i = 0; i < in_dim; ++i) gx[i] = 0.0;
    for (int o = 0; o < out_dim; ++o) {
      const double gy = grad_y[static_cast<std::size_t>(n) * out_dim + o];
      if (gy == 0.0) continue;
      const double* w = weight.data() + static_cast<std::size_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) gx[i] += gy * w[i];
    }
  }
}

int roi_align_forward(const RoiAlignConfig& cfg, int channels, int height, int width,
                      std::span<const double> features, std::span<const Box> boxes,
                      std::span<double> output) {
  const int n_boxes = static_cast<int>(boxes.size());
  const int bins = cfg.grid * cfg.grid;
  const int per_bin = cfg.sampling * cfg.sampling;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t row_width = static_cast<std::size_t>(channels) * bins;
  int n_degenerate = 0;
  for (const auto& b : boxes) n_degenerate += degenerate(b) ? 1 : 0;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < n_boxes; ++n) {
    std::vector<Tap> taps;
    box_taps(cfg, height, width, boxes[n], taps);
    double* out = output.data() + static_cast<std::size_t>(n) * row_width;
    for (int d = 0; d < channels; ++d) {
      const double* f = features.data() + static_cast<std::size_t>(d) * plane;
      for (int bin = 0; bin < bins; ++bin) {
        double acc = 0.0;
        const Tap* t = taps.data() + static_cast<std::size_t>(bin) * per_bin;
        for (int s = 0; s < per_bin; ++s) {
          acc += t[s].weight[0] * f[t[s].index[0]] + t[s].weight[1] * f[t[s].index[1]] +
                 t[s].weight[2] * f[t[s].index[2]] + t[s].weight[3] * f[t[s].index[3]];
        }
        out[static_cast<std::size_t>(d) * bins + bin] = acc;
      }
    }
  }
  return n_degenerate;
}

void roi_align_backward(const RoiAlignConfig& cfg, int channels, int height, int width,
                        std::span<const Box> boxes, std::span<const double> grad_output,
                        std::span<double> grad_features) {
  const int n_boxes = static_cast<int>(boxes.size());
  const int bins = cfg.grid * cfg.grid;
  const int per_bin = cfg.sampling * cfg.sampling;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t row_width = static_cast<std::size_t>(channels) * bins;
  std::vector<std::vector<Tap>> taps(boxes.size());
  for (int n = 0; n < n_boxes; ++n) box_taps(cfg, height, width, boxes[n], taps[n]);
#pragma omp parallel for schedule(static)
  for (int d = 0; d < channels; ++d) {
    double* gf = grad_features.data() + static_cast<std::size_t>(d) * plane;
    for (int n = 0; n < n_boxes; ++n) {
      const double* go = grad_output.data() + static_cast<std::size_t>(n) * row_width +
                         static_cast<std::size_t>(d) * bins;
      for (int bin = 0; bin < bins; ++bin) {
        const double g = go[bin];
        if (g == 0.0) continue;
        const Tap* t = taps[n].data() + static_cast<std::size_t>(bin) * per_bin;
        for (int s = 0; s < per_bin; ++s) {
          for (int k = 0; k < 4; ++k) gf[t[s].index[k]] += g * t[s].weight[k];
        }
      }
    }
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int o = 0; o < g.out_channels; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (int c = 0; c < g.in_channels; ++c) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = oy * g.stride - g.pad + ky;
              const int ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              acc += weight[((static_cast<std::size_t>(o) * g.in_channels + c) * g.kernel + ky) * g.kernel + kx] *
                     input[(static_cast<std::size_t>(c) * g.in_height + iy) * g.in_width + ix];
            }
          }
        }
        output[(static_cast<std::size_t>(o) * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight, std::span<const double> grad_output,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_input) {
  const int oh = g.out_height(), ow = g.out_width();
  if (!grad_input.empty()) std::fill(grad_input.begin(), grad_input.end(), 0.0);
  for (int o = 0; o < g.out_channels; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double go = grad_output[(static_cast<std::size_t>(o) * oh + oy) * ow + ox];
        if (!grad_bias.empty()) grad_bias[o] += go;
        for (int c = 0; c < g.in_channels; ++c) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = oy * g.stride - g.pad + ky;
              const int ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              const std::size_t wi =
                  ((static_cast<std::size_t>(o) * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
              const std::size_t ii = (static_cast<std::size_t>(c) * g.in_height + iy) * g.in_width + ix;
              grad_weight[wi] += go * input[ii];
              if (!grad_input.empty()) grad_input[ii] += go * weight[wi];
            }
          }
        }
      }
    }
  }
}

void linear_forward(int rows, int in_dim, int out_dim, std::span<const double> x,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> y) {
  for (int n = 0; n < rows; ++n) {
    for (int o = 0; o < out_dim; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (int i = 0; i < in_dim; ++i) {
        acc += weight[static_cast<std::size_t>(o) * in_dim + i] * x[static_cast<std::size_t>(n) * in_dim + i];
      }
      y[static_cast<std::size_t>(n) * out_dim + o] = acc;
    }
  }
}

void linear_backward(int rows, int in_dim, int out_dim, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> grad_y,
                     std::span<double> grad_weight, std::span<double> grad_bias,
                     std::span<double> grad_x) {
  if (!grad_x.empty()) std::fill(grad_x.begin(), grad_x.end(), 0.0);
  for (int n = 0; n < rows; ++n) {
    for (int o = 0; o < out_dim; ++o) {
      const double gy = grad_y[static_cast<std::size_t>(n) * out_dim + o];
      if (!grad_bias.empty()) grad_bias[o] += gy;
      for (int i = 0; i < in_dim; ++i) {
        const std::size_t wi = static_cast<std::size_t>(o) * in_dim + i;
        const std::size_t xi = static_cast<std::size_t>(n) * in_dim + i;
        if (!grad_weight.empty()) grad_weight[wi] += gy * x[xi];
        if (!grad_x.empty()) grad_x[xi] += gy * weight[wi];
      }
    }
  }
}

namespace {

double sample_bilinear(std::span<const double> plane, int height, int width, double y, double x) {
  y = std::min(std::max(y, 0.0), height - 1.0);
  x = std::min(std::max(x, 0.0), width - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = y0 + 1 < height ? y0 + 1 : y0;
  const int x1 = x0 + 1 < width ? x0 + 1 : x0;
  const double dy = y - y0, dx = x - x0;
  const double top = plane[y0 * width + x0] * (1 - dx) + plane[y0 * width + x1] * dx;
  const double bottom = plane[y1 * width + x0] * (1 - dx) + plane[y1 * width + x1] * dx;
  return top * (1 - dy) + bottom * dy;
}

}  // namespace

int roi_align_forward(const RoiAlignConfig& cfg, int channels, int height, int width,
                      std::span<const double> features, std::span<const Box> boxes,
                      std::span<double> output) {
  const int bins = cfg.grid * cfg.grid;
  const std::size_t plane_size = static_cast<std::size_t>(height) * width;
  int n_degenerate = 0;
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    const Box& b = boxes[n];
    const bool flat = !(b[2] > b[0]) || !(b[3] > b[1]);
    n_degenerate += flat ? 1 : 0;
    for (int d = 0; d < channels; ++d) {
      auto plane = features.subspan(d * plane_size, plane_size);
      for (int py = 0; py < cfg.grid; ++py) {
        for (int px = 0; px < cfg.grid; ++px) {
          double value = 0.0;
          if (flat) {
            const int cy = nearest_cell(0.5 * (b[1] + b[3]), cfg.stride, height);
            const int cx = nearest_cell(0.5 * (b[0] + b[2]), cfg.stride, width);
            value = plane[cy * width + cx];
          } else {
            for (int sy = 0; sy < cfg.sampling; ++sy) {
              for (int sx = 0; sx < cfg.sampling; ++sx) {
                const double y = b[1] + (py + (sy + 0.5) / cfg.sampling) * (b[3] - b[1]) / cfg.grid;
                const double x = b[0] + (px + (sx + 0.5) / cfg.sampling) * (b[2] - b[0]) / cfg.grid;
                value += sample_bilinear(plane, height, width, y / cfg.stride - 0.5, x / cfg.stride - 0.5);
              }
            }
            value /= cfg.sampling * cfg.sampling;
          }
          output[(n * channels + d) * bins + py * cfg.grid + px] = value;
        }
      }
    }
  }
  return n_degenerate;
}

void roi_align_backward(const RoiAlignConfig& cfg, int channels, int height, int width,
                        std::span<const Box> boxes, std::span<const double> grad_output,
                        std::span<double> grad_features) {
  // Adjoint of the forward map, built column by column from unit impulses.
  const std::size_t plane_size = static_cast<std::size_t>(height) * width;
  const int bins = cfg.grid * cfg.grid;
  std::vector<double> unit(plane_size, 0.0), pooled(static_cast<std::size_t>(bins));
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    for (std::size_t cell = 0; cell < plane_size; ++cell) {
      unit[cell] = 1.0;
      reference::roi_align_forward(cfg, 1, height, width, unit, boxes.subspan(n, 1), pooled);
      unit[cell] = 0.0;
      for (int d = 0; d < channels; ++d) {
        double acc = 0.0;
        for (int bin = 0; bin < bins; ++bin) {
          acc += pooled[bin] * grad_output[(n * channels + d) * bins + bin];
        }
        grad_features[d * plane_size + cell] += acc;
      }
    }
  }
}

}  // namespace reference
}  // namespace mdbank::kernels
