#include <doctest.h>

#include "mdbank/kernels.hpp"
#include "mdbank/parallel.hpp"
#include "test_util.hpp"

using namespace mdbank;
using namespace mdbank::kernels;
using testutil::fill_normal;
using testutil::max_abs_diff;

TEST_CASE("conv forward/backward agree with the serial reference") {
  for (auto [stride, kernel, pad] : {std::tuple{1, 3, 1}, {2, 3, 1}, {1, 1, 0}}) {
    ConvGeometry g{5, 11, 9, 7, kernel, stride, pad};
    Tensor in({g.in_channels, g.in_height, g.in_width}), w({g.out_channels, g.patch()}), b({g.out_channels});
    fill_normal(in, 1);
    fill_normal(w, 2);
    fill_normal(b, 3);
    Tensor y({g.out_channels, g.out_height(), g.out_width()}), y_ref = y;
    conv2d_forward(g, in.span(), w.span(), b.span(), y.span());
    reference::conv2d_forward(g, in.span(), w.span(), b.span(), y_ref.span());
    CHECK(max_abs_diff(y.span(), y_ref.span()) < 1e-12);

    Tensor gy(y.shape());
    fill_normal(gy, 4);
    Tensor gw(w.shape()), gb(b.shape()), gx(in.shape());
    Tensor gw_ref = gw, gb_ref = gb, gx_ref = gx;
    conv2d_backward(g, in.span(), w.span(), gy.span(), gw.span(), gb.span(), gx.span());
    reference::conv2d_backward(g, in.span(), w.span(), gy.span(), gw_ref.span(), gb_ref.span(), gx_ref.span());
    CHECK(max_abs_diff(gw.span(), gw_ref.span()) < 1e-10);
    CHECK(max_abs_diff(gb.span(), gb_ref.span()) < 1e-10);
    CHECK(max_abs_diff(gx.span(), gx_ref.span()) < 1e-10);
  }
}

TEST_CASE("conv backward matches finite differences") {
  ConvGeometry g{3, 8, 8, 4, 3, 2, 1};
  Tensor in({3, 8, 8}), w({4, g.patch()}), b({4}), gy({4, g.out_height(), g.out_width()});
  fill_normal(in, 10);
  fill_normal(w, 11);
  fill_normal(b, 12);
  fill_normal(gy, 13);
  const auto loss = [&] {
    Tensor y(gy.shape());
    conv2d_forward(g, in.span(), w.span(), b.span(), y.span());
    return testutil::dot(y, gy);
  };
  Tensor gw(w.shape()), gb(b.shape()), gx(in.shape());
  conv2d_backward(g, in.span(), w.span(), gy.span(), gw.span(), gb.span(), gx.span());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor dir_x(in.shape()), dir_w(w.shape());
    fill_normal(dir_x, 100 + seed);
    fill_normal(dir_w, 200 + seed);
    CHECK(testutil::rel_err(testutil::directional_fd(in, dir_x, loss), testutil::dot(gx, dir_x)) < 1e-6);
    CHECK(testutil::rel_err(testutil::directional_fd(w, dir_w, loss), testutil::dot(gw, dir_w)) < 1e-6);
  }
}

TEST_CASE("linear forward/backward agree with the reference and finite differences") {
  const int n = 6, in_dim = 19, out_dim = 5;
  Tensor x({n, in_dim}), w({out_dim, in_dim}), b({out_dim}), gy({n, out_dim});
  fill_normal(x, 1);
  fill_normal(w, 2);
  fill_normal(b, 3);
  fill_normal(gy, 4);
  gy[3] = 0.0;  // exercise the zero-skip path
  Tensor y({n, out_dim}), y_ref = y;
  linear_forward(n, in_dim, out_dim, x.span(), w.span(), b.span(), y.span());
  reference::linear_forward(n, in_dim, out_dim, x.span(), w.span(), b.span(), y_ref.span());
  CHECK(max_abs_diff(y.span(), y_ref.span()) < 1e-12);

  Tensor gw(w.shape()), gb(b.shape()), gx(x.shape()), gw_ref = gw, gb_ref = gb, gx_ref = gx;
  linear_backward(n, in_dim, out_dim, x.span(), w.span(), gy.span(), gw.span(), gb.span(), gx.span());
  reference::linear_backward(n, in_dim, out_dim, x.span(), w.span(), gy.span(), gw_ref.span(), gb_ref.span(),
                             gx_ref.span());
  CHECK(max_abs_diff(gw.span(), gw_ref.span()) < 1e-12);
  CHECK(max_abs_diff(gb.span(), gb_ref.span()) < 1e-12);
  CHECK(max_abs_diff(gx.span(), gx_ref.span()) < 1e-12);

  const auto loss = [&] {
    Tensor out({n, out_dim});
    linear_forward(n, in_dim, out_dim, x.span(), w.span(), b.span(), out.span());
    return testutil::dot(out, gy);
  };
  Tensor dir(x.shape());
  fill_normal(dir, 9);
  CHECK(testutil::rel_err(testutil::directional_fd(x, dir, loss), testutil::dot(gx, dir)) < 1e-6);
}

TEST_CASE("roi align matches the reference, including degenerate boxes") {
  RoiAlignConfig cfg;
  const int d = 4, h = 12, w = 12;
  Tensor f({d, h, w});
  fill_normal(f, 5);
  std::vector<Box> boxes{{0, 0, 96, 96}, {10.5, 20.25, 50, 41}, {30, 30, 30, 60}, {-5, 80, 20, 120}};
  Tensor out({4, d * 16}), out_ref = out;
  const int deg = roi_align_forward(cfg, d, h, w, f.span(), boxes, out.span());
  const int deg_ref = reference::roi_align_forward(cfg, d, h, w, f.span(), boxes, out_ref.span());
  CHECK(deg == 1);
  CHECK(deg_ref == 1);
  CHECK(max_abs_diff(out.span(), out_ref.span()) < 1e-12);

  Tensor gy(out.shape());
  fill_normal(gy, 6);
  Tensor gf(f.shape()), gf_ref(f.shape());
  roi_align_backward(cfg, d, h, w, boxes, gy.span(), gf.span());
  reference::roi_align_backward(cfg, d, h, w, boxes, gy.span(), gf_ref.span());
  CHECK(max_abs_diff(gf.span(), gf_ref.span()) < 1e-12);
}

TEST_CASE("roi align gradient matches finite differences") {
  RoiAlignConfig cfg;
  const int d = 3, h = 12, w = 12;
  Tensor f({d, h, w});
  std::vector<Box> boxes{{4, 6, 70, 50}, {33.3, 12.7, 61.2, 88.9}};
  Tensor gy({2, d * 16});
  fill_normal(gy, 7);
  const auto loss = [&] {
    Tensor out(gy.shape());
    roi_align_forward(cfg, d, h, w, f.span(), boxes, out.span());
    return testutil::dot(out, gy);
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    fill_normal(f, 30 + seed);
    Tensor gf(f.shape()), dir(f.shape());
    roi_align_backward(cfg, d, h, w, boxes, gy.span(), gf.span());
    fill_normal(dir, 40 + seed);
    CHECK(testutil::rel_err(testutil::directional_fd(f, dir, loss), testutil::dot(gf, dir)) < 1e-6);
  }
}

TEST_CASE("kernels give identical bits for any thread count") {
  ConvGeometry g{8, 24, 24, 16, 3, 2, 1};
  Tensor in({8, 24, 24}), w({16, g.patch()}), b({16});
  fill_normal(in, 1);
  fill_normal(w, 2);
  fill_normal(b, 3);
  const int saved = max_threads();
  std::vector<Tensor> outs;
  for (int t : {1, 2, 3}) {
    set_threads(t);
    Tensor y({16, g.out_height(), g.out_width()});
    conv2d_forward(g, in.span(), w.span(), b.span(), y.span());
    outs.push_back(y);
  }
  set_threads(saved);
  CHECK(outs[0].values() == outs[1].values());
  CHECK(outs[0].values() == outs[2].values());
}
