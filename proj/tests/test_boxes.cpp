#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mdbank/boxes.hpp"
#include "mdbank/rng.hpp"

using namespace mdbank;

TEST_CASE("iou basics") {
  CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == doctest::Approx(1.0));
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  CHECK(iou({0, 0, 10, 10}, {5, 0, 15, 10}) == doctest::Approx(50.0 / 150.0));
  CHECK(iou({0, 0, 0, 10}, {0, 0, 0, 10}) == 0.0);
}

TEST_CASE("encode/decode round trip") {
  const BoxDelta w{10, 10, 5, 5};
  const Box ref{10, 12, 40, 50}, tgt{14, 9, 35, 61};
  const Box back = decode_box(ref, encode_box(ref, tgt, w), w);
  for (int i = 0; i < 4; ++i) CHECK(back[i] == doctest::Approx(tgt[i]).epsilon(1e-12));
  const BoxDelta zero = encode_box(ref, ref, w);
  for (double v : zero) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("decode clamps extreme size deltas") {
  const Box b = decode_box({0, 0, 10, 10}, {0, 0, 100, 100}, {1, 1, 1, 1});
  CHECK(std::isfinite(b[2]));
  CHECK(box_width(b) == doctest::Approx(10.0 * 1000.0 / 16.0));
}

TEST_CASE("clip keeps boxes inside the image") {
  const Box c = clip_box({-5, 3, 120, 200}, 96, 96);
  CHECK(c == Box{0, 3, 96, 96});
}

TEST_CASE("nms keeps one of two identical boxes and is permutation invariant") {
  std::vector<Box> boxes{{0, 0, 10, 10}, {0, 0, 10, 10}, {50, 50, 60, 60}, {1, 1, 11, 11}, {52, 50, 62, 60}};
  std::vector<double> scores{0.9, 0.9, 0.8, 0.7, 0.8};
  const auto keep = nms(boxes, scores, 0.5);
  REQUIRE(keep.size() == 2);

  std::vector<int> perm(boxes.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Box> pb;
    std::vector<double> ps;
    for (int i : perm) {
      pb.push_back(boxes[i]);
      ps.push_back(scores[i]);
    }
    const auto k2 = nms(pb, ps, 0.5);
    REQUIRE(k2.size() == keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) {
      CHECK(pb[k2[i]] == boxes[keep[i]]);
    }
  }
  CHECK(nms(boxes, scores, 0.5, 1).size() == 1);
}
