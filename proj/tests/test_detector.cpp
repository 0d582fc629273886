#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mdbank/detector.hpp"
#include "mdbank/trainer.hpp"
#include "test_util.hpp"

using namespace mdbank;
using testutil::fill_normal;

namespace {

Tensor random_image(int h, int w, std::uint64_t seed) {
  Tensor img({3, h, w});
  testutil::fill_uniform(img, seed, 0.0, 1.0);
  return img;
}

synth::ImageSample scene(std::uint64_t seed) {
  return synth::render_scene(synth::random_scene(seed, 96, 4), synth::Domain::source);
}

// Weighted sum of every network output for fixed anchor and RoI targets, plus
// its gradient with respect to all parameters through the full backward chain.
struct FixedTargets {
  AnchorTargets anchors;
  RoiTargets rois;
};

double whole_loss(const Detector& det, const ParamStore& p, const Tensor& image, const FixedTargets& t,
                  ParamStore* grads) {
  BackboneTrace bt;
  const FeatureMap fm = det.backbone_forward(p, image, bt);
  RpnTrace rt;
  const RpnOutput rpn = det.rpn_forward(p, fm, rt);
  const Tensor pooled = det.pool_region_features(fm, t.rois.rois);
  HeadTrace ht;
  const HeadOutput head = det.head_forward(p, pooled, ht);
  const DetectionLoss loss = detection_loss(rpn, t.anchors, head, t.rois);
  if (grads) {
    Tensor grad_features(fm.data.shape());
    const Tensor grad_pooled = det.head_backward(p, ht, loss.grad_class_logits, loss.grad_box_deltas, *grads);
    det.pool_backward(fm, t.rois.rois, grad_pooled, grad_features);
    det.rpn_backward(p, fm, rt, loss.grad_objectness_logits, loss.grad_rpn_deltas, *grads, grad_features);
    det.backbone_backward(p, bt, grad_features, *grads);
  }
  return loss.total();
}

}  // namespace

TEST_CASE("backbone output shapes") {
  const Detector det;
  const ParamStore p = det.init_params(1);
  det.check_params(p);
  CHECK(det.config().stride() == 8);
  const FeatureMap f96 = det.extract_features(p, random_image(96, 96, 1));
  CHECK(f96.data.shape() == std::vector<int>{64, 12, 12});
  const FeatureMap f100 = det.extract_features(p, random_image(100, 100, 2));
  CHECK(f100.height() == 13);
  CHECK(f100.width() == 13);
  CHECK_THROWS_AS(det.extract_features(p, random_image(7, 7, 3)), DetectorError);
  CHECK_THROWS_AS(det.extract_features(p, Tensor({1, 96, 96})), DetectorError);
}

TEST_CASE("parameter layout checks") {
  const Detector det;
  ParamStore p = det.init_params(1);
  ParamStore extra = p;
  extra.add("head/extra", {1});
  CHECK_THROWS_AS(det.check_params(extra), DetectorError);
  ParamStore wrong;
  for (const auto& [name, t] : p) wrong.add(name, name == "head/cls/weight" ? std::vector<int>{5, 128} : t.shape());
  CHECK_THROWS_AS(det.check_params(wrong), DetectorError);
  CHECK(p.get("head/cls/weight").shape() == std::vector<int>{4, 128});
  CHECK(p.get("head/bbox/weight").shape() == std::vector<int>{12, 128});
  CHECK(det.init_params(1).get("rpn/conv/weight").values() == p.get("rpn/conv/weight").values());
}

TEST_CASE("backbone gradient matches finite differences") {
  DetectorConfig cfg;
  cfg.backbone_channels = {4, 6};
  cfg.backbone_strides = {2, 1};
  const Detector det(cfg);
  ParamStore p = det.init_params(2);
  Tensor image = random_image(12, 12, 4);
  BackboneTrace trace;
  const FeatureMap fm = det.backbone_forward(p, image, trace);
  Tensor probe(fm.data.shape());
  fill_normal(probe, 9);
  ParamStore grads = p.zeros_like();
  Tensor grad_image;
  det.backbone_backward(p, trace, probe, grads, &grad_image);
  const auto objective = [&] { return testutil::dot(det.extract_features(p, image).data, probe); };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const std::string name : {"backbone/conv1/weight", "backbone/conv2/weight", "backbone/conv2/bias"}) {
      Tensor dir(p.get(name).shape());
      fill_normal(dir, 100 + seed);
      CHECK(testutil::rel_err(testutil::directional_fd(p.get(name), dir, objective),
                              testutil::dot(grads.get(name), dir)) < 1e-5);
    }
    Tensor dir(image.shape());
    fill_normal(dir, 200 + seed);
    CHECK(testutil::rel_err(testutil::directional_fd(image, dir, objective), testutil::dot(grad_image, dir)) < 1e-5);
  }
  // Every stage must have been probed.
  for (const auto& name : p.names()) {
    if (name.starts_with("backbone/")) CHECK(std::fabs(testutil::dot(grads.get(name), grads.get(name))) > 0);
  }
}

TEST_CASE("region proposals") {
  const Detector det;
  const ParamStore p = det.init_params(3);
  const FeatureMap fm = det.extract_features(p, scene(1).pixels);
  CHECK(det.anchors(12, 12).size() == 12u * 12u * 3u);
  const RegionBatch one = det.propose_regions(p, fm, 1);
  CHECK(one.size() == 1);
  const RegionBatch many = det.propose_regions(p, fm, 100);
  CHECK(many.size() <= 100);
  CHECK(many.size() > 1);
  CHECK(many.boxes.front() == one.boxes.front());
  for (int i = 0; i < many.size(); ++i) {
    const Box& b = many.boxes[i];
    CHECK(b[0] >= 0);
    CHECK(b[1] >= 0);
    CHECK(b[2] <= 96);
    CHECK(b[3] <= 96);
    CHECK(b[2] > b[0]);
    CHECK(b[3] > b[1]);
    if (i > 0) CHECK(many.objectness[i] <= many.objectness[i - 1]);
  }
  CHECK_THROWS_AS(det.propose_regions(p, fm, 0), DetectorError);
}

TEST_CASE("region pooling") {
  const Detector det;
  FeatureMap fm{Tensor({64, 12, 12}), 8, 96, 96};
  for (int c = 0; c < 64; ++c) {
    for (int i = 0; i < 144; ++i) fm.data[c * 144 + i] = 0.25 * c - 3.0;
  }
  const std::vector<Box> boxes{{4, 4, 40, 40}, {10.5, 20.25, 70, 33}, {0, 0, 96, 96}};
  const Tensor pooled = det.pool_region_features(fm, boxes);
  CHECK(pooled.shape() == std::vector<int>{3, 1024});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 64; ++c) {
      for (int k = 0; k < 16; ++k) CHECK(pooled.at(r, c * 16 + k) == doctest::Approx(0.25 * c - 3.0).epsilon(1e-12));
    }
  }
  CHECK(det.pool_region_features(fm, {}).shape() == std::vector<int>{0, 1024});

  fill_normal(fm.data, 5);
  CHECK(det.pool_region_features(fm, boxes).values() == det.pool_region_features(fm, boxes).values());

  Tensor probe({3, 1024});
  fill_normal(probe, 6);
  Tensor grad(fm.data.shape());
  det.pool_backward(fm, boxes, probe, grad);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor dir(fm.data.shape());
    fill_normal(dir, 300 + seed);
    const auto objective = [&] { return testutil::dot(det.pool_region_features(fm, boxes), probe); };
    CHECK(testutil::rel_err(testutil::directional_fd(fm.data, dir, objective), testutil::dot(grad, dir)) < 1e-6);
  }
}

TEST_CASE("detection head") {
  const Detector det;
  ParamStore p = det.init_params(4);
  Tensor feats({7, 1024});
  fill_normal(feats, 7);
  const HeadOutput out = det.rcnn_head(p, feats);
  CHECK(out.class_probs.shape() == std::vector<int>{7, 4});
  CHECK(out.box_deltas.shape() == std::vector<int>{7, 3, 4});
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int c = 0; c < 4; ++c) s += out.class_probs.at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  p.get("head/cls/weight").fill(0);
  p.get("head/cls/bias").fill(0);
  p.get("head/bbox/weight").fill(0);
  p.get("head/bbox/bias").fill(0);
  const HeadOutput flat = det.rcnn_head(p, feats);
  for (double v : flat.class_probs.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  for (double v : flat.box_deltas.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(det.rcnn_head(p, Tensor({2, 100})), DetectorError);
}

TEST_CASE("detection loss reference values") {
  // Two anchors (A=1 on a 1×2 map), two RoIs with one foreground class.
  RpnOutput rpn{Tensor({1, 1, 2}), Tensor({4, 1, 2})};
  rpn.deltas[3 * 2 + 0] = 0.2;  // dh of anchor 0
  AnchorTargets at;
  at.sampled = {0, 1};
  at.labels = {1.0, 0.0};
  at.positives = {0};
  at.deltas = {BoxDelta{0.1, 0, 0, 0}};

  HeadOutput head;
  head.class_logits = Tensor({2, 2});
  head.class_logits.values() = {2.0, 0.0, 0.0, 1.0};
  head.class_probs = softmax_rows(head.class_logits);
  head.box_deltas = Tensor({2, 1, 4});
  head.box_deltas.values() = {0.5, -2.0, 0.0, 0.25, 9, 9, 9, 9};
  RoiTargets rt;
  rt.rois = {Box{0, 0, 10, 10}, Box{0, 0, 5, 5}};
  rt.labels = {0, 1};
  rt.deltas = {BoxDelta{0, 0, 0, 0}, BoxDelta{0, 0, 0, 0}};

  const DetectionLoss l = detection_loss(rpn, at, head, rt);
  CHECK(l.rpn_objectness == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  // smooth-L1 with beta 1/9: 0.5 * 0.01 * 9 + (0.2 - 0.5 / 9)
  CHECK(l.rpn_box == doctest::Approx(0.045 + 0.2 - 0.5 / 9).epsilon(1e-14));
  CHECK(l.head_class == doctest::Approx(0.5 * (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(-1.0)))).epsilon(1e-14));
  CHECK(l.head_box == doctest::Approx(0.125 + 1.5 + 0.0 + 0.03125).epsilon(1e-14));
  // Background rows never receive a box gradient.
  for (int j = 0; j < 4; ++j) CHECK(l.grad_box_deltas.at(1, 0, j) == 0.0);
  CHECK(l.grad_class_logits.at(0, 0) == doctest::Approx(0.5 * (head.class_probs.at(0, 0) - 1.0)));
}

TEST_CASE("detection loss edge cases") {
  const Detector det;
  const ParamStore p = det.init_params(5);
  const auto img = scene(2);
  const FeatureMap fm = det.extract_features(p, img.pixels);
  const RpnOutput rpn = det.rpn(p, fm);
  const auto anchors = det.anchors(fm.height(), fm.width());

  SUBCASE("empty ground truth leaves only background terms") {
    Rng rng(1);
    const AnchorTargets at = det.assign_anchor_targets(anchors, {}, rng);
    CHECK(at.positives.empty());
    CHECK(at.sampled.size() == 64u);
    const RoiTargets rt = det.sample_rois(det.proposals_from(rpn, fm, 64).boxes, {}, rng);
    for (int y : rt.labels) CHECK(y == 3);
    HeadOutput head = det.rcnn_head(p, det.pool_region_features(fm, rt.rois));
    const DetectionLoss l = detection_loss(rpn, at, head, rt);
    CHECK(l.rpn_box == 0.0);
    CHECK(l.head_box == 0.0);
    CHECK(l.rpn_objectness > 0);
    CHECK(l.head_class > 0);
  }
  SUBCASE("perfect predictions give near-zero head loss") {
    Rng rng(2);
    const RoiTargets rt = det.sample_rois(det.proposals_from(rpn, fm, 64).boxes, *img.annotations, rng);
    const int n = static_cast<int>(rt.rois.size());
    HeadOutput head;
    head.class_logits = Tensor({n, 4}, -30.0);
    head.box_deltas = Tensor({n, 3, 4});
    for (int r = 0; r < n; ++r) {
      head.class_logits.at(r, rt.labels[r]) = 30.0;
      if (rt.labels[r] < 3) {
        for (int j = 0; j < 4; ++j) head.box_deltas.at(r, rt.labels[r], j) = rt.deltas[r][j];
      }
    }
    head.class_probs = softmax_rows(head.class_logits);
    const DetectionLoss l = detection_loss(rpn, {}, head, rt);
    CHECK(l.head_class < 1e-20);
    CHECK(l.head_box == 0.0);
  }
  SUBCASE("non-finite outputs are reported by component") {
    HeadOutput head;
    head.class_logits = Tensor({1, 4});
    head.class_logits[0] = std::numeric_limits<double>::quiet_NaN();
    head.class_probs = softmax_rows(head.class_logits);
    head.box_deltas = Tensor({1, 3, 4});
    RoiTargets rt;
    rt.rois = {Box{0, 0, 4, 4}};
    rt.labels = {3};
    rt.deltas = {BoxDelta{}};
    try {
      detection_loss(rpn, {}, head, rt);
      FAIL("expected DetectorError");
    } catch (const DetectorError& e) {
      CHECK(std::string(e.what()).find("head_class") != std::string::npos);
    }
  }
}

TEST_CASE("sampled targets respect the batch sizes") {
  const Detector det;
  const auto img = scene(3);
  Rng rng(4);
  const AnchorTargets at = det.assign_anchor_targets(det.anchors(12, 12), *img.annotations, rng);
  CHECK(at.sampled.size() <= 64u);
  CHECK(at.positives.size() <= 32u);
  CHECK(!at.positives.empty());  // every object gets at least its best anchor
  const RoiTargets rt = det.sample_rois({}, *img.annotations, rng);
  CHECK(rt.rois.size() == img.annotations->size());  // ground truth boxes are always candidates
  for (std::size_t i = 0; i < rt.rois.size(); ++i) {
    for (double d : rt.deltas[i]) CHECK(d == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("whole loss gradient matches finite differences") {
  DetectorConfig cfg;
  cfg.backbone_channels = {8, 8, 8, 8};
  cfg.rpn_channels = 8;
  cfg.head_hidden = 16;
  const Detector det(cfg);
  ParamStore p = det.init_params(6);
  // Larger head weights so the class and box terms carry real gradient.
  Rng init(11);
  init_normal(p.get("head/cls/weight"), 0.3, init);
  init_normal(p.get("head/bbox/weight"), 0.3, init);
  init_normal(p.get("rpn/bbox/weight"), 0.3, init);
  const auto img = synth::render_scene(synth::random_scene(7, 48, 2), synth::Domain::source);
  const FeatureMap fm = det.extract_features(p, img.pixels);
  Rng rng(3);
  FixedTargets t;
  t.anchors = det.assign_anchor_targets(det.anchors(fm.height(), fm.width()), *img.annotations, rng);
  t.rois = det.sample_rois(det.propose_regions(p, fm, 16).boxes, *img.annotations, rng);
  ParamStore grads = p.zeros_like();
  whole_loss(det, p, img.pixels, t, &grads);
  const auto objective = [&] { return whole_loss(det, p, img.pixels, t, nullptr); };
  int checked = 0;
  for (const auto& name : p.names()) {
    Tensor dir(p.get(name).shape());
    fill_normal(dir, 400 + checked++);
    const double fd = testutil::directional_fd(p.get(name), dir, objective);
    const double an = testutil::dot(grads.get(name), dir);
    INFO(name);
    CHECK(testutil::rel_err(fd, an) < 1e-4);
  }
  CHECK(checked == static_cast<int>(p.size()));
}

TEST_CASE("detect") {
  const Detector det;
  const ParamStore p = det.init_params(8);
  const auto img = scene(4);
  CHECK(det.detect(p, img.pixels, 1.0, 0.5).empty());
  CHECK_THROWS_AS(det.detect(p, img.pixels, -0.1, 0.5), DetectorError);
  CHECK_THROWS_AS(det.detect(p, img.pixels, 0.5, 1.5), DetectorError);

  const FeatureMap fm = det.extract_features(p, img.pixels);
  std::vector<Box> proposals = det.propose_regions(p, fm, 50).boxes;
  const auto base = det.detect_on_proposals(p, fm, proposals, 0.0, 0.5);
  CHECK(!base.empty());
  CHECK(static_cast<int>(base.size()) <= det.config().max_detections);
  std::reverse(proposals.begin(), proposals.end());
  std::rotate(proposals.begin(), proposals.begin() + 7, proposals.end());
  CHECK(det.detect_on_proposals(p, fm, proposals, 0.0, 0.5) == base);
  for (const auto& d : base) {
    CHECK(d.class_id >= 1);
    CHECK(d.class_id <= 3);
  }
}

TEST_CASE("a few hundred steps overfit a single image") {
  TrainConfig cfg;
  cfg.variant = Variant::faster_only;
  cfg.lr = 0.01;
  cfg.seed = 3;
  const Trainer trainer(cfg);
  TrainState state = trainer.init_state();
  const auto img = synth::render_scene(synth::random_scene(21, 96, 2), synth::Domain::source);
  double first = 0, last = 0;
  for (int i = 0; i < 400; ++i) {
    const double l = trainer.train_step(state, img, nullptr).l_det;
    if (i == 0) first = l;
    last = l;
  }
  CHECK(last < 0.5 * first);
  const auto dets = trainer.detector().detect(state.student, img.pixels, 0.3, 0.5);
  for (const auto& gt : *img.annotations) {
    double best = 0;
    for (const auto& d : dets) {
      if (d.class_id == gt.class_id) best = std::max(best, iou(d.box, gt.box));
    }
    INFO("class " << gt.class_id);
    CHECK(best >= 0.5);
  }
}
