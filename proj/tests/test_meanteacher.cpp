#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mdbank/meanteacher.hpp"
#include "test_util.hpp"

using namespace mdbank;
using testutil::fill_normal;

namespace {

ParamStore tiny_params(double value) {
  ParamStore p;
  p.add("a", {2, 3}).fill(value);
  p.add("b", {4}).fill(value);
  return p;
}

Tensor random_probs(int k, int cols, std::uint64_t seed) {
  Tensor t({k, cols});
  testutil::fill_uniform(t, seed, 0.05, 1.0);
  for (int r = 0; r < k; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += t.at(r, c);
    for (int c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

void zero_head(ParamStore& p) {
  p.get("head/cls/weight").fill(0.0);
  p.get("head/cls/bias").fill(0.0);
}

synth::ImageSample scene_image(std::uint64_t seed, int size = 96) {
  return synth::render_scene(synth::random_scene(seed, size, 4), synth::Domain::target);
}

}  // namespace

TEST_CASE("EMA update examples") {
  TeacherState t = make_teacher(tiny_params(0.0), 0.99);
  CHECK(t.initialized_from_student);
  ema_update(t, tiny_params(1.0));
  for (const auto& [_, v] : t.params) {
    for (double x : v.values()) CHECK(x == doctest::Approx(0.01).epsilon(1e-15));
  }
  TeacherState t0 = make_teacher(tiny_params(3.0), 0.0);
  const ParamStore s = tiny_params(-2.5);
  ema_update(t0, s);
  for (const auto& [name, v] : t0.params) CHECK(v.values() == s.get(name).values());
}

TEST_CASE("EMA is exact per element and leaves the student alone") {
  ParamStore teacher_p = tiny_params(0.0), student = tiny_params(0.0);
  for (auto& [_, v] : teacher_p) fill_normal(v, 1);
  for (auto& [_, v] : student) fill_normal(v, 2);
  TeacherState t = make_teacher(teacher_p, 0.9);
  const ParamStore before = t.params, student_before = student;
  ema_update(t, student);
  for (const auto& [name, v] : t.params) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(v[i] == 0.9 * before.get(name)[i] + (1.0 - 0.9) * student.get(name)[i]);
    }
    CHECK(student.get(name).values() == student_before.get(name).values());
  }
}

TEST_CASE("EMA contracts toward a frozen student by alpha per step") {
  ParamStore student = tiny_params(0.0);
  for (auto& [_, v] : student) fill_normal(v, 5);
  ParamStore start = tiny_params(0.0);
  for (auto& [_, v] : start) fill_normal(v, 6);
  TeacherState t = make_teacher(start, 0.95);
  const auto gap = [&] {
    double s = 0;
    for (const auto& [name, v] : t.params) {
      for (std::size_t i = 0; i < v.size(); ++i) s += std::pow(v[i] - student.get(name)[i], 2);
    }
    return std::sqrt(s);
  };
  double prev = gap();
  for (int step = 0; step < 100; ++step) {
    ema_update(t, student);
    const double now = gap();
    CHECK(std::fabs(now / prev - 0.95) <= 1e-9);
    prev = now;
  }
}

TEST_CASE("EMA errors") {
  CHECK_THROWS_AS(make_teacher(tiny_params(0), 1.0), TeacherError);
  CHECK_THROWS_AS(make_teacher(tiny_params(0), -0.1), TeacherError);
  TeacherState t = make_teacher(tiny_params(0), 0.5);
  ParamStore wrong_shape;
  wrong_shape.add("a", {3, 2});
  wrong_shape.add("b", {4});
  CHECK_THROWS_AS(ema_update(t, wrong_shape), TeacherError);
  ParamStore wrong_name;
  wrong_name.add("a", {2, 3});
  wrong_name.add("c", {4});
  CHECK_THROWS_AS(ema_update(t, wrong_name), TeacherError);
}

TEST_CASE("teacher pseudo labels") {
  const Detector det;
  ParamStore p = det.init_params(3);
  const auto img = scene_image(1);
  SUBCASE("zero head gives uniform probabilities") {
    zero_head(p);
    const PseudoBatch b = teacher_pseudo_labels(det, make_teacher(p, 0.99), img.pixels, 32);
    CHECK(b.size() == 32);
    for (double v : b.teacher_probs.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("deterministic") {
    const TeacherState t = make_teacher(p, 0.99);
    const PseudoBatch a = teacher_pseudo_labels(det, t, img.pixels, 64);
    const PseudoBatch b = teacher_pseudo_labels(det, t, img.pixels, 64);
    CHECK(a.proposals == b.proposals);
    CHECK(a.teacher_probs.values() == b.teacher_probs.values());
    CHECK(a.teacher_deltas.values() == b.teacher_deltas.values());
    CHECK(a.teacher_deltas.shape() == std::vector<int>{64, 3, 4});
  }
  SUBCASE("K never exceeds the cap and reaches it when enough anchors exist") {
    const TeacherState t = make_teacher(p, 0.99);
    const PseudoBatch small = teacher_pseudo_labels(det, t, img.pixels);
    CHECK(small.size() <= kDefaultTargetProposals);
    CHECK(small.size() <= 12 * 12 * 3);
    const auto big = scene_image(2, 192);
    const PseudoBatch large = teacher_pseudo_labels(det, t, big.pixels);
    CHECK(large.size() == kDefaultTargetProposals);
  }
}

TEST_CASE("student on shared proposals") {
  const Detector det;
  const ParamStore p = det.init_params(4);
  const auto img = scene_image(3);
  const TeacherState t = make_teacher(p, 0.99);
  const PseudoBatch b = teacher_pseudo_labels(det, t, img.pixels, 40);
  const HeadOutput s = student_on_shared_proposals(det, p, img.pixels, b.proposals);
  CHECK(s.class_probs.values() == b.teacher_probs.values());
  CHECK(s.box_deltas.values() == b.teacher_deltas.values());

  std::vector<int> perm(b.proposals.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[7]);
  std::vector<Box> permuted;
  for (int i : perm) permuted.push_back(b.proposals[i]);
  const HeadOutput sp = student_on_shared_proposals(det, p, img.pixels, permuted);
  for (std::size_t r = 0; r < perm.size(); ++r) {
    for (int c = 0; c < 4; ++c) CHECK(sp.class_probs.at(r, c) == s.class_probs.at(perm[r], c));
  }
}

TEST_CASE("consistency loss examples") {
  const Tensor pt = random_probs(5, 4, 1), ps = random_probs(5, 4, 2);
  Tensor bt({5, 3, 4}), bs({5, 3, 4});
  fill_normal(bt, 3);
  fill_normal(bs, 4);
  const Tensor ones({5, 4}, 1.0);
  CHECK(consistency_loss(pt, bt, pt, bt, ones).value == 0.0);
  CHECK(consistency_loss(pt, bt, ps, bs, Tensor({5, 4}, 0.0)).value == 0.0);

  // One region, one class: p^T=[1,0], p^S=[0,1], equal boxes, e=[ln2, ln2].
  Tensor p1({1, 2}), p2({1, 2}), b1({1, 1, 4}, 0.3), w({1, 2}, std::numbers::ln2);
  p1.values() = {1, 0};
  p2.values() = {0, 1};
  CHECK(consistency_loss(p1, b1, p2, b1, w).value == doctest::Approx(std::numbers::ln2 * std::sqrt(2.0)).epsilon(1e-15));

  const double forward = consistency_loss(pt, bt, ps, bs, ones).value;
  const double swapped = consistency_loss(ps, bs, pt, bt, ones).value;
  CHECK(forward == doctest::Approx(swapped).epsilon(1e-15));
  CHECK(forward > 0);
}

TEST_CASE("consistency loss weights the class-c box residual by the class-c weight") {
  Tensor p({1, 3}, 1.0 / 3), bt({1, 2, 4}, 0.0), bs({1, 2, 4}, 0.0), w({1, 3});
  w.values() = {0.5, 0.0, 0.7};  // background weight must not touch boxes
  for (int j = 0; j < 4; ++j) bs.at(0, 0, j) = 1.0;
  for (int j = 0; j < 4; ++j) bs.at(0, 1, j) = 5.0;
  const auto l = consistency_loss(p, bt, p, bs, w);
  CHECK(l.box_term == doctest::Approx(0.5 * 2.0).epsilon(1e-15));
}

TEST_CASE("consistency loss gradient matches finite differences") {
  const Tensor pt = random_probs(4, 4, 5);
  Tensor ps = random_probs(4, 4, 6);
  Tensor bt({4, 3, 4}), bs({4, 3, 4}), w({4, 4});
  fill_normal(bt, 7);
  fill_normal(bs, 8);
  testutil::fill_uniform(w, 9, 0.0, std::numbers::ln2);
  const auto l = consistency_loss(pt, bt, ps, bs, w);
  const auto value = [&] { return consistency_loss(pt, bt, ps, bs, w).value; };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor dp(ps.shape()), db(bs.shape());
    fill_normal(dp, 10 + seed);
    fill_normal(db, 20 + seed);
    CHECK(testutil::rel_err(testutil::directional_fd(ps, dp, value), testutil::dot(l.grad_student_probs, dp)) < 1e-6);
    CHECK(testutil::rel_err(testutil::directional_fd(bs, db, value), testutil::dot(l.grad_student_deltas, db)) < 1e-6);
  }
}

TEST_CASE("consistency loss errors") {
  const Tensor p = random_probs(2, 4, 1);
  const Tensor b({2, 3, 4});
  Tensor neg({2, 4}, 1.0);
  neg[3] = -0.1;
  CHECK_THROWS_AS(consistency_loss(p, b, p, b, neg), TeacherError);
  Tensor nan = p;
  nan[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(consistency_loss(p, b, nan, b, Tensor({2, 4}, 1.0)), TeacherError);
  CHECK_THROWS_AS(consistency_loss(p, b, random_probs(3, 4, 2), b, Tensor({2, 4}, 1.0)), TeacherError);
}
