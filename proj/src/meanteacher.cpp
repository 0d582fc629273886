#include "mdbank/meanteacher.hpp"

#include <cmath>

namespace mdbank {

TeacherState make_teacher(const ParamStore& student, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw TeacherError("EMA factor alpha must lie in [0,1)");
  return TeacherState{student, alpha, true};
}

void ema_update(TeacherState& teacher, const ParamStore& student) {
  if (teacher.params.size() != student.size()) throw TeacherError("teacher and student parameter sets differ");
  for (auto& [name, t] : teacher.params) {
    if (!student.contains(name)) throw TeacherError("student lacks parameter " + name);
    const Tensor& s = student.get(name);
    if (!t.same_shape(s)) throw TeacherError("shape mismatch for parameter " + name);
  }
  const double a = teacher.alpha;
  for (auto& [name, t] : teacher.params) {
    const Tensor& s = student.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = a * t[i] + (1.0 - a) * s[i];
  }
}

PseudoBatch teacher_pseudo_labels(const Detector& detector, const TeacherState& teacher, const Tensor& target_image,
                                  int k_top) {
  const FeatureMap features = detector.extract_features(teacher.params, target_image);
  const RegionBatch regions = detector.propose_regions(teacher.params, features, k_top);
  const HeadOutput head = detector.rcnn_head(teacher.params, detector.pool_region_features(features, regions.boxes));
  return PseudoBatch{regions.boxes, head.class_probs, head.box_deltas};
}

HeadOutput student_on_shared_proposals(const Detector& detector, const ParamStore& student,
                                       const Tensor& augmented_image, std::span<const Box> proposals) {
  const FeatureMap features = detector.extract_features(student, augmented_image);
  return detector.rcnn_head(student, detector.pool_region_features(features, proposals));
}

ConsistencyLoss consistency_loss(const Tensor& teacher_probs, const Tensor& teacher_deltas, const Tensor& student_probs,
                                 const Tensor& student_deltas, const Tensor& weights) {
  if (!teacher_probs.same_shape(student_probs) || !teacher_deltas.same_shape(student_deltas) ||
      !weights.same_shape(teacher_probs)) {
    throw TeacherError("consistency inputs have mismatched shapes");
  }
  for (double w : weights.values()) {
    if (std::isnan(w)) throw TeacherError("NaN consistency weight");
    if (w < 0) throw TeacherError("negative consistency weight");
  }
  for (const Tensor* t : {&teacher_probs, &teacher_deltas, &student_probs, &student_deltas}) {
    for (double v : t->values()) {
      if (std::isnan(v)) throw TeacherError("NaN in consistency inputs");
    }
  }
  ConsistencyLoss out;
  out.grad_student_probs = Tensor(student_probs.shape());
  out.grad_student_deltas = Tensor(student_deltas.shape());
  const int k = student_probs.empty() ? 0 : student_probs.dim(0);
  if (k == 0) return out;
  const int cols = student_probs.dim(1);
  const int classes = student_deltas.dim(1);

  double sq = 0.0;
  for (std::size_t i = 0; i < student_probs.size(); ++i) {
    const double r = weights[i] * (teacher_probs[i] - student_probs[i]);
    sq += r * r;
  }
  out.class_term = std::sqrt(sq);
  if (out.class_term > 0) {
    for (std::size_t i = 0; i < student_probs.size(); ++i) {
      const double w = weights[i];
      out.grad_student_probs[i] = -w * w * (teacher_probs[i] - student_probs[i]) / out.class_term;
    }
  }

  sq = 0.0;
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < classes; ++c) {
      const double w = weights[static_cast<std::size_t>(r) * cols + c];
      for (int j = 0; j < 4; ++j) {
        const double d = w * (teacher_deltas.at(r, c, j) - student_deltas.at(r, c, j));
        sq += d * d;
      }
    }
  }
  out.box_term = std::sqrt(sq);
  if (out.box_term > 0) {
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < classes; ++c) {
        const double w = weights[static_cast<std::size_t>(r) * cols + c];
        for (int j = 0; j < 4; ++j) {
          out.grad_student_deltas.at(r, c, j) =
              -w * w * (teacher_deltas.at(r, c, j) - student_deltas.at(r, c, j)) / out.box_term;
        }
      }
    }
  }
  out.value = out.class_term + out.box_term;
  return out;
}

}  // namespace mdbank
