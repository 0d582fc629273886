#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "mdbank/detector.hpp"
#include "mdbank/params.hpp"

namespace mdbank {

inline constexpr int kDefaultTargetProposals = 512;

class TeacherError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TeacherState {
  ParamStore params;
  double alpha = 0.99;
  bool initialized_from_student = false;
};

/// Teacher initialized as a copy of the student.
TeacherState make_teacher(const ParamStore& student, double alpha);

/// teacher <- alpha * teacher + (1 - alpha) * student, for every parameter.
void ema_update(TeacherState& teacher, const ParamStore& student);

/// Teacher proposals r^T with the teacher head's probabilities and deltas on them.
struct PseudoBatch {
  std::vector<Box> proposals;  // K×4
  Tensor teacher_probs;        // K×(C+1)
  Tensor teacher_deltas;       // K×C×4
  int size() const { return static_cast<int>(proposals.size()); }
};

/// Runs the teacher on the un-augmented target image. K = min(k_top, available).
PseudoBatch teacher_pseudo_labels(const Detector& detector, const TeacherState& teacher, const Tensor& target_image,
                                  int k_top = kDefaultTargetProposals);

/// Student head evaluated on the teacher's proposals, same boxes in the same order.
HeadOutput student_on_shared_proposals(const Detector& detector, const ParamStore& student,
                                       const Tensor& augmented_image, std::span<const Box> proposals);

struct ConsistencyLoss {
  double value = 0;
  double class_term = 0;
  double box_term = 0;
  Tensor grad_student_probs;   // K×(C+1)
  Tensor grad_student_deltas;  // K×C×4
};

/// L2 norm of the entropy-weighted teacher/student discrepancy. The teacher
/// side is a constant: gradients are returned for the student only. The class
/// c box residual (4 values) is weighted by weights[r][c].
ConsistencyLoss consistency_loss(const Tensor& teacher_probs, const Tensor& teacher_deltas,
                                 const Tensor& student_probs, const Tensor& student_deltas, const Tensor& weights);

}  // namespace mdbank
