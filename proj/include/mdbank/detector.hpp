#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdbank/boxes.hpp"
#include "mdbank/kernels.hpp"
#include "mdbank/params.hpp"
#include "mdbank/rng.hpp"
#include "mdbank/synthdata.hpp"
#include "mdbank/tensor.hpp"

namespace mdbank {

/// Architecture and sampling settings of the two-stage detector.
struct DetectorConfig {
  int num_classes = 3;
  std::vector<int> backbone_channels{16, 32, 64, 64};
  std::vector<int> backbone_strides{2, 2, 2, 1};
  int rpn_channels = 64;
  double anchor_size = 28.0;
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  int pool_grid = 4;
  int pool_sampling = 2;
  int head_hidden = 128;

  double rpn_nms_iou = 0.7;
  int train_proposals = 64;    // post-NMS proposals for source training
  int test_proposals = 100;    // post-NMS proposals at inference
  int rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  int roi_batch = 48;
  double roi_foreground_fraction = 0.25;
  double roi_foreground_iou = 0.5;
  int max_detections = 100;

  int stride() const;
  int feature_dim() const { return backbone_channels.back(); }
  int pooled_dim() const { return feature_dim() * pool_grid * pool_grid; }
  int num_anchors() const { return static_cast<int>(aspect_ratios.size()); }
  int background_index() const { return num_classes; }  // class k (1-based) lives at k-1
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

class DetectorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// D×h×w feature tensor plus the geometry of the image it came from.
struct FeatureMap {
  Tensor data;
  int stride = 8;
  int image_height = 0;
  int image_width = 0;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

struct RegionBatch {
  std::vector<Box> boxes;
  std::vector<double> objectness;
  Tensor features;  // N×pooled_dim, empty until pooled

  int size() const { return static_cast<int>(boxes.size()); }
};

struct HeadOutput {
  Tensor class_logits;  // N×(C+1)
  Tensor class_probs;   // N×(C+1), background last
  Tensor box_deltas;    // N×C×4
  int size() const { return class_probs.empty() ? 0 : class_probs.dim(0); }
};

struct RpnOutput {
  Tensor objectness_logits;  // A×h×w
  Tensor deltas;             // 4A×h×w
};

struct Detection {
  int class_id = 0;
  Box box{};
  double score = 0;
  bool operator==(const Detection&) const = default;
};

// Activations retained for the backward pass.
struct BackboneTrace {
  std::vector<Tensor> activations;  // input image followed by each stage output
  std::vector<kernels::ConvGeometry> geometry;
};

struct RpnTrace {
  Tensor hidden;
  kernels::ConvGeometry conv, cls, bbox;
};

struct HeadTrace {
  Tensor input, hidden1, hidden2;
};

struct AnchorTargets {
  std::vector<int> sampled;          // anchor indices contributing to objectness
  std::vector<double> labels;        // 1 foreground / 0 background per sampled anchor
  std::vector<int> positives;        // anchor indices contributing to box regression
  std::vector<BoxDelta> deltas;      // regression targets for positives
};

struct RoiTargets {
  std::vector<Box> rois;
  std::vector<int> labels;           // head class index; background_index() for background
  std::vector<BoxDelta> deltas;      // regression target per roi (unused for background)
};

/// The four detection loss components together with gradients with respect
/// to the raw network outputs they were computed from.
struct DetectionLoss {
  double rpn_objectness = 0;
  double rpn_box = 0;
  double head_class = 0;
  double head_box = 0;
  Tensor grad_objectness_logits;
  Tensor grad_rpn_deltas;
  Tensor grad_class_logits;
  Tensor grad_box_deltas;

  double total() const { return rpn_objectness + rpn_box + head_class + head_box; }
};

inline constexpr BoxDelta kRpnBoxWeights{1.0, 1.0, 1.0, 1.0};
inline constexpr BoxDelta kHeadBoxWeights{10.0, 10.0, 5.0, 5.0};

class Detector {
 public:
  explicit Detector(DetectorConfig config = {});
  const DetectorConfig& config() const { return config_; }

  ParamStore init_params(std::uint64_t seed) const;
  /// Throws DetectorError unless `params` has exactly this detector's layout.
  void check_params(const ParamStore& params) const;

  // Inference-mode forward passes; all are pure functions of their inputs.
  FeatureMap extract_features(const ParamStore& params, const Tensor& image) const;
  RpnOutput rpn(const ParamStore& params, const FeatureMap& features) const;
  RegionBatch propose_regions(const ParamStore& params, const FeatureMap& features, int k_top) const;
  RegionBatch proposals_from(const RpnOutput& rpn_out, const FeatureMap& features, int k_top) const;
  Tensor pool_region_features(const FeatureMap& features, std::span<const Box> boxes) const;
  HeadOutput rcnn_head(const ParamStore& params, const Tensor& region_features) const;
  std::vector<Detection> detect(const ParamStore& params, const Tensor& image, double score_thresh,
                                double nms_iou) const;
  /// Final stage of detect() on a fixed proposal set.
  std::vector<Detection> detect_on_proposals(const ParamStore& params, const FeatureMap& features,
                                             std::span<const Box> proposals, double score_thresh,
                                             double nms_iou) const;

  std::vector<Box> anchors(int height, int width) const;

  // Training-mode passes. Backward functions accumulate into `grads`.
  FeatureMap backbone_forward(const ParamStore& params, const Tensor& image, BackboneTrace& trace) const;
  void backbone_backward(const ParamStore& params, const BackboneTrace& trace, const Tensor& grad_features,
                         ParamStore& grads, Tensor* grad_image = nullptr) const;
  RpnOutput rpn_forward(const ParamStore& params, const FeatureMap& features, RpnTrace& trace) const;
  void rpn_backward(const ParamStore& params, const FeatureMap& features, const RpnTrace& trace,
                    const Tensor& grad_logits, const Tensor& grad_deltas, ParamStore& grads,
                    Tensor& grad_features) const;
  HeadOutput head_forward(const ParamStore& params, const Tensor& region_features, HeadTrace& trace) const;
  /// Returns the gradient with respect to the region features.
  Tensor head_backward(const ParamStore& params, const HeadTrace& trace, const Tensor& grad_class_logits,
                       const Tensor& grad_box_deltas, ParamStore& grads) const;
  void pool_backward(const FeatureMap& features, std::span<const Box> boxes, const Tensor& grad_pooled,
                     Tensor& grad_features) const;

  // Target assignment for the supervised loss.
  AnchorTargets assign_anchor_targets(const std::vector<Box>& anchors,
                                      const std::vector<synth::BoxAnnotation>& gt, Rng& rng) const;
  RoiTargets sample_rois(const std::vector<Box>& proposals, const std::vector<synth::BoxAnnotation>& gt,
                         Rng& rng) const;

 private:
  kernels::RoiAlignConfig roi_config() const;

  DetectorConfig config_;
};

/// Class index per region via IoU >= threshold against ground truth; regions
/// matching nothing get the background index.
std::vector<int> match_region_labels(std::span<const Box> regions, const std::vector<synth::BoxAnnotation>& gt,
                                     double iou_threshold, int background_index);

/// Row-wise softmax.
Tensor softmax_rows(const Tensor& logits);
/// Pulls a gradient with respect to probabilities back to logits.
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs);

/// Supervised objective. Throws DetectorError naming the component if any
/// term is not finite.
DetectionLoss detection_loss(const RpnOutput& rpn_out, const AnchorTargets& anchor_targets,
                             const HeadOutput& head_out, const RoiTargets& roi_targets);

}  // namespace mdbank
