#include "mdbank/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

namespace mdbank {
namespace {

using kernels::ConvGeometry;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
  const double a = std::abs(x);
  if (a < beta) return x / beta;
  return x > 0 ? 1.0 : -1.0;
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.values()) v = v > 0 ? v : 0.0;
}

void relu_mask(Tensor& grad, const Tensor& activation) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(activation[i] > 0)) grad[i] = 0.0;
  }
}

std::string stage_name(std::size_t i) { return "backbone/conv" + std::to_string(i + 1); }

Tensor linear(const ParamStore& p, const std::string& name, const Tensor& x) {
  const Tensor& w = p.get(name + "/weight");
  const int rows = x.empty() ? 0 : x.dim(0);
  Tensor y({rows, w.dim(0)});
  if (rows > 0) {
    kernels::linear_forward(rows, w.dim(1), w.dim(0), x.span(), w.span(), p.get(name + "/bias").span(), y.span());
  }
  return y;
}

// Returns grad wrt x.
Tensor linear_grad(const ParamStore& p, const std::string& name, const Tensor& x, const Tensor& grad_y,
                   ParamStore& grads) {
  const Tensor& w = p.get(name + "/weight");
  Tensor gx(x.shape());
  const int rows = x.empty() ? 0 : x.dim(0);
  if (rows > 0) {
    kernels::linear_backward(rows, w.dim(1), w.dim(0), x.span(), w.span(), grad_y.span(),
                             grads.get(name + "/weight").span(), grads.get(name + "/bias").span(), gx.span());
  }
  return gx;
}

Tensor conv(const ParamStore& p, const std::string& name, const ConvGeometry& g, const Tensor& x) {
  Tensor y({g.out_channels, g.out_height(), g.out_width()});
  kernels::conv2d_forward(g, x.span(), p.get(name + "/weight").span(), p.get(name + "/bias").span(), y.span());
  return y;
}

ConvGeometry geometry(int in_c, int h, int w, int out_c, int k, int stride) {
  return ConvGeometry{in_c, h, w, out_c, k, stride, k / 2};
}

}  // namespace

int DetectorConfig::stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"backbone_channels", c.backbone_channels},
       {"backbone_strides", c.backbone_strides},
       {"rpn_channels", c.rpn_channels},
       {"anchor_size", c.anchor_size},
       {"aspect_ratios", c.aspect_ratios},
       {"pool_grid", c.pool_grid},
       {"pool_sampling", c.pool_sampling},
       {"head_hidden", c.head_hidden},
       {"rpn_nms_iou", c.rpn_nms_iou},
       {"train_proposals", c.train_proposals},
       {"test_proposals", c.test_proposals},
       {"rpn_batch", c.rpn_batch},
       {"rpn_positive_fraction", c.rpn_positive_fraction},
       {"rpn_positive_iou", c.rpn_positive_iou},
       {"rpn_negative_iou", c.rpn_negative_iou},
       {"roi_batch", c.roi_batch},
       {"roi_foreground_fraction", c.roi_foreground_fraction},
       {"roi_foreground_iou", c.roi_foreground_iou},
       {"max_detections", c.max_detections}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  DetectorConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.backbone_strides = j.value("backbone_strides", d.backbone_strides);
  c.rpn_channels = j.value("rpn_channels", d.rpn_channels);
  c.anchor_size = j.value("anchor_size", d.anchor_size);
  c.aspect_ratios = j.value("aspect_ratios", d.aspect_ratios);
  c.pool_grid = j.value("pool_grid", d.pool_grid);
  c.pool_sampling = j.value("pool_sampling", d.pool_sampling);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.rpn_nms_iou = j.value("rpn_nms_iou", d.rpn_nms_iou);
  c.train_proposals = j.value("train_proposals", d.train_proposals);
  c.test_proposals = j.value("test_proposals", d.test_proposals);
  c.rpn_batch = j.value("rpn_batch", d.rpn_batch);
  c.rpn_positive_fraction = j.value("rpn_positive_fraction", d.rpn_positive_fraction);
  c.rpn_positive_iou = j.value("rpn_positive_iou", d.rpn_positive_iou);
  c.rpn_negative_iou = j.value("rpn_negative_iou", d.rpn_negative_iou);
  c.roi_batch = j.value("roi_batch", d.roi_batch);
  c.roi_foreground_fraction = j.value("roi_foreground_fraction", d.roi_foreground_fraction);
  c.roi_foreground_iou = j.value("roi_foreground_iou", d.roi_foreground_iou);
  c.max_detections = j.value("max_detections", d.max_detections);
}

Detector::Detector(DetectorConfig config) : config_(std::move(config)) {
  if (config_.backbone_channels.size() != config_.backbone_strides.size() || config_.backbone_channels.empty()) {
    throw DetectorError("backbone channel and stride lists must be non-empty and equal length");
  }
  if (config_.num_classes < 1) throw DetectorError("num_classes must be positive");
}

ParamStore Detector::init_params(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "detector-init"));
  ParamStore p;
  int in_c = 3;
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    const int out_c = config_.backbone_channels[i];
    init_he_normal(p.add(stage_name(i) + "/weight", {out_c, in_c * 9}), in_c * 9, rng);
    p.add(stage_name(i) + "/bias", {out_c});
    in_c = out_c;
  }
  const int d = config_.feature_dim(), r = config_.rpn_channels, a = config_.num_anchors();
  init_he_normal(p.add("rpn/conv/weight", {r, d * 9}), d * 9, rng);
  p.add("rpn/conv/bias", {r});
  init_normal(p.add("rpn/cls/weight", {a, r}), 0.01, rng);
  p.add("rpn/cls/bias", {a});
  init_normal(p.add("rpn/bbox/weight", {4 * a, r}), 0.01, rng);
  p.add("rpn/bbox/bias", {4 * a});
  const int h = config_.head_hidden, c = config_.num_classes;
  init_he_normal(p.add("head/fc1/weight", {h, config_.pooled_dim()}), config_.pooled_dim(), rng);
  p.add("head/fc1/bias", {h});
  init_he_normal(p.add("head/fc2/weight", {h, h}), h, rng);
  p.add("head/fc2/bias", {h});
  init_normal(p.add("head/cls/weight", {c + 1, h}), 0.01, rng);
  p.add("head/cls/bias", {c + 1});
  init_normal(p.add("head/bbox/weight", {4 * c, h}), 0.001, rng);
  p.add("head/bbox/bias", {4 * c});
  return p;
}

void Detector::check_params(const ParamStore& params) const {
  const ParamStore expected = init_params(0);
  for (const auto& [name, t] : expected) {
    if (!params.contains(name)) throw DetectorError("missing parameter " + name);
    if (params.get(name).shape() != t.shape()) {
      throw DetectorError("shape mismatch for " + name + ": expected " + shape_string(t.shape()) + ", got " +
                          shape_string(params.get(name).shape()));
    }
  }
  if (params.size() != expected.size()) throw DetectorError("unexpected extra detector parameters");
}

kernels::RoiAlignConfig Detector::roi_config() const {
  return {config_.pool_grid, config_.pool_sampling, static_cast<double>(config_.stride())};
}

FeatureMap Detector::backbone_forward(const ParamStore& params, const Tensor& image, BackboneTrace& trace) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw DetectorError("image must be 3×H×W");
  const int s = config_.stride();
  if (image.dim(1) < s || image.dim(2) < s) throw DetectorError("image smaller than the feature stride");
  trace.activations.clear();
  trace.geometry.clear();
  trace.activations.push_back(image);
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    const Tensor& x = trace.activations.back();
    const auto g = geometry(x.dim(0), x.dim(1), x.dim(2), config_.backbone_channels[i], 3, config_.backbone_strides[i]);
    Tensor y = conv(params, stage_name(i), g, x);
    relu_inplace(y);
    trace.geometry.push_back(g);
    trace.activations.push_back(std::move(y));
  }
  return FeatureMap{trace.activations.back(), s, image.dim(1), image.dim(2)};
}

void Detector::backbone_backward(const ParamStore& params, const BackboneTrace& trace, const Tensor& grad_features,
                                 ParamStore& grads, Tensor* grad_image) const {
  Tensor grad = grad_features;
  for (int i = static_cast<int>(trace.geometry.size()) - 1; i >= 0; --i) {
    relu_mask(grad, trace.activations[i + 1]);
    const auto& g = trace.geometry[i];
    const std::string name = stage_name(i);
    const bool need_input = i > 0 || grad_image != nullptr;
    Tensor grad_in;
    if (need_input) grad_in = Tensor(trace.activations[i].shape());
    kernels::conv2d_backward(g, trace.activations[i].span(), params.get(name + "/weight").span(), grad.span(),
                             grads.get(name + "/weight").span(), grads.get(name + "/bias").span(),
                             need_input ? grad_in.span() : std::span<double>{});
    grad = std::move(grad_in);
  }
  if (grad_image) *grad_image = std::move(grad);
}

FeatureMap Detector::extract_features(const ParamStore& params, const Tensor& image) const {
  BackboneTrace trace;
  return backbone_forward(params, image, trace);
}

RpnOutput Detector::rpn_forward(const ParamStore& params, const FeatureMap& features, RpnTrace& trace) const {
  const int d = features.channels(), h = features.height(), w = features.width();
  const int a = config_.num_anchors();
  trace.conv = geometry(d, h, w, config_.rpn_channels, 3, 1);
  trace.cls = geometry(config_.rpn_channels, h, w, a, 1, 1);
  trace.bbox = geometry(config_.rpn_channels, h, w, 4 * a, 1, 1);
  trace.hidden = conv(params, "rpn/conv", trace.conv, features.data);
  relu_inplace(trace.hidden);
  return RpnOutput{conv(params, "rpn/cls", trace.cls, trace.hidden), conv(params, "rpn/bbox", trace.bbox, trace.hidden)};
}

void Detector::rpn_backward(const ParamStore& params, const FeatureMap& features, const RpnTrace& trace,
                            const Tensor& grad_logits, const Tensor& grad_deltas, ParamStore& grads,
                            Tensor& grad_features) const {
  Tensor grad_hidden(trace.hidden.shape());
  Tensor tmp(trace.hidden.shape());
  kernels::conv2d_backward(trace.cls, trace.hidden.span(), params.get("rpn/cls/weight").span(), grad_logits.span(),
                           grads.get("rpn/cls/weight").span(), grads.get("rpn/cls/bias").span(), grad_hidden.span());
  kernels::conv2d_backward(trace.bbox, trace.hidden.span(), params.get("rpn/bbox/weight").span(), grad_deltas.span(),
                           grads.get("rpn/bbox/weight").span(), grads.get("rpn/bbox/bias").span(), tmp.span());
  for (std::size_t i = 0; i < grad_hidden.size(); ++i) grad_hidden[i] += tmp[i];
  relu_mask(grad_hidden, trace.hidden);
  Tensor grad_in(features.data.shape());
  kernels::conv2d_backward(trace.conv, features.data.span(), params.get("rpn/conv/weight").span(), grad_hidden.span(),
                           grads.get("rpn/conv/weight").span(), grads.get("rpn/conv/bias").span(), grad_in.span());
  for (std::size_t i = 0; i < grad_in.size(); ++i) grad_features[i] += grad_in[i];
}

RpnOutput Detector::rpn(const ParamStore& params, const FeatureMap& features) const {
  RpnTrace trace;
  return rpn_forward(params, features, trace);
}

std::vector<Box> Detector::anchors(int height, int width) const {
  const double s = config_.stride();
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(height) * width * config_.num_anchors());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double cx = (x + 0.5) * s, cy = (y + 0.5) * s;
      for (double ratio : config_.aspect_ratios) {
        const double bw = config_.anchor_size / std::sqrt(ratio);
        const double bh = config_.anchor_size * std::sqrt(ratio);
        out.push_back({cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh});
      }
    }
  }
  return out;
}

RegionBatch Detector::proposals_from(const RpnOutput& rpn_out, const FeatureMap& features, int k_top) const {
  if (k_top < 1) throw DetectorError("k_top must be at least 1");
  const int h = features.height(), w = features.width(), a = config_.num_anchors();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const auto anchor_boxes = anchors(h, w);
  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(anchor_boxes.size());
  for (std::size_t k = 0; k < anchor_boxes.size(); ++k) {
    const std::size_t cell = k / a, ai = k % a;
    BoxDelta delta;
    for (int j = 0; j < 4; ++j) delta[j] = rpn_out.deltas[(ai * 4 + j) * hw + cell];
    const Box b = clip_box(decode_box(anchor_boxes[k], delta, kRpnBoxWeights), features.image_width,
                           features.image_height);
    if (box_width(b) < 1.0 || box_height(b) < 1.0) continue;
    boxes.push_back(b);
    scores.push_back(sigmoid(rpn_out.objectness_logits[ai * hw + cell]));
  }
  const auto keep = nms(boxes, scores, config_.rpn_nms_iou, k_top);
  RegionBatch out;
  for (int i : keep) {
    out.boxes.push_back(boxes[i]);
    out.objectness.push_back(scores[i]);
  }
  return out;
}

RegionBatch Detector::propose_regions(const ParamStore& params, const FeatureMap& features, int k_top) const {
  return proposals_from(rpn(params, features), features, k_top);
}

Tensor Detector::pool_region_features(const FeatureMap& features, std::span<const Box> boxes) const {
  const int n = static_cast<int>(boxes.size());
  Tensor out({n, config_.pooled_dim()});
  if (n == 0) return out;
  const int flat = kernels::roi_align_forward(roi_config(), features.channels(), features.height(), features.width(),
                                              features.data.span(), boxes, out.span());
  if (flat > 0) spdlog::warn("pooled {} zero-area region(s) from their nearest feature cell", flat);
  return out;
}

void Detector::pool_backward(const FeatureMap& features, std::span<const Box> boxes, const Tensor& grad_pooled,
                             Tensor& grad_features) const {
  if (boxes.empty()) return;
  kernels::roi_align_backward(roi_config(), features.channels(), features.height(), features.width(), boxes,
                              grad_pooled.span(), grad_features.span());
}

HeadOutput Detector::head_forward(const ParamStore& params, const Tensor& region_features, HeadTrace& trace) const {
  if (region_features.rank() != 2 || region_features.dim(1) != config_.pooled_dim()) {
    throw DetectorError("region feature width does not match the pooled dimension");
  }
  const int n = region_features.dim(0), c = config_.num_classes;
  trace.input = region_features;
  trace.hidden1 = linear(params, "head/fc1", region_features);
  relu_inplace(trace.hidden1);
  trace.hidden2 = linear(params, "head/fc2", trace.hidden1);
  relu_inplace(trace.hidden2);
  HeadOutput out;
  out.class_logits = linear(params, "head/cls", trace.hidden2);
  out.class_probs = softmax_rows(out.class_logits);
  out.box_deltas = linear(params, "head/bbox", trace.hidden2);
  out.box_deltas.reshape({n, c, 4});
  return out;
}

HeadOutput Detector::rcnn_head(const ParamStore& params, const Tensor& region_features) const {
  HeadTrace trace;
  return head_forward(params, region_features, trace);
}

Tensor Detector::head_backward(const ParamStore& params, const HeadTrace& trace, const Tensor& grad_class_logits,
                               const Tensor& grad_box_deltas, ParamStore& grads) const {
  Tensor gd = grad_box_deltas;
  if (!gd.empty()) gd.reshape({gd.dim(0), 4 * config_.num_classes});
  Tensor g2 = linear_grad(params, "head/cls", trace.hidden2, grad_class_logits, grads);
  const Tensor g2b = linear_grad(params, "head/bbox", trace.hidden2, gd, grads);
  for (std::size_t i = 0; i < g2.size(); ++i) g2[i] += g2b[i];
  relu_mask(g2, trace.hidden2);
  Tensor g1 = linear_grad(params, "head/fc2", trace.hidden1, g2, grads);
  relu_mask(g1, trace.hidden1);
  return linear_grad(params, "head/fc1", trace.input, g1, grads);
}

std::vector<Detection> Detector::detect_on_proposals(const ParamStore& params, const FeatureMap& features,
                                                     std::span<const Box> proposals, double score_thresh,
                                                     double nms_iou) const {
  const Tensor pooled = pool_region_features(features, proposals);
  const HeadOutput head = rcnn_head(params, pooled);
  const int c = config_.num_classes;
  std::vector<Detection> out;
  for (int cls = 0; cls < c; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int n = 0; n < static_cast<int>(proposals.size()); ++n) {
      const double score = head.class_probs.at(n, cls);
      if (!(score > score_thresh)) continue;
      BoxDelta delta;
      for (int j = 0; j < 4; ++j) delta[j] = head.box_deltas.at(n, cls, j);
      const Box b = clip_box(decode_box(proposals[n], delta, kHeadBoxWeights), features.image_width,
                             features.image_height);
      if (!(box_width(b) > 0) || !(box_height(b) > 0)) continue;
      boxes.push_back(b);
      scores.push_back(score);
    }
    for (int i : nms(boxes, scores, nms_iou)) out.push_back({cls + 1, boxes[i], scores[i]});
  }
  std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score || a.box != b.box) return ranks_before(a.score, a.box, b.score, b.box);
    return a.class_id < b.class_id;
  });
  if (static_cast<int>(out.size()) > config_.max_detections) out.resize(config_.max_detections);
  return out;
}

std::vector<Detection> Detector::detect(const ParamStore& params, const Tensor& image, double score_thresh,
                                        double nms_iou) const {
  if (score_thresh < 0 || score_thresh > 1 || nms_iou < 0 || nms_iou > 1) {
    throw DetectorError("detection thresholds must lie in [0,1]");
  }
  const FeatureMap features = extract_features(params, image);
  const RegionBatch proposals = propose_regions(params, features, config_.test_proposals);
  return detect_on_proposals(params, features, proposals.boxes, score_thresh, nms_iou);
}

AnchorTargets Detector::assign_anchor_targets(const std::vector<Box>& anchor_boxes,
                                              const std::vector<synth::BoxAnnotation>& gt, Rng& rng) const {
  const int n = static_cast<int>(anchor_boxes.size());
  std::vector<int> label(n, -1);
  std::vector<int> match(n, -1);
  std::vector<double> best(n, 0.0);
  std::vector<double> gt_best(gt.size(), 0.0);
  for (int k = 0; k < n; ++k) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchor_boxes[k], gt[g].box);
      if (v > best[k]) {
        best[k] = v;
        match[k] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  for (int k = 0; k < n; ++k) {
    if (best[k] < config_.rpn_negative_iou) label[k] = 0;
    if (best[k] >= config_.rpn_positive_iou) label[k] = 1;
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (gt_best[g] <= 0) continue;
    for (int k = 0; k < n; ++k) {
      if (iou(anchor_boxes[k], gt[g].box) == gt_best[g]) {
        label[k] = 1;
        match[k] = static_cast<int>(g);
      }
    }
  }
  std::vector<int> pos, neg;
  for (int k = 0; k < n; ++k) {
    if (label[k] == 1) pos.push_back(k);
    if (label[k] == 0) neg.push_back(k);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const int max_pos = static_cast<int>(config_.rpn_batch * config_.rpn_positive_fraction);
  if (static_cast<int>(pos.size()) > max_pos) pos.resize(max_pos);
  const int max_neg = config_.rpn_batch - static_cast<int>(pos.size());
  if (static_cast<int>(neg.size()) > max_neg) neg.resize(max_neg);

  AnchorTargets t;
  for (int k : pos) {
    t.sampled.push_back(k);
    t.labels.push_back(1.0);
    t.positives.push_back(k);
    t.deltas.push_back(encode_box(anchor_boxes[k], gt[match[k]].box, kRpnBoxWeights));
  }
  for (int k : neg) {
    t.sampled.push_back(k);
    t.labels.push_back(0.0);
  }
  return t;
}

std::vector<int> match_region_labels(std::span<const Box> regions, const std::vector<synth::BoxAnnotation>& gt,
                                     double iou_threshold, int background_index) {
  std::vector<int> labels(regions.size(), background_index);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    double best = 0.0;
    for (const auto& g : gt) {
      const double v = iou(regions[r], g.box);
      if (v >= iou_threshold && v > best) {
        best = v;
        labels[r] = g.class_id - 1;
      }
    }
  }
  return labels;
}

RoiTargets Detector::sample_rois(const std::vector<Box>& proposals, const std::vector<synth::BoxAnnotation>& gt,
                                 Rng& rng) const {
  std::vector<Box> candidates = proposals;
  for (const auto& g : gt) candidates.push_back(g.box);
  std::vector<int> fg, bg;
  std::vector<int> match(candidates.size(), -1);
  for (std::size_t r = 0; r < candidates.size(); ++r) {
    double best = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(candidates[r], gt[g].box);
      if (v > best) {
        best = v;
        match[r] = static_cast<int>(g);
      }
    }
    (best >= config_.roi_foreground_iou ? fg : bg).push_back(static_cast<int>(r));
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const int max_fg = static_cast<int>(config_.roi_batch * config_.roi_foreground_fraction);
  if (static_cast<int>(fg.size()) > max_fg) fg.resize(max_fg);
  const int max_bg = config_.roi_batch - static_cast<int>(fg.size());
  if (static_cast<int>(bg.size()) > max_bg) bg.resize(max_bg);

  RoiTargets t;
  for (int r : fg) {
    t.rois.push_back(candidates[r]);
    t.labels.push_back(gt[match[r]].class_id - 1);
    t.deltas.push_back(encode_box(candidates[r], gt[match[r]].box, kHeadBoxWeights));
  }
  for (int r : bg) {
    t.rois.push_back(candidates[r]);
    t.labels.push_back(config_.background_index());
    t.deltas.push_back({0, 0, 0, 0});
  }
  return t;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  if (logits.empty()) return out;
  const int rows = logits.dim(0), cols = logits.dim(1);
  for (int r = 0; r < rows; ++r) {
    double m = logits.at(r, 0);
    for (int c = 1; c < cols; ++c) m = std::max(m, logits.at(r, c));
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += (out.at(r, c) = std::exp(logits.at(r, c) - m));
    for (int c = 0; c < cols; ++c) out.at(r, c) /= z;
  }
  return out;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  Tensor out(probs.shape());
  if (probs.empty()) return out;
  const int rows = probs.dim(0), cols = probs.dim(1);
  for (int r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += probs.at(r, c) * grad_probs.at(r, c);
    for (int c = 0; c < cols; ++c) out.at(r, c) = probs.at(r, c) * (grad_probs.at(r, c) - dot);
  }
  return out;
}

DetectionLoss detection_loss(const RpnOutput& rpn_out, const AnchorTargets& anchor_targets, const HeadOutput& head_out,
                             const RoiTargets& roi_targets) {
  DetectionLoss loss;
  loss.grad_objectness_logits = Tensor(rpn_out.objectness_logits.shape());
  loss.grad_rpn_deltas = Tensor(rpn_out.deltas.shape());
  loss.grad_class_logits = Tensor(head_out.class_logits.shape());
  loss.grad_box_deltas = Tensor(head_out.box_deltas.shape());

  const int a = rpn_out.objectness_logits.dim(0);
  const std::size_t hw = rpn_out.objectness_logits.size() / static_cast<std::size_t>(a);
  const auto logit_index = [&](int k) { return static_cast<std::size_t>(k % a) * hw + static_cast<std::size_t>(k / a); };
  const auto delta_index = [&](int k, int j) {
    return static_cast<std::size_t>((k % a) * 4 + j) * hw + static_cast<std::size_t>(k / a);
  };

  if (!anchor_targets.sampled.empty()) {
    const double inv = 1.0 / static_cast<double>(anchor_targets.sampled.size());
    for (std::size_t i = 0; i < anchor_targets.sampled.size(); ++i) {
      const std::size_t idx = logit_index(anchor_targets.sampled[i]);
      const double x = rpn_out.objectness_logits[idx];
      const double y = anchor_targets.labels[i];
      // Stable BCE with logits.
      loss.rpn_objectness += inv * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
      loss.grad_objectness_logits[idx] += inv * (sigmoid(x) - y);
    }
  }
  if (!anchor_targets.positives.empty()) {
    const double inv = 1.0 / static_cast<double>(anchor_targets.positives.size());
    constexpr double beta = 1.0 / 9.0;
    for (std::size_t i = 0; i < anchor_targets.positives.size(); ++i) {
      for (int j = 0; j < 4; ++j) {
        const std::size_t idx = delta_index(anchor_targets.positives[i], j);
        const double diff = rpn_out.deltas[idx] - anchor_targets.deltas[i][j];
        loss.rpn_box += inv * smooth_l1(diff, beta);
        loss.grad_rpn_deltas[idx] += inv * smooth_l1_grad(diff, beta);
      }
    }
  }

  const int n = head_out.size();
  if (n > 0) {
    const int cols = head_out.class_probs.dim(1);
    const int background = cols - 1;
    const double inv = 1.0 / n;
    int n_fg = 0;
    for (int r = 0; r < n; ++r) n_fg += roi_targets.labels[r] != background ? 1 : 0;
    for (int r = 0; r < n; ++r) {
      const int y = roi_targets.labels[r];
      // log-softmax from logits for accuracy near one-hot predictions.
      double m = head_out.class_logits.at(r, 0);
      for (int c = 1; c < cols; ++c) m = std::max(m, head_out.class_logits.at(r, c));
      double z = 0.0;
      for (int c = 0; c < cols; ++c) z += std::exp(head_out.class_logits.at(r, c) - m);
      loss.head_class += inv * (m + std::log(z) - head_out.class_logits.at(r, y));
      for (int c = 0; c < cols; ++c) {
        loss.grad_class_logits.at(r, c) = inv * (head_out.class_probs.at(r, c) - (c == y ? 1.0 : 0.0));
      }
      if (y != background) {
        const double inv_fg = 1.0 / n_fg;
        for (int j = 0; j < 4; ++j) {
          const double diff = head_out.box_deltas.at(r, y, j) - roi_targets.deltas[r][j];
          loss.head_box += inv_fg * smooth_l1(diff, 1.0);
          loss.grad_box_deltas.at(r, y, j) = inv_fg * smooth_l1_grad(diff, 1.0);
        }
      }
    }
  }

  const std::pair<const char*, double> parts[] = {{"rpn_objectness", loss.rpn_objectness},
                                                  {"rpn_box", loss.rpn_box},
                                                  {"head_class", loss.head_class},
                                                  {"head_box", loss.head_box}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) throw DetectorError(std::string("non-finite detection loss component: ") + name);
  }
  return loss;
}

}  // namespace mdbank
