#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdbank/boxes.hpp"
#include "mdbank/synthdata.hpp"

namespace mdbank::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScoredDetection {
  int image = 0;
  int class_id = 1;
  double score = 0;
  Box box{};
};

struct GroundTruth {
  int image = 0;
  int class_id = 1;
  Box box{};
};

struct ClassAp {
  double ap = 0;
  int detections = 0;
  int ground_truth = 0;
  int true_positives = 0;
  bool empty = false;  // no ground truth or no detections; ap is 0
  std::vector<double> precision;  // one entry per ranked detection
  std::vector<double> recall;
};

/// Greedy score-ordered matching followed by all-points precision-recall
/// integration. A detection is a true positive when its best-overlapping
/// ground truth box in the same image reaches `iou_thresh` and has not been
/// claimed by a higher-ranked detection.
ClassAp average_precision(std::vector<ScoredDetection> detections, const std::vector<GroundTruth>& ground_truth,
                          double iou_thresh = 0.5);

/// Per-class AP for classes 1..num_classes.
std::map<int, ClassAp> voc_ap(const std::vector<ScoredDetection>& detections,
                              const std::vector<GroundTruth>& ground_truth, int num_classes,
                              double iou_thresh = 0.5);

struct EvalReport {
  std::string checkpoint;
  std::string split;
  int num_images = 0;
  double iou_thresh = 0.5;
  std::map<int, double> per_class_ap;
  std::map<int, int> detection_counts;
  std::map<int, int> ground_truth_counts;
  std::map<int, std::vector<double>> precision;
  std::map<int, std::vector<double>> recall;
  double map = 0;  // mean over classes that appear in the ground truth
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

EvalReport make_report(const std::map<int, ClassAp>& per_class, int num_images, double iou_thresh);

struct EvalOptions {
  double score_thresh = 0.01;
  double nms_iou = 0.5;
  double iou_thresh = 0.5;
  int limit = -1;  // evaluate only the first `limit` images when positive
};

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_root,
                               const std::string& split = synth::kTargetEvalSplit, const EvalOptions& options = {});

struct EmbeddingRow {
  std::string sample_id;
  synth::Domain domain = synth::Domain::source;
  int class_id = 0;  // 0 for regions that match no object
  double score = 0;  // objectness of the region
  double x = 0, y = 0;
};

struct EmbeddingTable {
  std::vector<EmbeddingRow> rows;
  std::map<int, double> class_distance;  // mean source-target distance per class
  double mean_cross_domain_distance = 0;
};

struct EmbedOptions {
  int regions_per_image = 8;
  int images_per_split = 100;
  double label_iou = 0.5;
  std::uint64_t seed = 0;  // seeds the 2-D projection
};

/// Pooled features of the top-scoring proposals from the labeled source split
/// and the target evaluation split, projected to 2-D by a seeded Gaussian
/// random projection. Distances are measured on the L2-normalized pooled
/// features before projection.
EmbeddingTable dump_embeddings(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_root,
                               const EmbedOptions& options = {});

void write_embedding_csv(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embedding_csv(const std::filesystem::path& path);
nlohmann::json embedding_summary(const EmbeddingTable& table);

}  // namespace mdbank::eval
