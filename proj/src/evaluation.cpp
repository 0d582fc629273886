#include "mdbank/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "mdbank/checkpoint.hpp"
#include "mdbank/detector.hpp"

namespace mdbank::eval {
using nlohmann::json;

ClassAp average_precision(std::vector<ScoredDetection> detections, const std::vector<GroundTruth>& ground_truth,
                          double iou_thresh) {
  ClassAp out;
  out.detections = static_cast<int>(detections.size());
  out.ground_truth = static_cast<int>(ground_truth.size());
  if (ground_truth.empty() || detections.empty()) {
    out.empty = true;
    return out;
  }
  std::stable_sort(detections.begin(), detections.end(), [](const ScoredDetection& a, const ScoredDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.box < b.box;
  });
  std::map<int, std::vector<int>> by_image;
  for (int g = 0; g < out.ground_truth; ++g) by_image[ground_truth[g].image].push_back(g);
  std::vector<bool> claimed(ground_truth.size(), false);

  int tp = 0, fp = 0;
  out.precision.reserve(detections.size());
  out.recall.reserve(detections.size());
  for (const auto& d : detections) {
    int best = -1;
    double best_iou = -1.0;
    if (auto it = by_image.find(d.image); it != by_image.end()) {
      for (int g : it->second) {
        const double o = iou(d.box, ground_truth[g].box);
        if (o > best_iou) {
          best_iou = o;
          best = g;
        }
      }
    }
    if (best >= 0 && best_iou >= iou_thresh && !claimed[best]) {
      claimed[best] = true;
      ++tp;
    } else {
      ++fp;
    }
    out.precision.push_back(static_cast<double>(tp) / (tp + fp));
    out.recall.push_back(static_cast<double>(tp) / out.ground_truth);
  }
  out.true_positives = tp;

  // Precision envelope from the right, then sum over recall increments.
  std::vector<double> envelope = out.precision;
  for (int i = static_cast<int>(envelope.size()) - 2; i >= 0; --i) envelope[i] = std::max(envelope[i], envelope[i + 1]);
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < envelope.size(); ++i) {
    if (out.recall[i] > prev_recall) {
      out.ap += (out.recall[i] - prev_recall) * envelope[i];
      prev_recall = out.recall[i];
    }
  }
  return out;
}

std::map<int, ClassAp> voc_ap(const std::vector<ScoredDetection>& detections,
                              const std::vector<GroundTruth>& ground_truth, int num_classes, double iou_thresh) {
  std::map<int, ClassAp> out;
  for (int c = 1; c <= num_classes; ++c) {
    std::vector<ScoredDetection> dets;
    std::vector<GroundTruth> gts;
    for (const auto& d : detections) {
      if (d.class_id == c) dets.push_back(d);
    }
    for (const auto& g : ground_truth) {
      if (g.class_id == c) gts.push_back(g);
    }
    out[c] = average_precision(std::move(dets), gts, iou_thresh);
  }
  return out;
}

EvalReport make_report(const std::map<int, ClassAp>& per_class, int num_images, double iou_thresh) {
  EvalReport r;
  r.num_images = num_images;
  r.iou_thresh = iou_thresh;
  double sum = 0.0;
  int present = 0;
  for (const auto& [c, ap] : per_class) {
    r.per_class_ap[c] = ap.ap;
    r.detection_counts[c] = ap.detections;
    r.ground_truth_counts[c] = ap.ground_truth;
    r.precision[c] = ap.precision;
    r.recall[c] = ap.recall;
    if (ap.ground_truth > 0) {
      sum += ap.ap;
      ++present;
    }
  }
  r.map = present > 0 ? sum / present : 0.0;
  return r;
}

namespace {

template <typename T>
json int_map(const std::map<int, T>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

template <typename T>
std::map<int, T> read_int_map(const json& j) {
  std::map<int, T> m;
  for (const auto& [k, v] : j.items()) m[std::stoi(k)] = v.template get<T>();
  return m;
}

struct LoadedModel {
  Detector detector;
  ParamStore params;
};

LoadedModel load_model(const std::filesystem::path& checkpoint, const synth::DatasetManifest& manifest) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (!ckpt.config.contains("detector")) throw EvalError("checkpoint has no detector config: " + checkpoint.string());
  const auto cfg = ckpt.config.at("detector").get<DetectorConfig>();
  if (cfg.num_classes != manifest.num_classes) {
    throw EvalError("checkpoint predicts " + std::to_string(cfg.num_classes) + " classes but the dataset has " +
                    std::to_string(manifest.num_classes));
  }
  LoadedModel m{Detector(cfg), {}};
  m.params = m.detector.init_params(0);
  load_params_strict(ckpt, m.params);
  return m;
}

}  // namespace

void to_json(json& j, const EvalReport& r) {
  j = {{"checkpoint", r.checkpoint},
       {"split", r.split},
       {"num_images", r.num_images},
       {"iou_thresh", r.iou_thresh},
       {"map", r.map},
       {"per_class_ap", int_map(r.per_class_ap)},
       {"counts", {{"detections", int_map(r.detection_counts)}, {"ground_truth", int_map(r.ground_truth_counts)}}},
       {"pr_curves", {{"precision", int_map(r.precision)}, {"recall", int_map(r.recall)}}}};
}

void from_json(const json& j, EvalReport& r) {
  r.checkpoint = j.value("checkpoint", "");
  r.split = j.value("split", "");
  r.num_images = j.at("num_images").get<int>();
  r.iou_thresh = j.at("iou_thresh").get<double>();
  r.map = j.at("map").get<double>();
  r.per_class_ap = read_int_map<double>(j.at("per_class_ap"));
  r.detection_counts = read_int_map<int>(j.at("counts").at("detections"));
  r.ground_truth_counts = read_int_map<int>(j.at("counts").at("ground_truth"));
  r.precision = read_int_map<std::vector<double>>(j.at("pr_curves").at("precision"));
  r.recall = read_int_map<std::vector<double>>(j.at("pr_curves").at("recall"));
}

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_root,
                               const std::string& split, const EvalOptions& options) {
  const auto manifest = synth::load_manifest(dataset_root);
  const LoadedModel model = load_model(checkpoint, manifest);
  const auto images = synth::load_split(dataset_root, split, options.limit);
  const int n = static_cast<int>(images.size());
  for (const auto& img : images) {
    if (!img.annotations) throw EvalError("split '" + split + "' has no annotations");
  }

  std::vector<std::vector<Detection>> per_image(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    per_image[i] = model.detector.detect(model.params, images[i].pixels, options.score_thresh, options.nms_iou);
  }
  std::vector<ScoredDetection> dets;
  std::vector<GroundTruth> gts;
  for (int i = 0; i < n; ++i) {
    for (const auto& d : per_image[i]) dets.push_back({i, d.class_id, d.score, d.box});
    for (const auto& a : *images[i].annotations) gts.push_back({i, a.class_id, a.box});
  }
  EvalReport r = make_report(voc_ap(dets, gts, manifest.num_classes, options.iou_thresh), n, options.iou_thresh);
  r.checkpoint = checkpoint.string();
  r.split = split;
  return r;
}

EmbeddingTable dump_embeddings(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_root,
                               const EmbedOptions& options) {
  if (options.regions_per_image < 1) throw EvalError("regions_per_image must be >= 1");
  const auto manifest = synth::load_manifest(dataset_root);
  const LoadedModel model = load_model(checkpoint, manifest);
  const Detector& det = model.detector;
  const int dim = det.config().pooled_dim();

  Rng rng(derive_seed(options.seed, "embedding-projection"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> projection(2 * static_cast<std::size_t>(dim));
  for (auto& v : projection) v = normal(rng);

  struct Region {
    EmbeddingRow row;
    std::vector<double> feature;
  };
  EmbeddingTable table;
  std::vector<Region> regions;
  for (const char* split : {synth::kSourceSplit, synth::kTargetEvalSplit}) {
    const auto images = synth::load_split(dataset_root, split, options.images_per_split);
    std::vector<std::vector<Region>> per_image(images.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < static_cast<int>(images.size()); ++i) {
      const auto& img = images[i];
      const FeatureMap fm = det.extract_features(model.params, img.pixels);
      const RegionBatch props = det.propose_regions(model.params, fm, options.regions_per_image);
      const Tensor pooled = det.pool_region_features(fm, props.boxes);
      const auto labels = match_region_labels(props.boxes, img.annotations.value_or(std::vector<synth::BoxAnnotation>{}),
                                              options.label_iou, det.config().background_index());
      for (int r = 0; r < props.size(); ++r) {
        Region reg;
        reg.row.sample_id = img.sample_id;
        reg.row.domain = split == std::string(synth::kSourceSplit) ? synth::Domain::source : synth::Domain::target;
        reg.row.class_id = labels[r] == det.config().background_index() ? 0 : labels[r] + 1;
        reg.row.score = props.objectness[r];
        const auto f = pooled.row(r);
        double norm = 0.0;
        for (double v : f) norm += v * v;
        norm = std::sqrt(norm);
        reg.feature.assign(f.begin(), f.end());
        if (norm > 0) {
          for (auto& v : reg.feature) v /= norm;
        }
        for (int k = 0; k < dim; ++k) {
          reg.row.x += projection[k] * reg.feature[k];
          reg.row.y += projection[dim + k] * reg.feature[k];
        }
        per_image[i].push_back(std::move(reg));
      }
    }
    for (auto& v : per_image) {
      for (auto& reg : v) regions.push_back(std::move(reg));
    }
  }

  double sum = 0.0;
  int classes = 0;
  for (int c = 1; c <= manifest.num_classes; ++c) {
    double total = 0.0;
    long pairs = 0;
    for (const auto& s : regions) {
      if (s.row.class_id != c || s.row.domain != synth::Domain::source) continue;
      for (const auto& t : regions) {
        if (t.row.class_id != c || t.row.domain != synth::Domain::target) continue;
        double sq = 0.0;
        for (int k = 0; k < dim; ++k) sq += (s.feature[k] - t.feature[k]) * (s.feature[k] - t.feature[k]);
        total += std::sqrt(sq);
        ++pairs;
      }
    }
    if (pairs > 0) {
      table.class_distance[c] = total / pairs;
      sum += table.class_distance[c];
      ++classes;
    }
  }
  table.mean_cross_domain_distance = classes > 0 ? sum / classes : 0.0;
  table.rows.reserve(regions.size());
  for (auto& reg : regions) table.rows.push_back(std::move(reg.row));
  return table;
}

void write_embedding_csv(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "sample_id,domain,class_id,score,x,y\n";
  for (const auto& r : table.rows) {
    out << r.sample_id << ',' << synth::to_string(r.domain) << ',' << r.class_id << ',' << r.score << ',' << r.x
        << ',' << r.y << '\n';
  }
  write_file_atomic(path, out.str());
}

EmbeddingTable read_embedding_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open " + path.string());
  EmbeddingTable table;
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,domain,class_id,score,x,y") throw EvalError("unexpected embedding header in " + path.string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& s : f) {
      if (!std::getline(ss, s, ',')) throw EvalError("malformed embedding row: " + line);
    }
    EmbeddingRow r;
    r.sample_id = f[0];
    if (f[1] == "source") {
      r.domain = synth::Domain::source;
    } else if (f[1] == "target") {
      r.domain = synth::Domain::target;
    } else {
      throw EvalError("unknown domain in embedding row: " + f[1]);
    }
    r.class_id = std::stoi(f[2]);
    r.score = std::stod(f[3]);
    r.x = std::stod(f[4]);
    r.y = std::stod(f[5]);
    table.rows.push_back(std::move(r));
  }
  return table;
}

json embedding_summary(const EmbeddingTable& table) {
  return {{"rows", table.rows.size()},
          {"class_distance", int_map(table.class_distance)},
          {"mean_cross_domain_distance", table.mean_cross_domain_distance}};
}

}  // namespace mdbank::eval
