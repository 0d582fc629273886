#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <unistd.h>

#include "mdbank/checkpoint.hpp"
#include "mdbank/evaluation.hpp"
#include "mdbank/trainer.hpp"

using namespace mdbank;
using namespace mdbank::eval;
namespace fs = std::filesystem;

namespace {

// Reference AP: for every prefix of the ranked list, redo the matching from
// scratch and record (precision, recall); then integrate the monotone envelope.
double brute_force_ap(std::vector<ScoredDetection> dets, const std::vector<GroundTruth>& gts, double thr) {
  if (dets.empty() || gts.empty()) return 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.box < b.box;
  });
  std::vector<double> prec, rec;
  for (std::size_t k = 1; k <= dets.size(); ++k) {
    std::vector<bool> used(gts.size(), false);
    int tp = 0;
    for (std::size_t i = 0; i < k; ++i) {
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].image != dets[i].image) continue;
        const double v = iou(dets[i].box, gts[g].box);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= thr && !used[best]) {
        used[best] = true;
        ++tp;
      }
    }
    prec.push_back(static_cast<double>(tp) / k);
    rec.push_back(static_cast<double>(tp) / gts.size());
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    const double envelope = *std::max_element(prec.begin() + k, prec.end());
    ap += (rec[k] - prev_recall) * envelope;
    prev_recall = rec[k];
  }
  return ap;
}

std::vector<GroundTruth> three_images() {
  return {{0, 1, {10, 10, 30, 30}}, {1, 1, {50, 50, 80, 80}}, {2, 1, {5, 40, 25, 70}}};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mdbank_eval_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  return p;
}

const fs::path& tiny_dataset() {
  static const fs::path root = [] {
    const fs::path p = scratch_dir("data");
    synth::GenerateOptions g;
    g.n_source = 4;
    g.n_target = 2;
    g.n_eval = 4;
    g.seed = 13;
    synth::generate_dataset(p, g);
    return p;
  }();
  return root;
}

fs::path untrained_checkpoint(int num_classes = 3) {
  TrainConfig c;
  c.detector.num_classes = num_classes;
  const fs::path p = scratch_dir("ckpt_" + std::to_string(num_classes)) / "teacher.ckpt";
  save_checkpoint(p, Detector(c.detector).init_params(2), checkpoint_config(c, "teacher"));
  return p;
}

}  // namespace

TEST_CASE("AP fixtures") {
  const auto gts = three_images();
  SUBCASE("perfect") {
    std::vector<ScoredDetection> dets;
    for (const auto& g : gts) dets.push_back({g.image, 1, 0.9 - 0.1 * g.image, g.box});
    const ClassAp ap = average_precision(dets, gts);
    CHECK(ap.ap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ap.true_positives == 3);
    CHECK(std::fabs(ap.ap - brute_force_ap(dets, gts, 0.5)) <= 1e-9);
  }
  SUBCASE("empty") {
    const ClassAp none = average_precision({}, gts);
    CHECK(none.ap == 0.0);
    CHECK(none.empty);
    const ClassAp no_gt = average_precision({{0, 1, 0.5, {0, 0, 5, 5}}}, {});
    CHECK(no_gt.ap == 0.0);
    CHECK(no_gt.empty);
  }
  SUBCASE("mixed: two hits and one miss") {
    const std::vector<ScoredDetection> dets{{0, 1, 0.9, {11, 10, 30, 31}},
                                            {1, 1, 0.8, {0, 0, 20, 20}},
                                            {2, 1, 0.7, {5, 41, 25, 70}}};
    const ClassAp ap = average_precision(dets, gts);
    CHECK(ap.true_positives == 2);
    CHECK(ap.ap == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
    CHECK(std::fabs(ap.ap - brute_force_ap(dets, gts, 0.5)) <= 1e-9);
    CHECK(ap.precision == std::vector<double>{1.0, 0.5, 2.0 / 3.0});
  }
  SUBCASE("a duplicate of a claimed box is a false positive") {
    const std::vector<ScoredDetection> dets{{0, 1, 0.9, gts[0].box}, {0, 1, 0.8, gts[0].box}};
    const ClassAp ap = average_precision(dets, gts);
    CHECK(ap.true_positives == 1);
    CHECK(ap.ap == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("AP agrees with brute force on random fixtures") {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0, 80), sz(8, 30), sc(0, 1);
  std::uniform_int_distribution<int> img(0, 4), jitter(-6, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<GroundTruth> gts;
    const int n_gt = trial % 7;
    for (int i = 0; i < n_gt; ++i) {
      const double x = u(rng), y = u(rng), s = sz(rng);
      gts.push_back({img(rng), 1, {x, y, x + s, y + s}});
    }
    std::vector<ScoredDetection> dets;
    for (int i = 0; i < trial % 11; ++i) {
      if (!gts.empty() && i % 2 == 0) {
        const auto& g = gts[i % gts.size()];
        dets.push_back({g.image, 1, sc(rng),
                        {g.box[0] + jitter(rng), g.box[1] + jitter(rng), g.box[2] + jitter(rng), g.box[3]}});
      } else {
        const double x = u(rng), y = u(rng), s = sz(rng);
        dets.push_back({img(rng), 1, std::round(sc(rng) * 4) / 4, {x, y, x + s, y + s}});
      }
    }
    const ClassAp ap = average_precision(dets, gts);
    CHECK(std::fabs(ap.ap - brute_force_ap(dets, gts, 0.5)) <= 1e-9);
    CHECK(ap.ap >= 0.0);
    CHECK(ap.ap <= 1.0);
  }
}

TEST_CASE("AP is invariant to input order") {
  const auto gts = three_images();
  std::vector<ScoredDetection> dets{{0, 1, 0.9, {11, 10, 30, 31}},
                                    {1, 1, 0.5, {0, 0, 20, 20}},
                                    {2, 1, 0.5, {5, 41, 25, 70}},
                                    {1, 1, 0.3, {50, 50, 80, 80}}};
  const double base = average_precision(dets, gts).ap;
  std::reverse(dets.begin(), dets.end());
  CHECK(average_precision(dets, gts).ap == base);
}

TEST_CASE("voc_ap splits by class and the report averages classes with ground truth") {
  std::vector<GroundTruth> gts{{0, 1, {0, 0, 10, 10}}, {0, 2, {20, 20, 40, 40}}};
  std::vector<ScoredDetection> dets{{0, 1, 0.9, {0, 0, 10, 10}}, {0, 3, 0.9, {50, 50, 60, 60}}};
  const auto per_class = voc_ap(dets, gts, 3);
  CHECK(per_class.size() == 3u);
  CHECK(per_class.at(1).ap == doctest::Approx(1.0));
  CHECK(per_class.at(2).ap == 0.0);
  CHECK(per_class.at(3).ground_truth == 0);
  const EvalReport r = make_report(per_class, 1, 0.5);
  CHECK(r.map == doctest::Approx(0.5));  // class 3 has no ground truth and does not count
  const nlohmann::json j = r;
  for (const char* key : {"map", "per_class_ap", "counts", "pr_curves"}) CHECK(j.contains(key));
  CHECK(j["counts"].contains("detections"));
  CHECK(j["pr_curves"].contains("precision"));
  CHECK(nlohmann::json(j.get<EvalReport>()) == j);
}

TEST_CASE("evaluate a checkpoint") {
  const fs::path ckpt = untrained_checkpoint();
  const EvalReport a = evaluate_checkpoint(ckpt, tiny_dataset(), synth::kTargetEvalSplit);
  CHECK(a.num_images == 4);
  CHECK(a.per_class_ap.size() == 3u);
  double mean = 0;
  int classes = 0;
  for (const auto& [c, ap] : a.per_class_ap) {
    CHECK(ap >= 0);
    CHECK(ap <= 1);
    if (a.ground_truth_counts.at(c) > 0) {
      mean += ap;
      ++classes;
    }
  }
  CHECK(a.map == doctest::Approx(mean / classes).epsilon(1e-12));
  const EvalReport b = evaluate_checkpoint(ckpt, tiny_dataset(), synth::kTargetEvalSplit);
  CHECK(nlohmann::json(a) == nlohmann::json(b));

  EvalOptions limited;
  limited.limit = 2;
  CHECK(evaluate_checkpoint(ckpt, tiny_dataset(), synth::kSourceSplit, limited).num_images == 2);
  CHECK_THROWS_AS(evaluate_checkpoint(ckpt, tiny_dataset(), synth::kTargetSplit), EvalError);
  CHECK_THROWS_AS(evaluate_checkpoint(untrained_checkpoint(2), tiny_dataset()), EvalError);
  CHECK_THROWS(evaluate_checkpoint(ckpt.parent_path() / "missing.ckpt", tiny_dataset()));
}

TEST_CASE("embedding dump") {
  const fs::path ckpt = untrained_checkpoint();
  EmbedOptions o;
  o.regions_per_image = 5;
  o.images_per_split = 3;
  const EmbeddingTable t = dump_embeddings(ckpt, tiny_dataset(), o);
  CHECK(t.rows.size() == 2u * 3u * 5u);
  int src = 0;
  for (const auto& r : t.rows) {
    src += r.domain == synth::Domain::source;
    CHECK(r.class_id >= 0);
    CHECK(r.class_id <= 3);
    CHECK(std::isfinite(r.x));
    CHECK(std::isfinite(r.y));
  }
  CHECK(src == 15);
  for (const auto& [c, d] : t.class_distance) {
    CHECK(c >= 1);
    CHECK(d >= 0);
    CHECK(d <= 2.0);  // unit vectors
  }

  const EmbeddingTable again = dump_embeddings(ckpt, tiny_dataset(), o);
  CHECK(nlohmann::json(embedding_summary(again)) == nlohmann::json(embedding_summary(t)));

  const fs::path csv = scratch_dir("emb") / "e.csv";
  fs::create_directories(csv.parent_path());
  write_embedding_csv(csv, t);
  const EmbeddingTable back = read_embedding_csv(csv);
  REQUIRE(back.rows.size() == t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    CHECK(back.rows[i].sample_id == t.rows[i].sample_id);
    CHECK(back.rows[i].domain == t.rows[i].domain);
    CHECK(back.rows[i].class_id == t.rows[i].class_id);
    CHECK(back.rows[i].x == t.rows[i].x);
    CHECK(back.rows[i].y == t.rows[i].y);
  }
}
