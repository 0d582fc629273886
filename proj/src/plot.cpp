#include "mdbank/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace mdbank::plot {
namespace {

const std::vector<cv::Scalar> kPalette{{180, 119, 31}, {14, 127, 255}, {44, 160, 44},
                                       {40, 39, 214},  {189, 103, 148}, {75, 86, 140}};

struct Series {
  std::string label;
  std::vector<double> x, y;
  cv::Scalar color;
  bool markers = false;
  bool line = true;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, std::fabs(v) >= 100 || v == std::floor(v) ? "%.0f" : "%.2g", v);
  return buf;
}

// Minimal line/scatter chart with linear axes.
class Chart {
 public:
  Chart(std::string title, std::string xlabel, std::string ylabel)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)) {}

  void add(Series s) { series_.push_back(std::move(s)); }
  void set_y_range(double lo, double hi) { ylim_ = {lo, hi}; }
  void set_x_range(double lo, double hi) { xlim_ = {lo, hi}; }

  void save(const std::filesystem::path& out) const {
    const int W = 720, H = 480, left = 70, right = 170, top = 40, bottom = 60;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    auto [x0, x1] = xlim_ ? *xlim_ : bounds(true);
    auto [y0, y1] = ylim_ ? *ylim_ : bounds(false);
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const int pw = W - left - right, ph = H - top - bottom;
    const auto px = [&](double x) { return left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * pw)); };
    const auto py = [&](double y) { return top + ph - static_cast<int>(std::lround((y - y0) / (y1 - y0) * ph)); };

    cv::rectangle(img, {left, top}, {left + pw, top + ph}, cv::Scalar(0, 0, 0), 1);
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
      cv::line(img, {px(xv), top + ph}, {px(xv), top + ph + 5}, cv::Scalar(0, 0, 0));
      cv::putText(img, fmt(xv), {px(xv) - 12, top + ph + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
      cv::line(img, {left - 5, py(yv)}, {left, py(yv)}, cv::Scalar(0, 0, 0));
      cv::line(img, {left + 1, py(yv)}, {left + pw - 1, py(yv)}, cv::Scalar(230, 230, 230));
      cv::putText(img, fmt(yv), {8, py(yv) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
    }
    cv::putText(img, title_, {left, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1);
    cv::putText(img, xlabel_, {left + pw / 2 - 30, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));
    cv::putText(img, ylabel_, {8, top - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0));

    int legend_y = top + 15;
    for (const auto& s : series_) {
      std::vector<cv::Point> pts;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) pts.push_back({px(s.x[i]), py(s.y[i])});
      }
      if (s.line && pts.size() > 1) cv::polylines(img, pts, false, s.color, 2, cv::LINE_AA);
      if (s.markers) {
        for (const auto& p : pts) cv::circle(img, p, s.line ? 4 : 2, s.color, cv::FILLED, cv::LINE_AA);
      }
      cv::rectangle(img, {left + pw + 10, legend_y - 8}, {left + pw + 22, legend_y + 2}, s.color, cv::FILLED);
      cv::putText(img, s.label, {left + pw + 28, legend_y + 2}, cv::FONT_HERSHEY_SIMPLEX, 0.42, cv::Scalar(0, 0, 0));
      legend_y += 20;
    }
    if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
    if (!cv::imwrite(out.string(), img)) throw PlotError("cannot write " + out.string());
  }

 private:
  std::pair<double, double> bounds(bool x_axis) const {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : series_) {
      for (double v : x_axis ? s.x : s.y) {
        if (!std::isfinite(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!std::isfinite(lo)) return {0, 1};
    const double pad = hi > lo ? 0.05 * (hi - lo) : 0.5;
    return {lo - pad, hi + pad};
  }

  std::string title_, xlabel_, ylabel_;
  std::vector<Series> series_;
  std::optional<std::pair<double, double>> xlim_, ylim_;
};

}  // namespace

void pr_curves(const eval::EvalReport& report, const std::filesystem::path& out) {
  Chart chart("Precision-recall (" + report.split + ", mAP " + fmt(100 * report.map) + ")", "recall", "precision");
  chart.set_x_range(0, 1);
  chart.set_y_range(0, 1);
  std::size_t k = 0;
  for (const auto& [c, ap] : report.per_class_ap) {
    Series s{"class " + std::to_string(c) + " AP " + fmt(100 * ap), {}, {}, kPalette[k++ % kPalette.size()]};
    const auto rit = report.recall.find(c);
    const auto pit = report.precision.find(c);
    if (rit != report.recall.end() && pit != report.precision.end()) {
      s.x = rit->second;
      s.y = pit->second;
    }
    chart.add(std::move(s));
  }
  chart.save(out);
}

void sweep_curve(const std::vector<exp::SweepResult>& sweeps, const std::filesystem::path& out) {
  if (sweeps.empty()) throw PlotError("no sweep data to plot");
  bool log_x = true;
  for (const auto& sw : sweeps) {
    for (const auto& p : sw.points) log_x = log_x && p.value > 0;
  }
  Chart chart("Target mAP vs trade-off weight", log_x ? "log10(value)" : "value", "mAP");
  std::size_t k = 0;
  for (const auto& sw : sweeps) {
    Series s{exp::to_string(sw.param), {}, {}, kPalette[k++ % kPalette.size()], true, true};
    for (const auto& p : sw.points) {
      if (!p.ok) continue;
      s.x.push_back(log_x ? std::log10(p.value) : p.value);
      s.y.push_back(p.map);
    }
    chart.add(std::move(s));
  }
  chart.save(out);
}

void training_curves(const std::vector<StepMetrics>& metrics, const std::filesystem::path& out) {
  Chart chart("Training losses", "step", "loss");
  Series det{"l_det", {}, {}, kPalette[0]}, mt{"l_mt", {}, {}, kPalette[1]}, adv{"l_adv", {}, {}, kPalette[2]},
      total{"l_total", {}, {}, kPalette[3]};
  // Moving average over a window so noisy single-image losses stay readable.
  const std::size_t window = std::max<std::size_t>(1, metrics.size() / 100);
  for (std::size_t i = 0; i + window <= metrics.size(); i += window) {
    double d = 0, m = 0, a = 0, t = 0;
    for (std::size_t j = i; j < i + window; ++j) {
      d += metrics[j].l_det;
      m += metrics[j].l_mt;
      a += metrics[j].l_adv;
      t += metrics[j].l_total;
    }
    const double x = metrics[i + window / 2].step;
    for (auto [s, v] : {std::pair{&det, d}, {&mt, m}, {&adv, a}, {&total, t}}) {
      s->x.push_back(x);
      s->y.push_back(v / window);
    }
  }
  for (auto* s : {&det, &mt, &adv, &total}) chart.add(std::move(*s));
  chart.save(out);
}

void embedding_scatter(const eval::EmbeddingTable& table, const std::filesystem::path& out) {
  Chart chart("Region features (2-D projection)", "x", "y");
  std::map<std::pair<int, int>, Series> groups;
  for (const auto& r : table.rows) {
    const int d = r.domain == synth::Domain::source ? 0 : 1;
    auto [it, fresh] = groups.try_emplace({r.class_id, d});
    Series& s = it->second;
    if (fresh) {
      s.label = (r.class_id == 0 ? std::string("bg") : "class " + std::to_string(r.class_id)) +
                (d == 0 ? " src" : " tgt");
      cv::Scalar base = kPalette[r.class_id % kPalette.size()];
      s.color = d == 0 ? base : base * 0.55;
      s.line = false;
      s.markers = true;
    }
    s.x.push_back(r.x);
    s.y.push_back(r.y);
  }
  for (auto& [_, s] : groups) chart.add(std::move(s));
  chart.save(out);
}

std::vector<StepMetrics> read_metrics(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw PlotError("cannot open " + jsonl.string());
  std::vector<StepMetrics> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<StepMetrics>());
  }
  return out;
}

}  // namespace mdbank::plot
