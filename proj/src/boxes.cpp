#include "mdbank/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mdbank {
namespace {
const double kMaxLogScale = std::log(1000.0 / 16.0);
}

double box_width(const Box& b) { return std::max(0.0, b[2] - b[0]); }
double box_height(const Box& b) { return std::max(0.0, b[3] - b[1]); }
double box_area(const Box& b) { return box_width(b) * box_height(b); }

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b[0], 0.0, width), std::clamp(b[1], 0.0, height), std::clamp(b[2], 0.0, width),
          std::clamp(b[3], 0.0, height)};
}

BoxDelta encode_box(const Box& reference, const Box& target, const BoxDelta& weights) {
  const double rw = reference[2] - reference[0], rh = reference[3] - reference[1];
  const double rx = reference[0] + 0.5 * rw, ry = reference[1] + 0.5 * rh;
  const double tw = target[2] - target[0], th = target[3] - target[1];
  const double tx = target[0] + 0.5 * tw, ty = target[1] + 0.5 * th;
  return {weights[0] * (tx - rx) / rw, weights[1] * (ty - ry) / rh, weights[2] * std::log(tw / rw),
          weights[3] * std::log(th / rh)};
}

Box decode_box(const Box& reference, const BoxDelta& delta, const BoxDelta& weights) {
  const double rw = reference[2] - reference[0], rh = reference[3] - reference[1];
  const double rx = reference[0] + 0.5 * rw, ry = reference[1] + 0.5 * rh;
  const double dx = delta[0] / weights[0], dy = delta[1] / weights[1];
  const double dw = std::min(delta[2] / weights[2], kMaxLogScale);
  const double dh = std::min(delta[3] / weights[3], kMaxLogScale);
  const double cx = rx + dx * rw, cy = ry + dy * rh;
  const double w = rw * std::exp(dw), h = rh * std::exp(dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

bool ranks_before(double score_a, const Box& a, double score_b, const Box& b) {
  if (score_a != score_b) return score_a > score_b;
  return a < b;
}

std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold,
                     int max_keep) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return ranks_before(scores[i], boxes[i], scores[j], boxes[j]); });
  std::vector<int> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (std::size_t a = 0; a < order.size(); ++a) {
    const int i = order[a];
    if (removed[i]) continue;
    keep.push_back(i);
    if (max_keep > 0 && static_cast<int>(keep.size()) >= max_keep) break;
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const int j = order[b];
      if (!removed[j] && iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = 1;
    }
  }
  return keep;
}

}  // namespace mdbank
