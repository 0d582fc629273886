#pragma once

#include <array>
#include <span>
#include <vector>

namespace mdbank {

/// Axis-aligned box (x1, y1, x2, y2) in image pixel coordinates.
using Box = std::array<double, 4>;
/// Center/size log-space regression deltas (dx, dy, dw, dh).
using BoxDelta = std::array<double, 4>;

double box_width(const Box& b);
double box_height(const Box& b);
double box_area(const Box& b);
double iou(const Box& a, const Box& b);
Box clip_box(const Box& b, double width, double height);

/// Deltas that map `reference` onto `target`, divided component-wise by
/// `weights`' reciprocal (i.e. multiplied by weights).
BoxDelta encode_box(const Box& reference, const Box& target, const BoxDelta& weights);
Box decode_box(const Box& reference, const BoxDelta& delta, const BoxDelta& weights);

/// Strict total order used for every score sort: score descending, then box
/// coordinates ascending. Makes ranking independent of input order.
bool ranks_before(double score_a, const Box& a, double score_b, const Box& b);

/// Greedy non-maximum suppression. Returns surviving indices in rank order.
std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold,
                     int max_keep = -1);

}  // namespace mdbank
