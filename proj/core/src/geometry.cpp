#include "tsr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tsr {

double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

RFDescriptor rf_chain(const std::vector<ChainStep>& steps) {
  if (steps.empty()) throw Error("rf_chain: empty layer chain");
  RFDescriptor rf;
  for (const ChainStep& s : steps) {
    const int k_eff = (s.kernel - 1) * s.dilation + 1;
    rf.window += (k_eff - 1) * rf.stride;
    rf.offset -= s.pad * rf.stride;
    rf.stride *= s.stride;
  }
  return rf;
}

BBox cell_to_box(int row, int col, const RFDescriptor& rf, double pyramid_scale) {
  if (!(pyramid_scale > 0)) throw Error("cell_to_box: pyramid_scale must be > 0");
  const double x0 = rf.offset + double(col) * rf.stride;
  const double y0 = rf.offset + double(row) * rf.stride;
  return BBox{x0 / pyramid_scale, y0 / pyramid_scale, (x0 + rf.window) / pyramid_scale,
              (y0 + rf.window) / pyramid_scale};
}

std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) throw Error("nms: threshold must be in (0,1)");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<char> removed(boxes.size(), 0);
  std::vector<ScoredBox> kept;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (removed[order[i]]) continue;
    const ScoredBox& top = boxes[order[i]];
    kept.push_back(top);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (removed[order[j]]) continue;
      if (iou(top.box, boxes[order[j]].box) >= iou_threshold) removed[order[j]] = 1;
    }
  }
  return kept;
}

// `kept` is expected to be one of the pool entries (it came out of NMS over
// the pool), so it is not added separately; when nothing in the pool
// qualifies the kept box passes through unchanged.
BBox box_vote(const ScoredBox& kept, const std::vector<ScoredBox>& pool, double iou_threshold) {
  double sx0 = 0, sy0 = 0, sx1 = 0, sy1 = 0, total = 0;
  for (const ScoredBox& v : pool) {
    if (v.class_id != kept.class_id) continue;
    if (iou(kept.box, v.box) < iou_threshold) continue;
    sx0 += v.box.x_min * v.score;
    sy0 += v.box.y_min * v.score;
    sx1 += v.box.x_max * v.score;
    sy1 += v.box.y_max * v.score;
    total += v.score;
  }
  if (!(total > 0)) return kept.box;
  return BBox{sx0 / total, sy0 / total, sx1 / total, sy1 / total};
}

BBox clip_box(const BBox& b, double width, double height) {
  return BBox{std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height),
              std::clamp(b.x_max, 0.0, width), std::clamp(b.y_max, 0.0, height)};
}

}  // namespace tsr
