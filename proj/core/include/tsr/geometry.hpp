#pragma once

#include <optional>
#include <vector>

#include "tsr/error.hpp"

namespace tsr {

// Axis-aligned rectangle in original-image pixel coordinates, half-open on
// the max edges. Floating point so boxes survive pyramid rescaling.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
};

struct ScoredBox {
  BBox box;
  double score = 0;       // probability in [0,1]
  int class_id = -1;      // optional label (-1 = class-agnostic)
};

// Geometry of one dense-prediction output grid: each output cell scores a
// square `window` of the input, adjacent cells are `stride` pixels apart,
// and cell (0,0)'s window starts at `offset` (negative when padding pulls
// the field over the image border).
struct RFDescriptor {
  int window = 1;
  int stride = 1;
  int offset = 0;
};

// One (kernel, stride, dilation, pad) step of a layer chain, as seen by the
// receptive-field recursion. Pooling is a conv with dilation 1 here.
struct ChainStep {
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  int pad = 0;
};

double iou(const BBox& a, const BBox& b);

// window <- window + (k_eff - 1) * jump, jump <- jump * stride, with
// k_eff = (k - 1) * dilation + 1, starting from window 1, jump 1.
RFDescriptor rf_chain(const std::vector<ChainStep>& steps);

// Maps output cell (row, col) of a grid with descriptor `rf`, computed on a
// pyramid level scaled by `pyramid_scale`, back to original-image pixels.
BBox cell_to_box(int row, int col, const RFDescriptor& rf, double pyramid_scale);

// Greedy non-maximum suppression: repeatedly keep the highest scored box and
// drop everything with IoU >= threshold against it. Output is sorted by
// score descending; ties keep input order.
std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes, double iou_threshold);

// Score-weighted mean of all same-class pool boxes with IoU >= threshold
// against `kept` (kept itself always votes).
BBox box_vote(const ScoredBox& kept, const std::vector<ScoredBox>& pool, double iou_threshold);

BBox clip_box(const BBox& b, double width, double height);

}  // namespace tsr
