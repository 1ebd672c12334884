#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsr/geometry.hpp"

namespace tsr {

enum class Visibility { Visible, Blurred, Occluded, SideRoad };

const char* visibility_name(Visibility v);
Visibility visibility_from_name(const std::string& name);

// Ground-truth record. Class ids 1..10 index the dataset's class list;
// 0 is reserved for background and never annotated.
struct Annotation {
  std::string image_id;
  BBox box;
  int class_id = 0;
  Visibility visibility = Visibility::Visible;
};

enum class ScaleBucket { Small, Medium, Large };

// Area cuts at 32^2 and 96^2; boundary areas land in Medium.
ScaleBucket bucketize(const BBox& box);
const char* bucket_name(ScaleBucket b);

// -- matching -----------------------------------------------------------------

struct GtBox {
  BBox box;
  int class_id = 0;
};

struct MatchResult {
  std::vector<std::pair<int, int>> tp;  // (detection index, gt index)
  std::vector<int> fp;                  // detection indices
  std::vector<int> fn;                  // gt indices
  std::vector<int> discarded;           // detections absorbed by ignored gts
};

// Greedy one-to-one matching in score order: each detection takes the
// unmatched highest-IoU ground truth of its class (any class when
// class_agnostic) if that IoU reaches the threshold. Detections that fail
// but overlap an ignored ground truth at the threshold are discarded
// rather than counted as false positives.
MatchResult match_detections(const std::vector<ScoredBox>& dets, const std::vector<GtBox>& gts,
                             double iou_threshold, bool class_agnostic = false,
                             const std::vector<GtBox>& ignored = {});

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 1.0;
};

// P = TP/(TP+FP) (1.0 with no detections), R = TP/(TP+FN) (1.0 with no GTs).
PrecisionRecall precision_recall(int tp, int fp, int fn);

// -- threshold-sweep metrics -----------------------------------------------------

struct RankedDet {
  double score = 0;
  bool tp = false;
};

// Area under the precision-recall curve with the all-point interpolation
// (precision envelope made monotonically non-increasing before integration).
// nullopt when there are no ground truths to recall.
std::optional<double> average_precision(std::vector<RankedDet> dets, int num_gt);

inline std::vector<double> ar_iou_thresholds() {
  std::vector<double> t;
  for (int k = 50; k <= 95; k += 5) t.push_back(k / 100.0);
  return t;
}

// Class-agnostic recall of the top-k proposals per image, averaged over the
// IoU thresholds 0.50..0.95.
struct ImageProposals {
  std::vector<ScoredBox> proposals;  // score-sorted descending
  std::vector<GtBox> gts;
};
double average_recall(const std::vector<ImageProposals>& images, int k);
// Restricted to ground truths of one scale bucket; matching still runs
// against every ground truth so a proposal cannot double count.
double average_recall_bucket(const std::vector<ImageProposals>& images, int k, ScaleBucket bucket);

// -- the standard benchmark filter ----------------------------------------------

// Keeps Visible annotations with both sides > min_side; everything else
// becomes an ignore region (not matchable, not a false negative, and
// detections covering one are not penalized).
struct FilteredAnnotations {
  std::vector<Annotation> kept;
  std::vector<Annotation> ignored;
};
FilteredAnnotations standard_benchmark_filter(const std::vector<Annotation>& annotations,
                                              double min_side = 50.0);

// -- full report ------------------------------------------------------------------

struct EvalImage {
  std::string image_id;
  std::vector<ScoredBox> detections;  // class_id 1..10
  std::vector<ScoredBox> proposals;   // class-agnostic; may be empty
  std::vector<Annotation> annotations;
};

struct EvalConfig {
  double iou_threshold = 0.5;
  bool standard_filter = false;  // visible and > min_side x min_side only
  double min_side = 50.0;
  std::vector<int> ar_budgets = {50, 100, 300};
  int ar_bucket_budget = 100;
};

struct ClassReport {
  std::string name;
  int gt_count = 0;
  int tp = 0, fp = 0, fn = 0;
  double precision = 1.0, recall = 1.0;
  std::optional<double> ap;
};

struct MatchTrace {
  std::string image_id;
  int class_id = 0;
  double score = 0;
  BBox box;
  bool tp = false;
  double iou = 0;  // against the matched gt; 0 for fp
};

struct EvalReport {
  std::vector<ClassReport> per_class;  // index 0 unused (background)
  double mean_precision = 1.0, mean_recall = 1.0;  // unweighted over classes with GTs
  std::optional<double> map;
  std::array<std::optional<double>, 3> map_bucket;  // small/medium/large
  std::map<int, double> ar_at;                      // proposal budget -> AR
  std::array<std::optional<double>, 3> ar_bucket;
  int total_gt = 0, total_tp = 0, total_fp = 0, total_fn = 0;
  std::vector<MatchTrace> traces;
};

EvalReport evaluate(const std::vector<EvalImage>& images,
                    const std::vector<std::string>& class_names, const EvalConfig& cfg);

// Report emission: CSV tables plus a machine-readable JSON summary and
// PR-curve point lists.
void write_report_files(const EvalReport& report, const std::vector<EvalImage>& images,
                        const std::vector<std::string>& class_names, const EvalConfig& cfg,
                        const std::string& out_dir);
void print_report(const EvalReport& report, std::ostream& os);

}  // namespace tsr
