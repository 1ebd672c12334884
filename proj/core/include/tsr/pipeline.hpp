#pragma once

#include <string>
#include <vector>

#include "tsr/classifier.hpp"
#include "tsr/proposal.hpp"

namespace tsr {

struct Detection {
  BBox box;
  int class_id = 0;  // 1..10, never background
  double score = 0;
};

struct PipelineConfig {
  int proposal_top_k = 128;
  double decode_threshold = 0.5;
  double nms_iou = 0.45;
  double vote_iou = 0.5;
  double confidence_floor = 0.5;
  PyramidConfig pyramid;
  bool use_branch1 = true, use_branch2 = true;  // ablation switches

  void validate() const;
};

struct DetectResult {
  std::vector<Detection> detections;  // score descending
  std::vector<ScoredBox> proposals;   // class-agnostic, score descending
  double proposal_seconds = 0;
  double classify_seconds = 0;
};

// pyramid -> dense maps -> top-K square proposals -> per-crop classification
// -> class-wise NMS on classification scores -> box voting over the pre-NMS
// pool -> confidence floor.
DetectResult detect(const Tensor& image, const ProposalNet& pnet, const ClassifierNet& cnet,
                    const PipelineConfig& cfg);

struct BatchItem {
  std::string image;  // id/path
  DetectResult result;
  std::string error;  // nonempty when the image failed; batch continues
};

struct BatchReport {
  std::vector<BatchItem> items;
  double proposal_seconds = 0;
  double classify_seconds = 0;
  double total_seconds = 0;
};

BatchReport detect_batch(const std::vector<std::string>& image_paths, const ProposalNet& pnet,
                         const ClassifierNet& cnet, const PipelineConfig& cfg);

// Detection interchange line: `image_id class_name score x_min y_min x_max
// y_max`, floats with two decimals. Proposals use the same layout minus the
// class name.
void write_detections(std::ostream& os, const std::string& image_id,
                      const std::vector<Detection>& dets,
                      const std::vector<std::string>& class_names);
void write_proposals(std::ostream& os, const std::string& image_id,
                     const std::vector<ScoredBox>& proposals);

struct ParsedDetections {
  // image id -> scored boxes (class_id resolved via the class name list)
  std::vector<std::pair<std::string, std::vector<ScoredBox>>> by_image;
};
ParsedDetections parse_detections(std::istream& is, const std::vector<std::string>& class_names,
                                  bool with_class);

}  // namespace tsr
