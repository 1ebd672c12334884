#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tsr/dataset.hpp"
#include "tsr/geometry.hpp"
#include "tsr/nn.hpp"

namespace tsr {

// The region-proposal network: a shared two-conv backbone with two dense
// prediction branches. Branch 1 taps the first backbone stage and scores
// 20x20 windows every 2 pixels; branch 2 taps the backbone end and scores
// 40x40 windows every 4 pixels. Run over an image pyramid, the two branches
// give 2 x #scales distinct detection window sizes.

enum class Branch { B1 = 0, B2 = 1 };

inline const char* branch_name(Branch b) { return b == Branch::B1 ? "branch1" : "branch2"; }

struct PyramidConfig {
  std::vector<double> scales = {1.0, 0.6, 0.36, 0.216, 0.1296};
  void validate() const;
};

struct PyramidLevel {
  Tensor image;
  double scale = 1.0;
};

struct ProbabilityMap {
  std::vector<float> grid;  // h*w sign probabilities in [0,1]
  int h = 0, w = 0;
  Branch branch = Branch::B1;
  RFDescriptor rf;
  double pyramid_scale = 1.0;
};

enum GtLabel : std::int8_t { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct GroundTruthMap {
  std::vector<std::int8_t> labels;  // GtLabel per cell
  int h = 0, w = 0;
  Branch branch = Branch::B1;
  RFDescriptor rf;
  double pyramid_scale = 1.0;
};

struct OHEMConfig {
  int top_n = 128;
};

struct ProposalNet {
  Network net;
  int logits_id[2] = {-1, -1};
  int head_id[2] = {-1, -1};
  RFDescriptor rf[2];

  int logits(Branch b) const { return logits_id[int(b)]; }
  int head(Branch b) const { return head_id[int(b)]; }
  const RFDescriptor& field(Branch b) const { return rf[int(b)]; }
};

// Builds the dual multi-scale net. Two builds with the same seed are
// bit-identical.
ProposalNet build_proposal_net(std::uint64_t seed, float init_stddev = 0.01f);

// Rebinds branch metadata onto a network loaded from disk, revalidating the
// expected topology.
ProposalNet proposal_from_network(Network net);

// The (kernel, stride, dilation, pad) chain from the input to a branch head,
// read off the network's own layer specs; the single source for all
// receptive-field geometry.
std::vector<ChainStep> branch_chain(const Network& net, Branch b);

// Output grid of a branch on an h x w level; (0,0) when the level is too
// small for the branch's window.
std::pair<int, int> branch_grid_size(const Network& net, Branch b, int h, int w);

// Bilinear pyramid; level 0 is the original image. Levels too small for
// branch 1's window are dropped. An image below branch 1's window at scale
// 1 is an error.
std::vector<PyramidLevel> build_pyramid(const Tensor& image, const PyramidConfig& cfg);

// Dense forward over the pyramid: up to two probability maps per level
// (channel 1 of each branch softmax). Branch toggles support the ablation
// experiments.
std::vector<ProbabilityMap> forward_dense(const ProposalNet& net,
                                          const std::vector<PyramidLevel>& pyramid,
                                          bool use_b1 = true, bool use_b2 = true);

// Every cell at or above `threshold` becomes a square box via cell_to_box,
// clipped to the image; pooled over all maps, sorted by score descending,
// truncated to top_k.
std::vector<ScoredBox> decode_proposals(const std::vector<ProbabilityMap>& maps, double threshold,
                                        int top_k, double image_w, double image_h);

// Ground-truth maps for every (pyramid level, branch) grid: positive above
// 0.7 max-IoU, negative below 0.3, ignore between. Window boxes and IoU are
// computed in original-image coordinates.
struct GtThresholds {
  double positive = 0.7;
  double negative = 0.3;
};
std::vector<GroundTruthMap> make_gt_maps(const std::vector<BBox>& annotations, int image_w,
                                         int image_h, const ProposalNet& net,
                                         const PyramidConfig& cfg,
                                         const GtThresholds& thresholds = {});

// Positions (row-major) of the min(top_n, non-ignored) largest losses;
// ties keep the earlier position.
std::vector<int> ohem_select(const std::vector<float>& loss_grid,
                             const std::vector<std::int8_t>& mask, int top_n);

// Photometric augmentation: contrast in [0.7,1.3], Gaussian blur sigma in
// [0,1.5], brightness within +-30/255, each applied with probability 1/2.
// Geometry is untouched, so annotations pass through unchanged.
Tensor augment(const Tensor& image, std::mt19937& rng);

struct ProposalTrainOptions {
  SGDConfig sgd{1e-3f, 0.9f, 5e-4f, {{20000, 0.1f}}};
  OHEMConfig ohem;
  PyramidConfig pyramid;
  long iterations = 50000;
  std::uint64_t seed = 1;
  GtThresholds gt_thresholds;
  std::string loss_log_path;    // CSV: iteration,active_branch,mean_selected_loss
  std::string checkpoint_path;  // model; ".state" sidecar alongside
  long checkpoint_every = 0;    // 0 = only at the end (when a path is given)
  std::string resume_state;     // sidecar to resume from
  std::function<void(long, Branch, float)> progress;
};

struct TrainLogEntry {
  long iteration = 0;
  int branch = 0;  // 1 or 2
  float loss = 0;
};

// Alternating-branch training: odd iterations update branch 1, even ones
// branch 2; the backbone follows whichever branch is active, the other
// branch stays bit-identical. Batch size is one full image through the
// pyramid, with the top-N hard positions back-propagated.
std::vector<TrainLogEntry> train_proposal(ProposalNet& net, const DatasetManifest& data,
                                          const ProposalTrainOptions& opts);

}  // namespace tsr
