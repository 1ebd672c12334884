#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tsr/dataset.hpp"
#include "tsr/nn.hpp"

namespace tsr {

// The classification network: two basic conv stages, three stacked 3x3
// stages whose outputs are pooled to a common 2x2 and concatenated
// (multi-scale feature fusion), a four-path inception block, global average
// pooling and an 11-way classifier. Class 0 is background; 1..10 are the
// sign classes.

constexpr int kNumClasses = 11;
constexpr int kCropSize = 64;

struct ClassifierNet {
  Network net;
  int logits_id = -1;  // fc layer
  int head_id = -1;    // softmax
};

ClassifierNet build_classifier_net(std::uint64_t seed, float init_stddev = 0.01f);
ClassifierNet classifier_from_network(Network net);

struct CropSample {
  Tensor patch;  // (1,3,64,64)
  int label = 0;
  BBox source_box;
};

struct ClassifyResult {
  int class_id = 0;
  double score = 0;
  std::vector<double> distribution;  // 11 probabilities
};

// Crops the (clipped) box, resizes to 64x64 and classifies. Argmax ties take
// the lowest class id.
ClassifyResult classify_crop(const ClassifierNet& net, const Tensor& image, const BBox& box);

// One forward over a batch of 64x64 patches.
std::vector<ClassifyResult> classify_patches(const ClassifierNet& net, const Tensor& batch);

// Label for a candidate square crop: the best-overlap annotation's class
// above IoU 0.6, background below 0.5, nothing (discard) in between.
std::optional<int> label_for_crop(const std::vector<Annotation>& annotations, const BBox& crop);

struct CropCounts {
  int positives = 4;  // per annotation
  int negatives = 4;  // per image
};

// Random square crops: jittered copies of each annotation that keep IoU
// over 0.6 (positives), and uniform squares with every IoU under 0.5
// (negatives, label 0). All resized to 64x64.
std::vector<CropSample> sample_training_crops(const Tensor& image,
                                              const std::vector<Annotation>& annotations,
                                              const CropCounts& counts, std::mt19937& rng,
                                              int min_size = 16, int max_size = 200);

// Draws a fresh crop sample from the training images, classifies it with
// the current model, and returns every misclassified crop with its true
// label.
std::vector<CropSample> bootstrap_mine(const ClassifierNet& net, const DatasetManifest& data,
                                       const CropCounts& counts, std::mt19937& rng);

struct ClassifierTrainOptions {
  SGDConfig sgd{1e-3f, 0.9f, 5e-4f, {{20000, 0.2f}}};
  long iterations = 100000;
  int batch_size = 128;
  double bootstrap_at = 0.5;  // fraction of the budget after which hard
                              // examples are mined and appended
  CropCounts counts;
  int min_size = 16, max_size = 200;
  std::uint64_t seed = 1;
  std::string loss_log_path;  // CSV: iteration,mean_loss
  std::string checkpoint_path;
  long checkpoint_every = 0;
  std::string crop_cache_path;  // optional binary pack of the initial crops
  std::function<void(long, float)> progress;
};

struct ClassifierLogEntry {
  long iteration = 0;
  float loss = 0;
};

std::vector<ClassifierLogEntry> train_classifier(ClassifierNet& net, const DatasetManifest& data,
                                                 const ClassifierTrainOptions& opts);

// -- crop cache ----------------------------------------------------------------
// "CPK1": u32 count, then per crop a u8 label and 3*64*64 bytes of pixels.

void save_crop_cache(const std::string& path, const std::vector<CropSample>& crops);
std::vector<CropSample> load_crop_cache(const std::string& path);

}  // namespace tsr
