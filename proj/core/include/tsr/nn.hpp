#pragma once

#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsr/kernels.hpp"
#include "tsr/tensor.hpp"

namespace tsr {

enum class LayerKind {
  Conv,
  MaxPool,
  AvgPool,
  Relu,
  Softmax,
  Fc,
  Concat,
  AdaptiveMaxPool,  // max pool down to a fixed square size
  GlobalAvgPool,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

// Layer ids are indices into the network's layer list; kInputId denotes the
// network input image.
constexpr int kInputId = -1;

struct LayerDef {
  LayerKind kind = LayerKind::Relu;
  ConvSpec conv{};          // Conv
  PoolSpec pool{};          // MaxPool / AvgPool
  int fc_out = 0;           // Fc: output length
  int fc_in = 0;            // Fc: flattened input length
  int adaptive_target = 0;  // AdaptiveMaxPool
  std::vector<int> inputs;  // producer layer ids (earlier layers only)
  std::string name;
};

// A feed-forward graph of layers with owned parameters and momentum state.
// Layers are stored in topological order; a layer may consume the network
// input or any earlier layer, and several layers may share one producer.
class Network {
 public:
  int add(LayerDef def);
  void mark_head(int layer_id);

  const std::vector<LayerDef>& layers() const { return layers_; }
  const std::vector<int>& heads() const { return heads_; }
  int single_head() const;

  bool has_params(int id) const { return !w_[id].empty(); }
  Tensor& weights(int id) { return w_[id]; }
  const Tensor& weights(int id) const { return w_[id]; }
  Tensor& bias(int id) { return b_[id]; }
  const Tensor& bias(int id) const { return b_[id]; }
  Tensor& velocity_w(int id) { return vw_[id]; }
  const Tensor& velocity_w(int id) const { return vw_[id]; }
  Tensor& velocity_b(int id) { return vb_[id]; }
  const Tensor& velocity_b(int id) const { return vb_[id]; }

  // Gaussian weights, zero biases. Parameter shapes are derived by shape
  // inference from `input_channels`, which also freezes per-layer input
  // channel counts for later validation.
  void init_params(int input_channels, std::mt19937& rng, float stddev = 0.01f);

  std::size_t parameter_count() const;
  std::size_t layer_parameter_count(int id) const { return w_[id].size() + b_[id].size(); }

  struct Trace {
    Tensor input;
    std::vector<Tensor> outputs;                    // empty where not computed
    std::vector<std::vector<std::int32_t>> argmax;  // max-pool winners
    std::vector<PoolSpec> pool_spec;                // effective pool spec per layer
  };

  // Runs the layers feeding the requested heads (all heads when empty).
  Trace forward(const Tensor& input, std::span<const int> wanted_heads = {}) const;

  struct Gradients {
    std::vector<Tensor> w, b;
  };
  Gradients zero_gradients() const;

  // Propagates dL/d(output of layer `at`) down to the input, accumulating
  // parameter gradients. With `sparse` set, convolution backward gathers
  // only the spatial positions that carry gradient (hard-example training).
  void backward(const Trace& trace, int at, const Tensor& grad, Gradients& grads,
                bool sparse = false) const;

  // Layer ids reachable upward from the given heads (the trainable set when
  // one branch is active).
  std::vector<int> ancestors_of(std::span<const int> head_ids) const;

  int input_channels() const { return input_channels_; }

 private:
  std::vector<LayerDef> layers_;
  std::vector<Tensor> w_, b_;
  std::vector<Tensor> vw_, vb_;
  std::vector<int> heads_;
  int input_channels_ = 0;

  friend Network load_network(const std::string& path);
};

struct SGDConfig {
  float learning_rate = 1e-3f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  // (iteration, multiplier): the multiplier applies from that iteration on.
  std::vector<std::pair<long, float>> lr_schedule;

  float lr_at(long iteration) const;
  void validate() const;
};

// v <- momentum*v - lr(iter)*(g + weight_decay*w); w <- w + v.
// Only layers in `active_layers` are touched (all layers when empty); frozen
// layers keep parameters and momentum bit-identical.
void sgd_step(Network& net, const Network::Gradients& grads, const SGDConfig& cfg, long iteration,
              std::span<const int> active_layers = {});

// -- model files --------------------------------------------------------------
// Magic "NNM1", little-endian u32 manifest length, JSON manifest (version tag,
// layer specs, heads), then one tensor snapshot per parameter in layer order.

inline constexpr const char* kModelVersion = "tsr-model-1";

void save_network(const std::string& path, const Network& net);
Network load_network(const std::string& path);

// Training-state sidecar ("NNS1"): iteration, PRNG state, momentum buffers.
struct TrainState {
  long iteration = 0;
  std::string rng_state;
};
void save_train_state(const std::string& path, const Network& net, const TrainState& st);
TrainState load_train_state(const std::string& path, Network& net);

}  // namespace tsr
