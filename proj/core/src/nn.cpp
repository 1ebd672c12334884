#include "tsr/nn.hpp"

#include <algorithm>
#include <cstring>

namespace tsr {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Relu: return "relu";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Fc: return "fc";
    case LayerKind::Concat: return "concat";
    case LayerKind::AdaptiveMaxPool: return "adaptive_maxpool";
    case LayerKind::GlobalAvgPool: return "global_avgpool";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::MaxPool, LayerKind::AvgPool, LayerKind::Relu,
                      LayerKind::Softmax, LayerKind::Fc, LayerKind::Concat,
                      LayerKind::AdaptiveMaxPool, LayerKind::GlobalAvgPool})
    if (name == layer_kind_name(k)) return k;
  throw DataError("unknown layer kind: " + name);
}

int Network::add(LayerDef def) {
  const int id = int(layers_.size());
  if (def.inputs.empty()) throw ShapeError("layer needs at least one input");
  for (int in : def.inputs)
    if (in < kInputId || in >= id) throw ShapeError("layer input id out of range");
  if (def.kind == LayerKind::Concat) {
    if (def.inputs.size() < 1) throw ShapeError("concat needs inputs");
  } else if (def.inputs.size() != 1) {
    throw ShapeError("non-concat layers take exactly one input");
  }
  layers_.push_back(std::move(def));
  w_.emplace_back();
  b_.emplace_back();
  vw_.emplace_back();
  vb_.emplace_back();
  return id;
}

void Network::mark_head(int layer_id) {
  if (layer_id < 0 || layer_id >= int(layers_.size())) throw ShapeError("bad head id");
  heads_.push_back(layer_id);
}

int Network::single_head() const {
  if (heads_.size() != 1) throw Error("network does not have exactly one head");
  return heads_[0];
}

namespace {

// Channel count produced by each layer; spatial sizes stay symbolic.
int infer_channels(const Network& net, const std::vector<int>& chan, const LayerDef& def) {
  auto in_c = [&](int id) { return id == kInputId ? net.input_channels() : chan[id]; };
  switch (def.kind) {
    case LayerKind::Conv: return def.conv.out_channels;
    case LayerKind::Fc: return def.fc_out;
    case LayerKind::Concat: {
      int c = 0;
      for (int id : def.inputs) c += in_c(id);
      return c;
    }
    default: return in_c(def.inputs[0]);
  }
}

}  // namespace

void Network::init_params(int input_channels, std::mt19937& rng, float stddev) {
  input_channels_ = input_channels;
  std::vector<int> chan(layers_.size(), 0);
  for (std::size_t id = 0; id < layers_.size(); ++id) {
    const LayerDef& def = layers_[id];
    const int in_c = def.inputs[0] == kInputId ? input_channels : chan[def.inputs[0]];
    chan[id] = infer_channels(*this, chan, def);
    if (def.kind == LayerKind::Conv) {
      const ConvSpec& s = def.conv;
      w_[id] = gaussian_init(Shape{s.out_channels, in_c, s.kh, s.kw}, 0.0, stddev, rng);
      if (s.has_bias) b_[id] = Tensor(Shape{1, s.out_channels, 1, 1});
      vw_[id] = Tensor(w_[id].shape());
      if (s.has_bias) vb_[id] = Tensor(b_[id].shape());
    } else if (def.kind == LayerKind::Fc) {
      if (def.fc_in < 1) throw ShapeError("fc layer missing input length");
      w_[id] = gaussian_init(Shape{def.fc_out, def.fc_in, 1, 1}, 0.0, stddev, rng);
      b_[id] = Tensor(Shape{1, def.fc_out, 1, 1});
      vw_[id] = Tensor(w_[id].shape());
      vb_[id] = Tensor(b_[id].shape());
    }
  }
}

std::size_t Network::parameter_count() const {
  std::size_t total = 0;
  for (std::size_t id = 0; id < layers_.size(); ++id) total += layer_parameter_count(int(id));
  return total;
}

std::vector<int> Network::ancestors_of(std::span<const int> head_ids) const {
  std::vector<char> mark(layers_.size(), 0);
  std::vector<int> stack(head_ids.begin(), head_ids.end());
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (id == kInputId || mark[id]) continue;
    mark[id] = 1;
    for (int in : layers_[id].inputs) stack.push_back(in);
  }
  std::vector<int> out;
  for (std::size_t id = 0; id < layers_.size(); ++id)
    if (mark[id]) out.push_back(int(id));
  return out;
}

Network::Trace Network::forward(const Tensor& input, std::span<const int> wanted_heads) const {
  if (input.c() != input_channels_)
    throw ShapeError("network expects " + std::to_string(input_channels_) + " input channels, got " +
                     std::to_string(input.c()));
  std::vector<int> heads(wanted_heads.begin(), wanted_heads.end());
  if (heads.empty()) heads = heads_;
  const std::vector<int> needed = ancestors_of(heads);
  std::vector<char> need(layers_.size(), 0);
  for (int id : needed) need[id] = 1;

  Trace tr;
  tr.input = input;
  tr.outputs.resize(layers_.size());
  tr.argmax.resize(layers_.size());
  tr.pool_spec.resize(layers_.size());

  auto src = [&](int id) -> const Tensor& { return id == kInputId ? tr.input : tr.outputs[id]; };

  for (std::size_t id = 0; id < layers_.size(); ++id) {
    if (!need[id]) continue;
    const LayerDef& def = layers_[id];
    const Tensor& x = src(def.inputs[0]);
    switch (def.kind) {
      case LayerKind::Conv:
        tr.outputs[id] = conv2d_forward(x, def.conv, w_[id], b_[id]);
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        PoolSpec s = def.pool;
        s.kind = def.kind == LayerKind::MaxPool ? PoolKind::Max : PoolKind::Avg;
        auto r = pool_forward(x, s);
        tr.outputs[id] = std::move(r.out);
        tr.argmax[id] = std::move(r.argmax);
        tr.pool_spec[id] = s;
        break;
      }
      case LayerKind::AdaptiveMaxPool: {
        const PoolSpec s = adaptive_pool_spec(x.shape(), def.adaptive_target);
        auto r = pool_forward(x, s);
        tr.outputs[id] = std::move(r.out);
        tr.argmax[id] = std::move(r.argmax);
        tr.pool_spec[id] = s;
        break;
      }
      case LayerKind::Relu:
        tr.outputs[id] = relu_forward(x);
        break;
      case LayerKind::Softmax:
        tr.outputs[id] = softmax_channels(x);
        break;
      case LayerKind::Fc:
        tr.outputs[id] = fc_forward(x, w_[id], b_[id]);
        break;
      case LayerKind::Concat: {
        std::vector<const Tensor*> ins;
        ins.reserve(def.inputs.size());
        for (int in : def.inputs) ins.push_back(&src(in));
        tr.outputs[id] = concat_channels(ins);
        break;
      }
      case LayerKind::GlobalAvgPool:
        tr.outputs[id] = global_avg_pool_forward(x);
        break;
    }
  }
  return tr;
}

Network::Gradients Network::zero_gradients() const {
  Gradients g;
  g.w.resize(layers_.size());
  g.b.resize(layers_.size());
  for (std::size_t id = 0; id < layers_.size(); ++id) {
    if (!w_[id].empty()) g.w[id] = Tensor(w_[id].shape());
    if (!b_[id].empty()) g.b[id] = Tensor(b_[id].shape());
  }
  return g;
}

namespace {

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  if (dst.shape() != src.shape()) throw ShapeError("gradient accumulation shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

void Network::backward(const Trace& trace, int at, const Tensor& grad, Gradients& grads,
                       bool sparse) const {
  if (at < 0 || at >= int(layers_.size()) || trace.outputs[at].empty())
    throw ShapeError("backward injection layer was not computed");
  if (grad.shape() != trace.outputs[at].shape())
    throw ShapeError("backward gradient shape mismatch at layer " + std::to_string(at));

  std::vector<Tensor> gbuf(layers_.size());
  gbuf[at] = grad;

  auto src = [&](int id) -> const Tensor& {
    return id == kInputId ? trace.input : trace.outputs[id];
  };

  for (int id = at; id >= 0; --id) {
    if (gbuf[id].empty()) continue;
    const LayerDef& def = layers_[id];
    const Tensor g = std::move(gbuf[id]);
    const bool want_gin = def.inputs[0] != kInputId || def.kind == LayerKind::Concat;
    switch (def.kind) {
      case LayerKind::Conv: {
        std::span<const int> active;
        std::optional<std::vector<int>> pos;
        if (sparse && g.n() == 1) {
          pos = sparse_positions(g, 0.25);
          if (pos) active = *pos;
        }
        auto cg = conv2d_backward(src(def.inputs[0]), def.conv, w_[id], g, want_gin, active);
        add_into(grads.w[id], cg.weights);
        if (!cg.bias.empty()) add_into(grads.b[id], cg.bias);
        if (want_gin) add_into(gbuf[def.inputs[0]], cg.input);
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
      case LayerKind::AdaptiveMaxPool: {
        Tensor gin =
            pool_backward(trace.pool_spec[id], src(def.inputs[0]).shape(), trace.argmax[id], g);
        if (want_gin) add_into(gbuf[def.inputs[0]], gin);
        break;
      }
      case LayerKind::Relu: {
        Tensor gin = relu_backward(src(def.inputs[0]), g);
        if (want_gin) add_into(gbuf[def.inputs[0]], gin);
        break;
      }
      case LayerKind::Softmax:
        throw Error("backward through softmax is unsupported; inject at the logits layer");
      case LayerKind::Fc: {
        auto fg = fc_backward(src(def.inputs[0]), w_[id], g, want_gin);
        add_into(grads.w[id], fg.weights);
        add_into(grads.b[id], fg.bias);
        if (want_gin) {
          // fc flattens; restore the producer's shape
          add_into(gbuf[def.inputs[0]], fg.input.reshape(src(def.inputs[0]).shape()));
        }
        break;
      }
      case LayerKind::Concat: {
        std::vector<Shape> shapes;
        shapes.reserve(def.inputs.size());
        for (int in : def.inputs) shapes.push_back(src(in).shape());
        auto parts = concat_backward(shapes, g);
        for (std::size_t i = 0; i < parts.size(); ++i)
          if (def.inputs[i] != kInputId) add_into(gbuf[def.inputs[i]], parts[i]);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        Tensor gin = global_avg_pool_backward(src(def.inputs[0]).shape(), g);
        if (want_gin) add_into(gbuf[def.inputs[0]], gin);
        break;
      }
    }
  }
}

float SGDConfig::lr_at(long iteration) const {
  float lr = learning_rate;
  for (const auto& [it, mult] : lr_schedule)
    if (iteration >= it) lr *= mult;
  return lr;
}

void SGDConfig::validate() const {
  if (!(learning_rate > 0)) throw Error("learning_rate must be > 0");
  if (momentum < 0 || momentum >= 1) throw Error("momentum must be in [0,1)");
  if (weight_decay < 0) throw Error("weight_decay must be >= 0");
}

namespace {

void sgd_update(Tensor& w, Tensor& v, const Tensor& g, float lr, float momentum, float wd) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] - lr * (g[i] + wd * w[i]);
    w[i] += v[i];
  }
}

}  // namespace

void sgd_step(Network& net, const Network::Gradients& grads, const SGDConfig& cfg, long iteration,
              std::span<const int> active_layers) {
  cfg.validate();
  const float lr = cfg.lr_at(iteration);
  std::vector<int> all;
  if (active_layers.empty()) {
    all.resize(net.layers().size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
    active_layers = all;
  }
  for (int id : active_layers) {
    if (!net.has_params(id)) continue;
    sgd_update(net.weights(id), net.velocity_w(id), grads.w[id], lr, cfg.momentum,
               cfg.weight_decay);
    if (!net.bias(id).empty())
      sgd_update(net.bias(id), net.velocity_b(id), grads.b[id], lr, cfg.momentum, cfg.weight_decay);
  }
}

}  // namespace tsr
