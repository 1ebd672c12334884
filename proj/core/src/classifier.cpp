#include "tsr/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tsr/image.hpp"

namespace tsr {

ClassifierNet build_classifier_net(std::uint64_t seed, float init_stddev) {
  ClassifierNet c;
  Network& n = c.net;
  auto conv = [&](int in, int ch, int k, int pad, int dil, const char* name) {
    return n.add({.kind = LayerKind::Conv,
                  .conv = {.out_channels = ch, .kh = k, .kw = k, .pad = pad, .dilation = dil},
                  .inputs = {in},
                  .name = name});
  };
  auto relu = [&](int in) { return n.add({.kind = LayerKind::Relu, .inputs = {in}}); };
  auto pool2 = [&](int in) {
    return n.add({.kind = LayerKind::MaxPool, .pool = {.kernel = 2, .stride = 2}, .inputs = {in}});
  };

  // basic layers: 64 -> 32 -> 16
  const int s1 = pool2(relu(conv(kInputId, 100, 5, 2, 1, "conv1")));
  const int s2 = pool2(relu(conv(s1, 150, 3, 1, 1, "conv2")));
  // fusion stages: 16 -> 8 -> 4 -> 2
  const int f1 = pool2(relu(conv(s2, 250, 3, 1, 1, "conv3_1")));
  const int f2 = pool2(relu(conv(f1, 250, 3, 1, 1, "conv3_2")));
  const int f3 = pool2(relu(conv(f2, 250, 3, 1, 1, "conv3_3")));
  // align every stage to the coarsest (2x2) and concatenate
  const int a1 = n.add({.kind = LayerKind::AdaptiveMaxPool, .adaptive_target = 2, .inputs = {f1}});
  const int a2 = n.add({.kind = LayerKind::AdaptiveMaxPool, .adaptive_target = 2, .inputs = {f2}});
  const int a3 = n.add({.kind = LayerKind::AdaptiveMaxPool, .adaptive_target = 2, .inputs = {f3}});
  const int fused = n.add({.kind = LayerKind::Concat, .inputs = {a1, a2, a3}, .name = "fusion"});
  // inception: 1x1 | 1x1-3x3 | 1x1-5x5 | pool-1x1, size preserving
  const int p1 = relu(conv(fused, 64, 1, 0, 1, "incep_1x1"));
  const int p2 = relu(conv(relu(conv(fused, 32, 1, 0, 1, "incep_3x3_reduce")), 32, 3, 1, 1,
                           "incep_3x3"));
  const int p3 = relu(conv(relu(conv(fused, 16, 1, 0, 1, "incep_5x5_reduce")), 32, 5, 2, 1,
                           "incep_5x5"));
  const int pp = n.add({.kind = LayerKind::MaxPool,
                        .pool = {.kernel = 3, .stride = 1, .pad = 1},
                        .inputs = {fused}});
  const int p4 = relu(conv(pp, 96, 1, 0, 1, "incep_pool_proj"));
  const int incep = n.add({.kind = LayerKind::Concat, .inputs = {p1, p2, p3, p4}, .name = "incep"});
  // classifier
  const int gap = n.add({.kind = LayerKind::GlobalAvgPool, .inputs = {incep}});
  const int fc = n.add(
      {.kind = LayerKind::Fc, .fc_out = kNumClasses, .fc_in = 224, .inputs = {gap}, .name = "fc"});
  const int head = n.add({.kind = LayerKind::Softmax, .inputs = {fc}});
  n.mark_head(head);

  std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
  n.init_params(3, rng, init_stddev);
  c.logits_id = fc;
  c.head_id = head;
  return c;
}

ClassifierNet classifier_from_network(Network net) {
  ClassifierNet c;
  c.head_id = net.single_head();
  const LayerDef& head = net.layers()[c.head_id];
  if (head.kind != LayerKind::Softmax) throw DataError("classifier head must be softmax");
  c.logits_id = head.inputs[0];
  const LayerDef& fc = net.layers()[c.logits_id];
  if (fc.kind != LayerKind::Fc || fc.fc_out != kNumClasses)
    throw DataError("classifier must end in an 11-way fc layer");
  c.net = std::move(net);
  return c;
}

std::vector<ClassifyResult> classify_patches(const ClassifierNet& net, const Tensor& batch) {
  if (batch.h() != kCropSize || batch.w() != kCropSize)
    throw ShapeError("classifier patches must be 64x64");
  const Network::Trace tr = net.net.forward(batch, std::array{net.head_id});
  const Tensor& probs = tr.outputs[net.head_id];
  std::vector<ClassifyResult> out(batch.n());
  for (int b = 0; b < batch.n(); ++b) {
    ClassifyResult& r = out[b];
    r.distribution.resize(kNumClasses);
    for (int c = 0; c < kNumClasses; ++c) r.distribution[c] = probs.at(b, c, 0, 0);
    r.class_id = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (r.distribution[c] > r.distribution[r.class_id]) r.class_id = c;
    r.score = r.distribution[r.class_id];
  }
  return out;
}

ClassifyResult classify_crop(const ClassifierNet& net, const Tensor& image, const BBox& box) {
  const Tensor patch = crop_resize(image, box, kCropSize, kCropSize);
  return classify_patches(net, patch)[0];
}

std::optional<int> label_for_crop(const std::vector<Annotation>& annotations, const BBox& crop) {
  double best = 0;
  int best_class = 0;
  for (const Annotation& a : annotations) {
    const double v = iou(crop, a.box);
    if (v > best) {
      best = v;
      best_class = a.class_id;
    }
  }
  if (best > 0.6) return best_class;
  if (best < 0.5) return 0;
  return std::nullopt;  // ambiguous overlap, discarded
}

std::vector<CropSample> sample_training_crops(const Tensor& image,
                                              const std::vector<Annotation>& annotations,
                                              const CropCounts& counts, std::mt19937& rng,
                                              int min_size, int max_size) {
  std::vector<CropSample> out;
  const double W = image.w(), H = image.h();
  std::uniform_real_distribution<double> scale_j(0.8, 1.25);
  std::uniform_real_distribution<double> shift_j(-0.15, 0.15);

  for (const Annotation& a : annotations) {
    for (int k = 0; k < counts.positives; ++k) {
      for (int attempt = 0; attempt < 40; ++attempt) {
        const double side = std::min({a.box.width() * scale_j(rng), W, H});
        const double cx = (a.box.x_min + a.box.x_max) / 2 + shift_j(rng) * a.box.width();
        const double cy = (a.box.y_min + a.box.y_max) / 2 + shift_j(rng) * a.box.height();
        BBox crop{cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2};
        // keep the square inside the image
        const double dx = std::max(0.0, -crop.x_min) - std::max(0.0, crop.x_max - W);
        const double dy = std::max(0.0, -crop.y_min) - std::max(0.0, crop.y_max - H);
        crop = BBox{crop.x_min + dx, crop.y_min + dy, crop.x_max + dx, crop.y_max + dy};
        if (crop.x_min < 0 || crop.y_min < 0 || crop.x_max > W || crop.y_max > H) continue;
        const std::optional<int> label = label_for_crop(annotations, crop);
        if (!label || *label != a.class_id) continue;
        out.push_back(CropSample{crop_resize(image, crop, kCropSize, kCropSize), *label, crop});
        break;
      }
    }
  }

  const int max_side = std::min({max_size, int(W), int(H)});
  std::uniform_int_distribution<int> size_d(std::min(min_size, max_side), max_side);
  for (int k = 0; k < counts.negatives; ++k) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int side = size_d(rng);
      std::uniform_int_distribution<int> xd(0, int(W) - side), yd(0, int(H) - side);
      const double x0 = xd(rng), y0 = yd(rng);
      const BBox crop{x0, y0, x0 + side, y0 + side};
      const std::optional<int> label = label_for_crop(annotations, crop);
      if (!label || *label != 0) continue;
      out.push_back(CropSample{crop_resize(image, crop, kCropSize, kCropSize), 0, crop});
      break;
    }
  }
  return out;
}

std::vector<CropSample> bootstrap_mine(const ClassifierNet& net, const DatasetManifest& data,
                                       const CropCounts& counts, std::mt19937& rng) {
  std::vector<CropSample> mined;
  for (const DatasetEntry& e : data.entries) {
    const Tensor image = load_image(data.image_file(e));
    std::vector<CropSample> crops = sample_training_crops(image, e.annotations, counts, rng);
    if (crops.empty()) continue;
    Tensor batch(int(crops.size()), 3, kCropSize, kCropSize);
    for (std::size_t i = 0; i < crops.size(); ++i)
      std::memcpy(batch.plane(int(i), 0), crops[i].patch.data(),
                  crops[i].patch.size() * sizeof(float));
    const std::vector<ClassifyResult> res = classify_patches(net, batch);
    for (std::size_t i = 0; i < crops.size(); ++i)
      if (res[i].class_id != crops[i].label) mined.push_back(std::move(crops[i]));
  }
  return mined;
}

namespace {

// Compact crop pool: u8 pixels keep half a million crops in memory.
struct CropPool {
  std::vector<std::uint8_t> pixels;  // 3*64*64 per crop
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  void add(const CropSample& c) {
    labels.push_back(std::uint8_t(c.label));
    const std::size_t base = pixels.size();
    pixels.resize(base + c.patch.size());
    for (std::size_t i = 0; i < c.patch.size(); ++i)
      pixels[base + i] =
          std::uint8_t(std::clamp(std::lround(c.patch[i] * 255.0f), 0l, 255l));
  }
  void fill_batch(const std::vector<std::size_t>& idx, Tensor& batch,
                  std::vector<std::int32_t>& labels_out) const {
    const std::size_t stride = std::size_t(3) * kCropSize * kCropSize;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::uint8_t* src = pixels.data() + idx[b] * stride;
      float* dst = batch.plane(int(b), 0);
      for (std::size_t i = 0; i < stride; ++i) dst[i] = float(src[i]) / 255.0f;
      labels_out[b] = labels[idx[b]];
    }
  }
};

}  // namespace

std::vector<ClassifierLogEntry> train_classifier(ClassifierNet& cnet, const DatasetManifest& data,
                                                 const ClassifierTrainOptions& opts) {
  if (data.entries.empty()) throw DataError("train_classifier: empty dataset");
  opts.sgd.validate();
  if (opts.batch_size < 1) throw Error("batch_size must be >= 1");

  Network& net = cnet.net;
  std::mt19937 rng(static_cast<std::mt19937::result_type>(opts.seed));

  CropPool pool;
  {
    std::vector<CropSample> init;
    for (const DatasetEntry& e : data.entries) {
      const Tensor image = load_image(data.image_file(e));
      for (CropSample& c :
           sample_training_crops(image, e.annotations, opts.counts, rng, opts.min_size,
                                 opts.max_size)) {
        pool.add(c);
        if (!opts.crop_cache_path.empty()) init.push_back(std::move(c));
      }
    }
    if (!opts.crop_cache_path.empty()) save_crop_cache(opts.crop_cache_path, init);
  }
  if (pool.size() == 0) throw DataError("train_classifier: no crops could be sampled");

  std::ofstream log_file;
  if (!opts.loss_log_path.empty()) {
    log_file.open(opts.loss_log_path, std::ios::trunc);
    if (!log_file) throw DataError("cannot open loss log: " + opts.loss_log_path);
    log_file << "iteration,mean_loss\n";
  }
  auto checkpoint = [&](long it) {
    if (opts.checkpoint_path.empty()) return;
    save_network(opts.checkpoint_path, net);
    std::ostringstream ss;
    ss << rng;
    save_train_state(opts.checkpoint_path + ".state", net, TrainState{it, ss.str()});
  };

  const long mine_at = opts.bootstrap_at > 0
                           ? long(std::llround(opts.bootstrap_at * double(opts.iterations)))
                           : 0;
  std::vector<ClassifierLogEntry> log;
  Tensor batch(std::max(1, opts.batch_size), 3, kCropSize, kCropSize);
  std::vector<std::int32_t> labels(std::size_t(std::max(1, opts.batch_size)));
  std::vector<std::size_t> idx(std::size_t(std::max(1, opts.batch_size)));

  for (long it = 1; it <= opts.iterations; ++it) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t b = 0; b < idx.size(); ++b) idx[b] = pick(rng);
    pool.fill_batch(idx, batch, labels);

    const Network::Trace tr = net.forward(batch, std::array{cnet.head_id});
    const Tensor& probs = tr.outputs[cnet.head_id];
    const CeResult<float> ce = masked_cross_entropy(probs, labels);
    float mean_loss = 0;
    for (std::size_t i = 0; i < ce.loss.size(); ++i) mean_loss += ce.loss[i];
    mean_loss /= float(ce.kept);
    if (!std::isfinite(mean_loss)) {
      checkpoint(it);
      throw NumericError("non-finite classifier loss at iteration " + std::to_string(it));
    }

    Network::Gradients grads = net.zero_gradients();
    Tensor grad = ce.grad_logits;
    const float scale = 1.0f / float(ce.kept);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= scale;
    net.backward(tr, cnet.logits_id, grad, grads);
    sgd_step(net, grads, opts.sgd, it);

    log.push_back(ClassifierLogEntry{it, mean_loss});
    if (log_file) log_file << it << "," << mean_loss << "\n";
    if (opts.progress) opts.progress(it, mean_loss);
    if (opts.checkpoint_every > 0 && it % opts.checkpoint_every == 0) checkpoint(it);

    if (mine_at > 0 && it == mine_at && it < opts.iterations) {
      for (const CropSample& c : bootstrap_mine(cnet, data, opts.counts, rng)) pool.add(c);
    }
  }
  checkpoint(opts.iterations);
  return log;
}

void save_crop_cache(const std::string& path, const std::vector<CropSample>& crops) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write("CPK1", 4);
  const std::uint32_t n = std::uint32_t(crops.size());
  os.write(reinterpret_cast<const char*>(&n), 4);
  std::vector<std::uint8_t> buf(std::size_t(3) * kCropSize * kCropSize);
  for (const CropSample& c : crops) {
    const std::uint8_t label = std::uint8_t(c.label);
    os.write(reinterpret_cast<const char*>(&label), 1);
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = std::uint8_t(std::clamp(std::lround(c.patch[i] * 255.0f), 0l, 255l));
    os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  }
}

std::vector<CropSample> load_crop_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CPK1", 4) != 0) throw DataError("not a crop cache: " + path);
  std::uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  std::vector<CropSample> crops(n);
  std::vector<std::uint8_t> buf(std::size_t(3) * kCropSize * kCropSize);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint8_t label;
    is.read(reinterpret_cast<char*>(&label), 1);
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!is) throw DataError("crop cache truncated: " + path);
    crops[i].label = label;
    crops[i].patch = Tensor(1, 3, kCropSize, kCropSize);
    for (std::size_t p = 0; p < buf.size(); ++p) crops[i].patch[p] = float(buf[p]) / 255.0f;
  }
  return crops;
}

}  // namespace tsr
