#include "tsr/proposal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tsr/image.hpp"

namespace tsr {

void PyramidConfig::validate() const {
  if (scales.empty()) throw Error("pyramid needs at least one scale");
  if (scales[0] != 1.0) throw Error("pyramid scale 0 must be 1.0");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0 && scales[i] <= 1.0)) throw Error("pyramid scales must be in (0,1]");
    if (i > 0 && !(scales[i] < scales[i - 1]))
      throw Error("pyramid scales must be strictly decreasing");
  }
}

ProposalNet build_proposal_net(std::uint64_t seed, float init_stddev) {
  ProposalNet p;
  Network& n = p.net;
  // backbone
  const int conv1 = n.add({.kind = LayerKind::Conv,
                           .conv = {.out_channels = 60, .kh = 9, .kw = 9},
                           .inputs = {kInputId},
                           .name = "backbone_conv1"});
  const int relu1 = n.add({.kind = LayerKind::Relu, .inputs = {conv1}});
  const int pool1 = n.add(
      {.kind = LayerKind::MaxPool, .pool = {.kernel = 2, .stride = 2}, .inputs = {relu1}});
  const int conv2 = n.add({.kind = LayerKind::Conv,
                           .conv = {.out_channels = 120, .kh = 5, .kw = 5},
                           .inputs = {pool1},
                           .name = "backbone_conv2"});
  const int relu2 = n.add({.kind = LayerKind::Relu, .inputs = {conv2}});
  // branch 1: from the first backbone stage
  const int b1_pool = n.add(
      {.kind = LayerKind::MaxPool, .pool = {.kernel = 6, .stride = 2}, .inputs = {relu1}});
  const int b1_conv = n.add({.kind = LayerKind::Conv,
                             .conv = {.out_channels = 300, .kh = 2, .kw = 2, .dilation = 3},
                             .inputs = {b1_pool},
                             .name = "branch1_conv"});
  const int b1_relu = n.add({.kind = LayerKind::Relu, .inputs = {b1_conv}});
  const int b1_logits = n.add({.kind = LayerKind::Conv,
                               .conv = {.out_channels = 2, .kh = 1, .kw = 1},
                               .inputs = {b1_relu},
                               .name = "branch1_logits"});
  const int b1_head = n.add({.kind = LayerKind::Softmax, .inputs = {b1_logits}});
  // branch 2: from the backbone end
  const int b2_pool = n.add(
      {.kind = LayerKind::MaxPool, .pool = {.kernel = 4, .stride = 2}, .inputs = {relu2}});
  const int b2_conv = n.add({.kind = LayerKind::Conv,
                             .conv = {.out_channels = 300, .kh = 3, .kw = 3, .dilation = 2},
                             .inputs = {b2_pool},
                             .name = "branch2_conv"});
  const int b2_relu = n.add({.kind = LayerKind::Relu, .inputs = {b2_conv}});
  const int b2_logits = n.add({.kind = LayerKind::Conv,
                               .conv = {.out_channels = 2, .kh = 1, .kw = 1},
                               .inputs = {b2_relu},
                               .name = "branch2_logits"});
  const int b2_head = n.add({.kind = LayerKind::Softmax, .inputs = {b2_logits}});

  n.mark_head(b1_head);
  n.mark_head(b2_head);
  std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
  n.init_params(3, rng, init_stddev);

  p.logits_id[0] = b1_logits;
  p.logits_id[1] = b2_logits;
  p.head_id[0] = b1_head;
  p.head_id[1] = b2_head;
  p.rf[0] = rf_chain(branch_chain(n, Branch::B1));
  p.rf[1] = rf_chain(branch_chain(n, Branch::B2));
  return p;
}

namespace {

std::vector<ChainStep> chain_to_head(const Network& net, int head) {
  std::vector<ChainStep> steps;
  int id = head;
  while (id != kInputId) {
    const LayerDef& d = net.layers()[id];
    switch (d.kind) {
      case LayerKind::Conv:
        if (d.conv.kh != d.conv.kw)
          throw Error("receptive-field chain expects square kernels");
        steps.push_back({d.conv.kh, d.conv.stride, d.conv.dilation, d.conv.pad});
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        steps.push_back({d.pool.kernel, d.pool.stride, 1, d.pool.pad});
        break;
      case LayerKind::Relu:
      case LayerKind::Softmax:
        break;  // pointwise, no field effect
      default:
        throw Error("layer kind unsupported in a dense prediction chain");
    }
    id = d.inputs[0];
  }
  std::reverse(steps.begin(), steps.end());
  return steps;
}

}  // namespace

std::vector<ChainStep> branch_chain(const Network& net, Branch b) {
  if (net.heads().size() != 2) throw Error("proposal network must have two heads");
  // Heads are ordered branch 1 then branch 2 at build time; validate by
  // window size so loaded models cannot swap silently.
  const std::vector<ChainStep> c0 = chain_to_head(net, net.heads()[0]);
  const std::vector<ChainStep> c1 = chain_to_head(net, net.heads()[1]);
  const bool ordered = rf_chain(c0).window <= rf_chain(c1).window;
  if (b == Branch::B1) return ordered ? c0 : c1;
  return ordered ? c1 : c0;
}

ProposalNet proposal_from_network(Network net) {
  if (net.heads().size() != 2) throw DataError("proposal model must have two heads");
  ProposalNet p;
  std::array<int, 2> heads = {net.heads()[0], net.heads()[1]};
  std::array<RFDescriptor, 2> rfs = {rf_chain(chain_to_head(net, heads[0])),
                                     rf_chain(chain_to_head(net, heads[1]))};
  if (rfs[0].window > rfs[1].window) {
    std::swap(heads[0], heads[1]);
    std::swap(rfs[0], rfs[1]);
  }
  for (int i = 0; i < 2; ++i) {
    const LayerDef& head = net.layers()[heads[i]];
    if (head.kind != LayerKind::Softmax) throw DataError("proposal head must be softmax");
    const int logits = head.inputs[0];
    if (net.layers()[logits].kind != LayerKind::Conv ||
        net.layers()[logits].conv.out_channels != 2)
      throw DataError("proposal head must sit on a 2-channel conv");
    p.head_id[i] = heads[i];
    p.logits_id[i] = logits;
    p.rf[i] = rfs[i];
  }
  p.net = std::move(net);
  return p;
}

std::pair<int, int> branch_grid_size(const Network& net, Branch b, int h, int w) {
  const std::vector<ChainStep> steps = branch_chain(net, b);
  for (const ChainStep& s : steps) {
    const int k_eff = (s.kernel - 1) * s.dilation + 1;
    const int nh = h + 2 * s.pad - k_eff;
    const int nw = w + 2 * s.pad - k_eff;
    if (nh < 0 || nw < 0) return {0, 0};
    h = nh / s.stride + 1;
    w = nw / s.stride + 1;
  }
  return {h, w};
}

namespace {

struct LevelDims {
  int h, w;
  double scale;
};

// Shared between build_pyramid and make_gt_maps so probability and ground
// truth grids stay cell-for-cell aligned.
std::vector<LevelDims> pyramid_level_dims(int image_h, int image_w, const PyramidConfig& cfg,
                                          int min_window) {
  cfg.validate();
  if (std::min(image_h, image_w) < min_window)
    throw DataError("image " + std::to_string(image_w) + "x" + std::to_string(image_h) +
                    " is smaller than the finest detection window (" + std::to_string(min_window) +
                    ")");
  std::vector<LevelDims> out;
  for (double s : cfg.scales) {
    const int h = int(std::lround(image_h * s));
    const int w = int(std::lround(image_w * s));
    if (std::min(h, w) < min_window) continue;  // level dropped
    out.push_back({h, w, s});
  }
  return out;
}

constexpr int kMinWindow = 20;  // branch 1 window; levels below it are dropped

}  // namespace

std::vector<PyramidLevel> build_pyramid(const Tensor& image, const PyramidConfig& cfg) {
  const std::vector<LevelDims> dims = pyramid_level_dims(image.h(), image.w(), cfg, kMinWindow);
  if (dims.size() < cfg.scales.size())
    std::cerr << "pyramid: dropped " << cfg.scales.size() - dims.size()
              << " level(s) below the detection window\n";
  std::vector<PyramidLevel> levels;
  levels.reserve(dims.size());
  for (const LevelDims& d : dims) {
    PyramidLevel lvl;
    lvl.scale = d.scale;
    lvl.image = d.scale == 1.0 ? image : resize_bilinear(image, d.h, d.w);
    levels.push_back(std::move(lvl));
  }
  return levels;
}

std::vector<ProbabilityMap> forward_dense(const ProposalNet& net,
                                          const std::vector<PyramidLevel>& pyramid, bool use_b1,
                                          bool use_b2) {
  std::vector<ProbabilityMap> maps;
  for (const PyramidLevel& lvl : pyramid) {
    std::vector<int> heads;
    std::vector<Branch> branches;
    for (Branch b : {Branch::B1, Branch::B2}) {
      if (b == Branch::B1 && !use_b1) continue;
      if (b == Branch::B2 && !use_b2) continue;
      const auto [gh, gw] = branch_grid_size(net.net, b, lvl.image.h(), lvl.image.w());
      if (gh < 1 || gw < 1) continue;
      heads.push_back(net.head(b));
      branches.push_back(b);
    }
    if (heads.empty()) continue;
    const Network::Trace tr = net.net.forward(lvl.image, heads);
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const Tensor& probs = tr.outputs[heads[i]];
      ProbabilityMap m;
      m.h = probs.h();
      m.w = probs.w();
      m.branch = branches[i];
      m.rf = net.field(branches[i]);
      m.pyramid_scale = lvl.scale;
      m.grid.assign(probs.plane(0, 1), probs.plane(0, 1) + probs.plane_size());
      maps.push_back(std::move(m));
    }
  }
  return maps;
}

std::vector<ScoredBox> decode_proposals(const std::vector<ProbabilityMap>& maps, double threshold,
                                        int top_k, double image_w, double image_h) {
  if (!(threshold >= 0 && threshold < 1)) throw Error("decode threshold must be in [0,1)");
  if (top_k < 1) throw Error("decode top_k must be >= 1");
  std::vector<ScoredBox> boxes;
  for (const ProbabilityMap& m : maps) {
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        const float p = m.grid[std::size_t(y) * m.w + x];
        if (p < threshold) continue;
        const BBox clipped =
            clip_box(cell_to_box(y, x, m.rf, m.pyramid_scale), image_w, image_h);
        if (!(clipped.area() > 0)) continue;
        boxes.push_back(ScoredBox{clipped, double(p), -1});
      }
  }
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  if (int(boxes.size()) > top_k) boxes.resize(std::size_t(top_k));
  return boxes;
}

std::vector<GroundTruthMap> make_gt_maps(const std::vector<BBox>& annotations, int image_w,
                                         int image_h, const ProposalNet& net,
                                         const PyramidConfig& cfg, const GtThresholds& th) {
  const std::vector<LevelDims> dims = pyramid_level_dims(image_h, image_w, cfg, kMinWindow);
  std::vector<GroundTruthMap> maps;
  for (const LevelDims& d : dims) {
    for (Branch b : {Branch::B1, Branch::B2}) {
      const auto [gh, gw] = branch_grid_size(net.net, b, d.h, d.w);
      if (gh < 1 || gw < 1) continue;
      GroundTruthMap m;
      m.h = gh;
      m.w = gw;
      m.branch = b;
      m.rf = net.field(b);
      m.pyramid_scale = d.scale;
      m.labels.assign(std::size_t(gh) * gw, kNegative);
      for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
          const BBox window = cell_to_box(y, x, m.rf, d.scale);
          double best = 0;
          for (const BBox& a : annotations) best = std::max(best, iou(window, a));
          if (best > th.positive)
            m.labels[std::size_t(y) * gw + x] = kPositive;
          else if (best < th.negative)
            m.labels[std::size_t(y) * gw + x] = kNegative;
          else
            m.labels[std::size_t(y) * gw + x] = kIgnore;
        }
      maps.push_back(std::move(m));
    }
  }
  return maps;
}

std::vector<int> ohem_select(const std::vector<float>& loss_grid,
                             const std::vector<std::int8_t>& mask, int top_n) {
  if (loss_grid.size() != mask.size()) throw Error("ohem: loss grid and mask sizes differ");
  if (top_n < 1) throw Error("ohem: top_n must be >= 1");
  std::vector<int> pos;
  pos.reserve(loss_grid.size());
  for (std::size_t i = 0; i < loss_grid.size(); ++i)
    if (mask[i] != kIgnore) pos.push_back(int(i));
  std::stable_sort(pos.begin(), pos.end(),
                   [&](int a, int b) { return loss_grid[a] > loss_grid[b]; });
  if (int(pos.size()) > top_n) pos.resize(std::size_t(top_n));
  return pos;
}

Tensor augment(const Tensor& image, std::mt19937& rng) {
  std::uniform_real_distribution<float> coin(0.0f, 1.0f);
  std::uniform_real_distribution<float> contrast_f(0.7f, 1.3f);
  std::uniform_real_distribution<float> sigma_f(0.0f, 1.5f);
  std::uniform_real_distribution<float> bright_f(-30.0f / 255.0f, 30.0f / 255.0f);
  // Fixed draw order keeps the stream stable whatever gets applied.
  const bool do_contrast = coin(rng) < 0.5f;
  const float contrast = contrast_f(rng);
  const bool do_blur = coin(rng) < 0.5f;
  const float sigma = sigma_f(rng);
  const bool do_bright = coin(rng) < 0.5f;
  const float bright = bright_f(rng);

  Tensor out = image;
  if (do_contrast)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - 0.5f) * contrast + 0.5f;

  if (do_blur && sigma >= 0.05f) {
    const int radius = std::max(1, int(std::ceil(2.0f * sigma)));
    std::vector<float> k(std::size_t(radius) * 2 + 1);
    float sum = 0;
    for (int i = -radius; i <= radius; ++i) {
      k[i + radius] = std::exp(-0.5f * float(i * i) / (sigma * sigma));
      sum += k[i + radius];
    }
    for (float& v : k) v /= sum;
    const int h = out.h(), w = out.w();
    Tensor tmp(out.shape());
    for (int c = 0; c < out.c(); ++c) {  // horizontal then vertical pass
      const float* src = out.plane(0, c);
      float* dst = tmp.plane(0, c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * src[std::size_t(y) * w + std::clamp(x + i, 0, w - 1)];
          dst[std::size_t(y) * w + x] = acc;
        }
    }
    for (int c = 0; c < out.c(); ++c) {
      const float* src = tmp.plane(0, c);
      float* dst = out.plane(0, c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          for (int i = -radius; i <= radius; ++i)
            acc += k[i + radius] * src[std::size_t(std::clamp(y + i, 0, h - 1)) * w + x];
          dst[std::size_t(y) * w + x] = acc;
        }
    }
  }

  if (do_bright)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bright;

  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0f, 1.0f);
  return out;
}

namespace {

std::vector<std::int32_t> labels_for_ce(const GroundTruthMap& gt) {
  std::vector<std::int32_t> labels(gt.labels.size());
  for (std::size_t i = 0; i < gt.labels.size(); ++i)
    labels[i] = gt.labels[i] == kIgnore ? kIgnoreLabel : std::int32_t(gt.labels[i]);
  return labels;
}

}  // namespace

std::vector<TrainLogEntry> train_proposal(ProposalNet& pnet, const DatasetManifest& data,
                                          const ProposalTrainOptions& opts) {
  if (data.entries.empty()) throw DataError("train_proposal: empty dataset");
  opts.sgd.validate();
  if (opts.ohem.top_n < 1) throw Error("ohem top_n must be >= 1");
  opts.pyramid.validate();

  Network& net = pnet.net;
  std::mt19937 rng(static_cast<std::mt19937::result_type>(opts.seed));
  long start_iter = 1;
  if (!opts.resume_state.empty()) {
    const TrainState st = load_train_state(opts.resume_state, net);
    std::istringstream ss(st.rng_state);
    ss >> rng;
    start_iter = st.iteration + 1;
  }

  const std::array<std::vector<int>, 2> active_layers = {
      net.ancestors_of(std::array{pnet.head(Branch::B1)}),
      net.ancestors_of(std::array{pnet.head(Branch::B2)})};

  // Ground-truth geometry never changes per image (augmentation is purely
  // photometric), so grids are cached.
  std::vector<std::vector<GroundTruthMap>> gt_cache(data.entries.size());
  std::vector<char> gt_ready(data.entries.size(), 0);

  std::ofstream log_file;
  if (!opts.loss_log_path.empty()) {
    log_file.open(opts.loss_log_path, start_iter == 1 ? std::ios::trunc : std::ios::app);
    if (!log_file) throw DataError("cannot open loss log: " + opts.loss_log_path);
    if (start_iter == 1) log_file << "iteration,active_branch,mean_selected_loss\n";
  }

  auto checkpoint = [&](long it) {
    if (opts.checkpoint_path.empty()) return;
    save_network(opts.checkpoint_path, net);
    std::ostringstream ss;
    ss << rng;
    save_train_state(opts.checkpoint_path + ".state", net, TrainState{it, ss.str()});
  };

  std::uniform_int_distribution<std::size_t> pick(0, data.entries.size() - 1);
  std::vector<TrainLogEntry> log;
  log.reserve(std::size_t(std::max<long>(0, opts.iterations - start_iter + 1)));

  for (long it = start_iter; it <= opts.iterations; ++it) {
    const std::size_t idx = pick(rng);
    const DatasetEntry& entry = data.entries[idx];
    Tensor image = augment(load_image(data.image_file(entry)), rng);
    const Branch branch = (it % 2 == 1) ? Branch::B1 : Branch::B2;

    if (!gt_ready[idx]) {
      std::vector<BBox> boxes;
      for (const Annotation& a : entry.annotations) boxes.push_back(a.box);
      gt_cache[idx] = make_gt_maps(boxes, image.w(), image.h(), pnet, opts.pyramid,
                                   opts.gt_thresholds);
      gt_ready[idx] = 1;
    }

    const std::vector<PyramidLevel> pyramid = build_pyramid(image, opts.pyramid);

    // Forward the active branch per level, recording per-position losses.
    struct LevelWork {
      Network::Trace trace;
      Tensor probs;
      std::vector<std::int32_t> labels;
      std::vector<int> selected;
    };
    std::vector<LevelWork> work(pyramid.size());
    struct Cand {
      float loss;
      int level;
      int pos;
    };
    std::vector<Cand> cands;
    for (std::size_t li = 0; li < pyramid.size(); ++li) {
      const GroundTruthMap* gt = nullptr;
      for (const GroundTruthMap& g : gt_cache[idx])
        if (g.branch == branch && g.pyramid_scale == pyramid[li].scale) {
          gt = &g;
          break;
        }
      if (!gt) continue;
      const int head = pnet.head(branch);
      work[li].trace = net.forward(pyramid[li].image, std::array{head});
      work[li].probs = work[li].trace.outputs[head];
      if (work[li].probs.h() != gt->h || work[li].probs.w() != gt->w)
        throw Error("probability and ground-truth grids disagree");
      work[li].labels = labels_for_ce(*gt);
      const CeResult<float> ce = masked_cross_entropy(work[li].probs, work[li].labels);
      const float* loss = ce.loss.data();
      for (std::size_t p = 0; p < work[li].labels.size(); ++p)
        if (work[li].labels[p] != kIgnoreLabel) cands.push_back({loss[p], int(li), int(p)});
    }

    // Hard-example selection pools the active branch's maps across levels.
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return a.loss > b.loss;
    });
    const std::size_t nsel = std::min<std::size_t>(cands.size(), std::size_t(opts.ohem.top_n));
    float mean_loss = 0;
    for (std::size_t i = 0; i < nsel; ++i) {
      mean_loss += cands[i].loss;
      work[cands[i].level].selected.push_back(cands[i].pos);
    }
    if (nsel > 0) mean_loss /= float(nsel);
    if (!std::isfinite(mean_loss)) {
      checkpoint(it);
      throw NumericError("non-finite training loss at iteration " + std::to_string(it) +
                         (opts.checkpoint_path.empty() ? "" : "; state dumped to " +
                          opts.checkpoint_path));
    }

    if (nsel > 0) {
      Network::Gradients grads = net.zero_gradients();
      const float scale = 1.0f / float(nsel);
      for (std::size_t li = 0; li < work.size(); ++li) {
        if (work[li].selected.empty()) continue;
        std::sort(work[li].selected.begin(), work[li].selected.end());
        const Tensor grad = cross_entropy_grad_at(work[li].probs, work[li].labels,
                                                  work[li].selected, scale);
        net.backward(work[li].trace, pnet.logits(branch), grad, grads, /*sparse=*/true);
      }
      sgd_step(net, grads, opts.sgd, it, active_layers[int(branch)]);
    }

    log.push_back(TrainLogEntry{it, branch == Branch::B1 ? 1 : 2, mean_loss});
    if (log_file)
      log_file << it << "," << (branch == Branch::B1 ? 1 : 2) << "," << mean_loss << "\n";
    if (opts.progress) opts.progress(it, branch, mean_loss);
    if (opts.checkpoint_every > 0 && it % opts.checkpoint_every == 0) checkpoint(it);
  }
  checkpoint(opts.iterations);
  return log;
}

}  // namespace tsr
