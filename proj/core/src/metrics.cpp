#include "tsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"

namespace tsr {

const char* visibility_name(Visibility v) {
  switch (v) {
    case Visibility::Visible: return "visible";
    case Visibility::Blurred: return "blurred";
    case Visibility::Occluded: return "occluded";
    case Visibility::SideRoad: return "side_road";
  }
  return "?";
}

Visibility visibility_from_name(const std::string& name) {
  for (Visibility v : {Visibility::Visible, Visibility::Blurred, Visibility::Occluded,
                       Visibility::SideRoad})
    if (name == visibility_name(v)) return v;
  throw DataError("unknown visibility: " + name);
}

ScaleBucket bucketize(const BBox& box) {
  if (!box.valid()) throw Error("bucketize: invalid box");
  const double area = box.area();
  if (area < 32.0 * 32.0) return ScaleBucket::Small;
  if (area <= 96.0 * 96.0) return ScaleBucket::Medium;
  return ScaleBucket::Large;
}

const char* bucket_name(ScaleBucket b) {
  switch (b) {
    case ScaleBucket::Small: return "small";
    case ScaleBucket::Medium: return "medium";
    case ScaleBucket::Large: return "large";
  }
  return "?";
}

MatchResult match_detections(const std::vector<ScoredBox>& dets, const std::vector<GtBox>& gts,
                             double iou_threshold, bool class_agnostic,
                             const std::vector<GtBox>& ignored) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  MatchResult r;
  std::vector<char> gt_taken(gts.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const int di = int(order[oi]);
    const ScoredBox& d = dets[di];
    int best_gt = -1;
    double best_iou = 0;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_taken[gi]) continue;
      if (!class_agnostic && gts[gi].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[gi].box);
      if (v > best_iou) {  // strict: ties keep the lowest gt index
        best_iou = v;
        best_gt = int(gi);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_threshold) {
      gt_taken[best_gt] = 1;
      r.tp.emplace_back(di, best_gt);
      continue;
    }
    bool absorbed = false;
    for (const GtBox& ig : ignored) {
      if (!class_agnostic && ig.class_id != d.class_id) continue;
      if (iou(d.box, ig.box) >= iou_threshold) {
        absorbed = true;
        break;
      }
    }
    if (absorbed)
      r.discarded.push_back(di);
    else
      r.fp.push_back(di);
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi)
    if (!gt_taken[gi]) r.fn.push_back(int(gi));
  return r;
}

PrecisionRecall precision_recall(int tp, int fp, int fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw Error("precision_recall: negative counts");
  PrecisionRecall pr;
  pr.precision = (tp + fp) == 0 ? 1.0 : double(tp) / double(tp + fp);
  pr.recall = (tp + fn) == 0 ? 1.0 : double(tp) / double(tp + fn);
  return pr;
}

std::optional<double> average_precision(std::vector<RankedDet> dets, int num_gt) {
  if (num_gt <= 0) return std::nullopt;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const RankedDet& a, const RankedDet& b) { return a.score > b.score; });
  // Cumulative PR points, then the monotone precision envelope.
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const RankedDet& d : dets) {
    d.tp ? ++tp : ++fp;
    recall.push_back(double(tp) / num_gt);
    precision.push_back(double(tp) / double(tp + fp));
  }
  double ap = 0, prev_r = 0, env = 0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    env = std::max(env, precision[i]);
    const double r0 = i == 0 ? 0.0 : recall[i - 1];
    // envelope is constant on (r0, recall[i]]
    ap += (recall[i] - r0) * env;
    (void)prev_r;
  }
  return ap;
}

namespace {

double recall_at_threshold(const std::vector<ImageProposals>& images, int k, double t,
                           std::optional<ScaleBucket> bucket) {
  long matched = 0, total = 0;
  for (const ImageProposals& im : images) {
    std::vector<ScoredBox> top(im.proposals.begin(),
                               im.proposals.begin() +
                                   std::min<std::size_t>(im.proposals.size(), std::size_t(k)));
    const MatchResult m = match_detections(top, im.gts, t, /*class_agnostic=*/true);
    for (const auto& [di, gi] : m.tp)
      if (!bucket || bucketize(im.gts[gi].box) == *bucket) ++matched;
    for (const GtBox& g : im.gts)
      if (!bucket || bucketize(g.box) == *bucket) ++total;
  }
  return total == 0 ? 0.0 : double(matched) / double(total);
}

double ar_impl(const std::vector<ImageProposals>& images, int k,
               std::optional<ScaleBucket> bucket) {
  const std::vector<double> ts = ar_iou_thresholds();
  double acc = 0;
  for (double t : ts) acc += recall_at_threshold(images, k, t, bucket);
  return acc / double(ts.size());
}

}  // namespace

double average_recall(const std::vector<ImageProposals>& images, int k) {
  return ar_impl(images, k, std::nullopt);
}

double average_recall_bucket(const std::vector<ImageProposals>& images, int k, ScaleBucket bucket) {
  return ar_impl(images, k, bucket);
}

FilteredAnnotations standard_benchmark_filter(const std::vector<Annotation>& annotations,
                                              double min_side) {
  FilteredAnnotations out;
  for (const Annotation& a : annotations) {
    const bool keep =
        a.visibility == Visibility::Visible && a.box.width() > min_side && a.box.height() > min_side;
    (keep ? out.kept : out.ignored).push_back(a);
  }
  return out;
}

namespace {

std::vector<GtBox> to_gt(const std::vector<Annotation>& anns) {
  std::vector<GtBox> g;
  g.reserve(anns.size());
  for (const Annotation& a : anns) g.push_back(GtBox{a.box, a.class_id});
  return g;
}

}  // namespace

EvalReport evaluate(const std::vector<EvalImage>& images,
                    const std::vector<std::string>& class_names, const EvalConfig& cfg) {
  const int nclasses = int(class_names.size());
  EvalReport rep;
  rep.per_class.resize(nclasses + 1);
  for (int c = 1; c <= nclasses; ++c) rep.per_class[c].name = class_names[c - 1];

  // Per-class ranked detections for AP; bucket variants reuse the same
  // matches restricted by the matched gt's bucket.
  std::vector<std::vector<RankedDet>> ranked(nclasses + 1);
  std::vector<std::array<std::vector<RankedDet>, 3>> ranked_bucket(nclasses + 1);
  std::vector<std::array<int, 3>> gt_bucket_count(nclasses + 1, {0, 0, 0});

  for (const EvalImage& im : images) {
    FilteredAnnotations fa;
    if (cfg.standard_filter)
      fa = standard_benchmark_filter(im.annotations, cfg.min_side);
    else
      fa.kept = im.annotations;

    const std::vector<GtBox> gts = to_gt(fa.kept);
    const std::vector<GtBox> ign = to_gt(fa.ignored);
    const MatchResult m = match_detections(im.detections, gts, cfg.iou_threshold, false, ign);

    rep.total_gt += int(gts.size());
    std::vector<char> det_tp(im.detections.size(), 0);
    std::vector<double> det_iou(im.detections.size(), 0);
    std::vector<char> det_discarded(im.detections.size(), 0);
    for (const auto& [di, gi] : m.tp) {
      det_tp[di] = 1;
      det_iou[di] = iou(im.detections[di].box, gts[gi].box);
    }
    for (int di : m.discarded) det_discarded[di] = 1;

    for (std::size_t di = 0; di < im.detections.size(); ++di) {
      const ScoredBox& d = im.detections[di];
      if (d.class_id < 1 || d.class_id > nclasses)
        throw DataError("detection class id " + std::to_string(d.class_id) + " out of range");
      if (det_discarded[di]) continue;
      ranked[d.class_id].push_back(RankedDet{d.score, det_tp[di] == 1});
      rep.traces.push_back(MatchTrace{im.image_id, d.class_id, d.score, d.box, det_tp[di] == 1,
                                      det_iou[di]});
      if (det_tp[di]) {
        ++rep.per_class[d.class_id].tp;
        ++rep.total_tp;
      } else {
        ++rep.per_class[d.class_id].fp;
        ++rep.total_fp;
      }
    }
    for (const GtBox& g : gts) ++rep.per_class[g.class_id].gt_count;
    for (int gi : m.fn) {
      ++rep.per_class[gts[gi].class_id].fn;
      ++rep.total_fn;
    }

    // Scale-bucket AP pools: unmatched detections count as fp in every
    // bucket; matched ones count only in their gt's bucket and are ignored
    // elsewhere (the usual scale-resolved convention).
    std::vector<int> det_gt(im.detections.size(), -1);
    for (const auto& [di, gi] : m.tp) det_gt[di] = gi;
    for (std::size_t di = 0; di < im.detections.size(); ++di) {
      const ScoredBox& d = im.detections[di];
      if (det_discarded[di]) continue;
      if (det_gt[di] >= 0) {
        const int b = int(bucketize(gts[det_gt[di]].box));
        ranked_bucket[d.class_id][b].push_back(RankedDet{d.score, true});
      } else {
        for (int b = 0; b < 3; ++b)
          ranked_bucket[d.class_id][b].push_back(RankedDet{d.score, false});
      }
    }
    for (const GtBox& g : gts) ++gt_bucket_count[g.class_id][int(bucketize(g.box))];
  }

  // Per-class P/R at the operating point and AP over the score sweep.
  double sum_p = 0, sum_r = 0, sum_ap = 0;
  int classes_with_gt = 0, classes_with_ap = 0;
  for (int c = 1; c <= nclasses; ++c) {
    ClassReport& cr = rep.per_class[c];
    const PrecisionRecall pr = precision_recall(cr.tp, cr.fp, cr.fn);
    cr.precision = pr.precision;
    cr.recall = pr.recall;
    cr.ap = average_precision(ranked[c], cr.gt_count);
    if (cr.gt_count > 0) {
      ++classes_with_gt;
      sum_p += cr.precision;
      sum_r += cr.recall;
      if (cr.ap) {
        sum_ap += *cr.ap;
        ++classes_with_ap;
      }
    }
  }
  if (classes_with_gt > 0) {
    rep.mean_precision = sum_p / classes_with_gt;
    rep.mean_recall = sum_r / classes_with_gt;
  }
  if (classes_with_ap > 0) rep.map = sum_ap / classes_with_ap;

  for (int b = 0; b < 3; ++b) {
    double acc = 0;
    int n = 0;
    for (int c = 1; c <= nclasses; ++c) {
      if (gt_bucket_count[c][b] == 0) continue;
      if (auto ap = average_precision(ranked_bucket[c][b], gt_bucket_count[c][b])) {
        acc += *ap;
        ++n;
      }
    }
    if (n > 0) rep.map_bucket[b] = acc / n;
  }

  // Proposal AR: only when proposals were supplied.
  bool any_proposals = false;
  std::vector<ImageProposals> prop_images;
  for (const EvalImage& im : images) {
    ImageProposals ip;
    ip.proposals = im.proposals;
    std::stable_sort(ip.proposals.begin(), ip.proposals.end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
    FilteredAnnotations fa;
    if (cfg.standard_filter)
      fa = standard_benchmark_filter(im.annotations, cfg.min_side);
    else
      fa.kept = im.annotations;
    ip.gts = to_gt(fa.kept);
    any_proposals |= !ip.proposals.empty();
    prop_images.push_back(std::move(ip));
  }
  if (any_proposals) {
    for (int k : cfg.ar_budgets) rep.ar_at[k] = average_recall(prop_images, k);
    for (int b = 0; b < 3; ++b)
      rep.ar_bucket[b] =
          average_recall_bucket(prop_images, cfg.ar_bucket_budget, ScaleBucket(b));
  }
  return rep;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "n/a"; }

}  // namespace

void print_report(const EvalReport& rep, std::ostream& os) {
  os << "class,gt,tp,fp,fn,precision,recall,ap\n";
  for (std::size_t c = 1; c < rep.per_class.size(); ++c) {
    const ClassReport& cr = rep.per_class[c];
    os << cr.name << "," << cr.gt_count << "," << cr.tp << "," << cr.fp << "," << cr.fn << ","
       << fmt(cr.precision) << "," << fmt(cr.recall) << "," << fmt_opt(cr.ap) << "\n";
  }
  os << "\noverall,precision=" << fmt(rep.mean_precision) << ",recall=" << fmt(rep.mean_recall)
     << ",mAP=" << fmt_opt(rep.map) << "\n";
  os << "buckets,mAP_small=" << fmt_opt(rep.map_bucket[0])
     << ",mAP_medium=" << fmt_opt(rep.map_bucket[1]) << ",mAP_large=" << fmt_opt(rep.map_bucket[2])
     << "\n";
  if (!rep.ar_at.empty()) {
    os << "proposals";
    for (const auto& [k, ar] : rep.ar_at) os << ",AR@" << k << "=" << fmt(ar);
    os << ",AR_small=" << fmt_opt(rep.ar_bucket[0]) << ",AR_medium=" << fmt_opt(rep.ar_bucket[1])
       << ",AR_large=" << fmt_opt(rep.ar_bucket[2]) << "\n";
  }
}

void write_report_files(const EvalReport& rep, const std::vector<EvalImage>& images,
                        const std::vector<std::string>& class_names, const EvalConfig& cfg,
                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  {
    std::ofstream os(fs::path(out_dir) / "per_class.csv");
    os << "class,gt,tp,fp,fn,precision,recall,ap\n";
    for (std::size_t c = 1; c < rep.per_class.size(); ++c) {
      const ClassReport& cr = rep.per_class[c];
      os << cr.name << "," << cr.gt_count << "," << cr.tp << "," << cr.fp << "," << cr.fn << ","
         << fmt(cr.precision) << "," << fmt(cr.recall) << "," << fmt_opt(cr.ap) << "\n";
    }
  }
  {
    std::ofstream os(fs::path(out_dir) / "buckets.csv");
    os << "bucket,mAP,AR@" << cfg.ar_bucket_budget << "\n";
    for (int b = 0; b < 3; ++b)
      os << bucket_name(ScaleBucket(b)) << "," << fmt_opt(rep.map_bucket[b]) << ","
         << fmt_opt(rep.ar_bucket[b]) << "\n";
  }
  {
    std::ofstream os(fs::path(out_dir) / "ar.csv");
    os << "budget,AR\n";
    for (const auto& [k, ar] : rep.ar_at) os << k << "," << fmt(ar) << "\n";
  }
  {
    // PR curve points per class from the match traces.
    std::ofstream os(fs::path(out_dir) / "pr_curves.csv");
    os << "class,score,recall,precision\n";
    for (std::size_t c = 1; c < rep.per_class.size(); ++c) {
      std::vector<MatchTrace> dets;
      for (const MatchTrace& t : rep.traces)
        if (t.class_id == int(c)) dets.push_back(t);
      std::stable_sort(dets.begin(), dets.end(),
                       [](const MatchTrace& a, const MatchTrace& b) { return a.score > b.score; });
      int tp = 0, fp = 0;
      for (const MatchTrace& t : dets) {
        t.tp ? ++tp : ++fp;
        if (rep.per_class[c].gt_count == 0) continue;
        os << rep.per_class[c].name << "," << fmt(t.score) << ","
           << fmt(double(tp) / rep.per_class[c].gt_count) << "," << fmt(double(tp) / (tp + fp))
           << "\n";
      }
    }
  }
  {
    nlohmann::json j;
    j["iou_threshold"] = cfg.iou_threshold;
    j["standard_filter"] = cfg.standard_filter;
    j["images"] = images.size();
    j["total"] = {{"gt", rep.total_gt}, {"tp", rep.total_tp}, {"fp", rep.total_fp},
                  {"fn", rep.total_fn}};
    j["precision"] = rep.mean_precision;
    j["recall"] = rep.mean_recall;
    if (rep.map) j["map"] = *rep.map;
    nlohmann::json jc = nlohmann::json::array();
    for (std::size_t c = 1; c < rep.per_class.size(); ++c) {
      const ClassReport& cr = rep.per_class[c];
      nlohmann::json e = {{"name", cr.name},     {"gt", cr.gt_count},  {"tp", cr.tp},
                          {"fp", cr.fp},         {"fn", cr.fn},        {"precision", cr.precision},
                          {"recall", cr.recall}};
      if (cr.ap) e["ap"] = *cr.ap;
      jc.push_back(e);
    }
    j["classes"] = jc;
    for (int b = 0; b < 3; ++b) {
      if (rep.map_bucket[b]) j["map_bucket"][bucket_name(ScaleBucket(b))] = *rep.map_bucket[b];
      if (rep.ar_bucket[b]) j["ar_bucket"][bucket_name(ScaleBucket(b))] = *rep.ar_bucket[b];
    }
    for (const auto& [k, ar] : rep.ar_at) j["ar_at"][std::to_string(k)] = ar;
    std::ofstream os(fs::path(out_dir) / "summary.json");
    os << j.dump(2) << "\n";
  }
  (void)class_names;
}

}  // namespace tsr
