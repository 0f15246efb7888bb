// SPDX-License-Identifier: Apache-2.0
#include "amfn/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace amfn {

namespace {

void check_box(const Box& b, const char* who) {
  if (!(b.x1 < b.x2) || !(b.y1 < b.y2))
    throw ShapeError(std::string(who) + ": degenerate box (" + std::to_string(b.x1) + ", " +
                     std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " +
                     std::to_string(b.y2) + ")");
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  check_box(a, "iou");
  check_box(b, "iou");
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts,
                             double thr) {
  MatchResult res;
  res.order.resize(dets.size());
  std::iota(res.order.begin(), res.order.end(), std::size_t(0));
  std::stable_sort(res.order.begin(), res.order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  res.tp.assign(dets.size(), 0);
  std::vector<char> taken(gts.size(), 0);
  for (std::size_t pos = 0; pos < res.order.size(); ++pos) {
    const Detection& d = dets[res.order[pos]];
    double best = 0.0;
    std::ptrdiff_t best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(d.box, gts[g]);
      if (v >= thr && v > best) {
        best = v;
        best_g = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_g >= 0) {
      taken[static_cast<std::size_t>(best_g)] = 1;
      res.tp[pos] = 1;
    }
  }
  return res;
}

double average_precision(const std::vector<char>& tp_flags, std::size_t num_gt) {
  if (num_gt == 0) throw UsageError("average_precision: zero ground truths");
  const std::size_t n = tp_flags.size();
  // Precision/recall after each detection in confidence order.
  std::vector<double> prec(n), rec(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // All-point interpolation: precision at recall r is the max precision at
  // any recall >= r; integrate over the recall steps.
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0, prev_rec = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev_rec) * prec[i];
    prev_rec = rec[i];
  }
  return ap;
}

EvalReport frame_map(const std::vector<Detection>& dets,
                     const std::vector<GroundTruthBox>& gts, double thr) {
  if (gts.empty()) throw UsageError("frame_map: no ground truth; the metric is undefined");
  // Pool per class; inside a class, matching runs per scene but ranking for
  // AP is over the class's detections from all scenes together.
  std::map<int, std::map<int, std::vector<Box>>> gt_by_class_scene;
  std::map<int, std::size_t> gt_count;
  for (const auto& g : gts) {
    check_box(g.box, "frame_map");
    gt_by_class_scene[g.class_id][g.scene_id].push_back(g.box);
    ++gt_count[g.class_id];
  }
  std::map<int, std::map<int, std::vector<Detection>>> det_by_class_scene;
  for (const auto& d : dets) {
    check_box(d.box, "frame_map");
    if (gt_count.count(d.class_id) == 0) continue;  // classes without gt are excluded
    det_by_class_scene[d.class_id][d.scene_id].push_back(d);
  }

  EvalReport report;
  report.iou_thr = thr;
  double ap_sum = 0.0;
  for (const auto& [cls, n_gt] : gt_count) {
    // Flags from per-scene greedy matching, then globally confidence-ranked.
    std::vector<std::pair<double, char>> ranked;  // (confidence, tp)
    std::size_t tp_total = 0;
    if (auto it = det_by_class_scene.find(cls); it != det_by_class_scene.end()) {
      for (const auto& [scene, scene_dets] : it->second) {
        const std::vector<Box>* scene_gts = nullptr;
        if (auto git = gt_by_class_scene[cls].find(scene); git != gt_by_class_scene[cls].end())
          scene_gts = &git->second;
        static const std::vector<Box> kNoBoxes;
        MatchResult m = match_detections(scene_dets, scene_gts ? *scene_gts : kNoBoxes, thr);
        for (std::size_t pos = 0; pos < m.order.size(); ++pos) {
          ranked.emplace_back(scene_dets[m.order[pos]].confidence, m.tp[pos]);
          tp_total += m.tp[pos] ? 1 : 0;
        }
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<char> flags(ranked.size());
    for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = ranked[i].second;
    ClassReport cr;
    cr.class_id = cls;
    cr.n_gt = n_gt;
    cr.tp = tp_total;
    cr.fp = flags.size() - tp_total;
    cr.fn = n_gt - tp_total;
    cr.ap = flags.empty() ? 0.0 : average_precision(flags, n_gt);
    ap_sum += cr.ap;
    report.per_class.push_back(cr);
  }
  report.map = ap_sum / static_cast<double>(report.per_class.size());
  return report;
}

void save_detections(const std::string& path, const std::vector<Detection>& dets) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& d : dets)
    out << d.scene_id << ' ' << d.class_id << ' ' << fmt_real(d.confidence) << ' '
        << fmt_real(d.box.x1) << ' ' << fmt_real(d.box.y1) << ' ' << fmt_real(d.box.x2) << ' '
        << fmt_real(d.box.y2) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<Detection> dets;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.scene_id >> d.class_id >> d.confidence >> d.box.x1 >> d.box.y1 >> d.box.x2 >>
          d.box.y2))
      throw FormatError(path + ":" + std::to_string(line_no) +
                        ": expected 'scene_id class_id confidence x1 y1 x2 y2'");
    std::string extra;
    if (ls >> extra)
      throw FormatError(path + ":" + std::to_string(line_no) + ": trailing token '" + extra +
                        "'");
    dets.push_back(d);
  }
  return dets;
}

void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "map = " << fmt_real(report.map) << "\n";
  out << "iou_thr = " << fmt_real(report.iou_thr) << "\n";
  out << "classes = " << report.per_class.size() << "\n";
  for (const auto& c : report.per_class)
    out << "class." << c.class_id << ".ap = " << fmt_real(c.ap) << "\n";
  if (!out) throw IoError("write failed for " + path);
}

void save_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "class_id,ap,n_gt,tp,fp,fn\n";
  for (const auto& c : report.per_class)
    out << c.class_id << ',' << fmt_real(c.ap) << ',' << c.n_gt << ',' << c.tp << ',' << c.fp
        << ',' << c.fn << '\n';
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace amfn
