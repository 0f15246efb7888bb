// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "amfn/common.hpp"

namespace amfn {

// Axis-aligned box, corners ordered x1 < x2, y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Intersection area over union area; 0 for disjoint boxes.
// Degenerate (zero or negative side) boxes are rejected.
double iou(const Box& a, const Box& b);

struct Detection {
  int scene_id = 0;
  int class_id = 0;
  double confidence = 0;
  Box box;
};

struct GroundTruthBox {
  int scene_id = 0;
  int class_id = 0;
  Box box;
};

// Greedy matching for one (scene, class) pool: detections are visited in
// descending confidence (ties keep input order); each is matched to the
// highest-IoU still-unmatched ground truth with IoU >= thr (TP) or flagged FP.
// Returns TP flags ordered like the sorted visit order alongside that order.
struct MatchResult {
  std::vector<std::size_t> order;  // indices into the input, confidence-sorted
  std::vector<char> tp;            // parallel to `order`
};
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts,
                             double thr);

// All-point interpolated average precision over TP/FP flags already ordered
// by descending confidence.
double average_precision(const std::vector<char>& tp_flags, std::size_t num_gt);

struct ClassReport {
  int class_id = 0;
  double ap = 0;
  std::size_t n_gt = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct EvalReport {
  double map = 0;
  double iou_thr = 0.5;
  std::vector<ClassReport> per_class;  // classes with >= 1 ground truth, ascending id
};

// Frame-level mAP at one IoU threshold: detections pooled per class across
// scenes, AP per class, mean over classes that have ground truth.
EvalReport frame_map(const std::vector<Detection>& dets,
                     const std::vector<GroundTruthBox>& gts, double thr = 0.5);

// Text interchange, one detection per line:
//   scene_id class_id confidence x1 y1 x2 y2
void save_detections(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections(const std::string& path);

// Human-readable key-value report plus a per-class CSV.
void save_report(const std::string& path, const EvalReport& report);
void save_report_csv(const std::string& path, const EvalReport& report);

}  // namespace amfn
