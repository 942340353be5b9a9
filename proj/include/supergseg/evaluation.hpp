#pragma once

#include "supergseg/masks.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace supergseg {

/// Per-class pixel counts. Pixels whose ground truth is -1 are ignored; a
/// predicted -1 on a labelled pixel counts as a miss.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int class_count);

  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionAccumulator& other);

  int class_count() const { return static_cast<int>(intersection_.size()); }
  long intersection(int c) const { return intersection_[c]; }
  long union_count(int c) const { return predicted_[c] + truth_[c] - intersection_[c]; }
  long correct(int c) const { return intersection_[c]; }
  long total(int c) const { return truth_[c]; }

  bool operator==(const ConfusionAccumulator&) const = default;

 private:
  std::vector<long> intersection_;
  std::vector<long> predicted_;
  std::vector<long> truth_;
};

struct SegmentationMetrics {
  std::vector<std::optional<double>> iou;  // empty for classes absent from gt
  std::vector<std::optional<double>> acc;
  double miou = 0.0;
  double macc = 0.0;
  int valid_classes = 0;
};

/// Means over classes present in the ground truth; DomainError if none are.
SegmentationMetrics metrics(const ConfusionAccumulator& acc);
SegmentationMetrics miou_macc(const LabelMap& pred, const LabelMap& gt, int class_count);

nlohmann::json to_json(const SegmentationMetrics& m, const std::vector<std::string>& class_names = {});

struct SelectionMetrics {
  std::vector<double> iou;       // per evaluated query
  std::vector<int> skipped;      // query indices without ground truth
  double miou = 0.0;
  double accuracy = 0.0;         // fraction with IoU > 0.25
};

/// One rendered mask per query against its ground-truth mask.
SelectionMetrics object_selection_eval(const std::vector<Bitmap>& query_masks,
                                       const std::vector<std::optional<Bitmap>>& gt_masks);

double mask_iou(const Bitmap& a, const Bitmap& b);

}  // namespace supergseg
