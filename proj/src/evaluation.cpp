#include "supergseg/evaluation.hpp"

namespace supergseg {

ConfusionAccumulator::ConfusionAccumulator(int class_count) {
  if (class_count < 1) throw ConfigError("class_count must be positive");
  intersection_.assign(class_count, 0);
  predicted_.assign(class_count, 0);
  truth_.assign(class_count, 0);
}

void ConfusionAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.width != gt.width || pred.height != gt.height || pred.ids.size() != gt.ids.size()) {
    throw ContractError("prediction and ground truth differ in size");
  }
  const int n = class_count();
  for (std::size_t p = 0; p < gt.ids.size(); ++p) {
    const int g = gt.ids[p];
    const int q = pred.ids[p];
    if (g < -1 || g >= n || q < -1 || q >= n) throw DomainError("label outside [-1, class_count)");
    if (g < 0) continue;
    ++truth_[g];
    if (q >= 0) ++predicted_[q];
    if (q == g) ++intersection_[g];
  }
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.class_count() != class_count()) throw ContractError("merging accumulators of different class counts");
  for (int c = 0; c < class_count(); ++c) {
    intersection_[c] += other.intersection_[c];
    predicted_[c] += other.predicted_[c];
    truth_[c] += other.truth_[c];
  }
}

SegmentationMetrics metrics(const ConfusionAccumulator& acc) {
  SegmentationMetrics m;
  const int n = acc.class_count();
  m.iou.resize(n);
  m.acc.resize(n);
  for (int c = 0; c < n; ++c) {
    if (acc.total(c) == 0) continue;
    m.iou[c] = static_cast<double>(acc.intersection(c)) / static_cast<double>(acc.union_count(c));
    m.acc[c] = static_cast<double>(acc.correct(c)) / static_cast<double>(acc.total(c));
    m.miou += *m.iou[c];
    m.macc += *m.acc[c];
    ++m.valid_classes;
  }
  if (m.valid_classes == 0) throw DomainError("no ground-truth class present");
  m.miou /= m.valid_classes;
  m.macc /= m.valid_classes;
  return m;
}

SegmentationMetrics miou_macc(const LabelMap& pred, const LabelMap& gt, int class_count) {
  ConfusionAccumulator acc(class_count);
  acc.add(pred, gt);
  return metrics(acc);
}

nlohmann::json to_json(const SegmentationMetrics& m, const std::vector<std::string>& class_names) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < m.iou.size(); ++c) {
    if (!m.iou[c]) continue;
    nlohmann::json row = {{"class", static_cast<int>(c)}, {"iou", *m.iou[c]}, {"acc", *m.acc[c]}};
    if (c < class_names.size()) row["name"] = class_names[c];
    classes.push_back(row);
  }
  return {{"classes", classes}, {"miou", m.miou}, {"macc", m.macc}};
}

double mask_iou(const Bitmap& a, const Bitmap& b) {
  if (a.width != b.width || a.height != b.height) throw ContractError("masks differ in size");
  long inter = 0, uni = 0;
  for (std::size_t p = 0; p < a.bits.size(); ++p) {
    inter += a(p) && b(p);
    uni += a(p) || b(p);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

SelectionMetrics object_selection_eval(const std::vector<Bitmap>& query_masks,
                                       const std::vector<std::optional<Bitmap>>& gt_masks) {
  SelectionMetrics m;
  for (std::size_t q = 0; q < query_masks.size(); ++q) {
    if (q >= gt_masks.size() || !gt_masks[q]) {
      m.skipped.push_back(static_cast<int>(q));
      continue;
    }
    const double iou = mask_iou(query_masks[q], *gt_masks[q]);
    m.iou.push_back(iou);
    m.miou += iou;
    m.accuracy += iou > 0.25 ? 1.0 : 0.0;
  }
  if (!m.iou.empty()) {
    m.miou /= static_cast<double>(m.iou.size());
    m.accuracy /= static_cast<double>(m.iou.size());
  }
  return m;
}

}  // namespace supergseg
