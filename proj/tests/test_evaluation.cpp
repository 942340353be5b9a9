#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace supergseg;
using namespace supergseg::testing;

TEST(Evaluation, MiouMatchesPixelSetOracle) {
  Rng rng(81);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + static_cast<int>(rng() % 5);
    const LabelMap gt = random_labels(12, 9, classes, rng, 0.2);
    const LabelMap pred = random_labels(12, 9, classes, rng, 0.1);
    const SegmentationMetrics got = miou_macc(pred, gt, classes);
    const SegmentationMetrics want = oracle_miou(pred, gt, classes);
    EXPECT_EQ(got.valid_classes, want.valid_classes);
    EXPECT_NEAR(got.miou, want.miou, 1e-12);
    EXPECT_NEAR(got.macc, want.macc, 1e-12);
    for (int c = 0; c < classes; ++c) {
      ASSERT_EQ(got.iou[c].has_value(), want.iou[c].has_value());
      if (got.iou[c]) EXPECT_NEAR(*got.iou[c], *want.iou[c], 1e-12);
    }
  }
}

TEST(Evaluation, AccumulatorMergeEqualsJointCount) {
  Rng rng(82);
  ConfusionAccumulator a(4), b(4), joint(4);
  for (int v = 0; v < 6; ++v) {
    const LabelMap gt = random_labels(8, 8, 4, rng), pred = random_labels(8, 8, 4, rng);
    (v % 2 ? a : b).add(pred, gt);
    joint.add(pred, gt);
  }
  a.merge(b);
  EXPECT_TRUE(a == joint);
}

TEST(Evaluation, HandCountedExample) {
  LabelMap gt(4, 1), pred(4, 1);
  gt.ids = {0, 0, 1, -1};
  pred.ids = {0, 1, 1, 0};
  const SegmentationMetrics m = miou_macc(pred, gt, 3);
  EXPECT_DOUBLE_EQ(*m.iou[0], 0.5);  // background pixel is ignored
  EXPECT_DOUBLE_EQ(*m.iou[1], 0.5);
  EXPECT_FALSE(m.iou[2].has_value());
  EXPECT_DOUBLE_EQ(m.miou, 0.5);
  EXPECT_DOUBLE_EQ(m.macc, 0.75);
  const auto j = to_json(m, {"a", "b", "c"});
  ASSERT_EQ(j["classes"].size(), 2u);  // only classes present in the ground truth
  EXPECT_EQ(j["classes"][1]["name"], "b");
  EXPECT_DOUBLE_EQ(j["miou"].get<double>(), 0.5);
}

TEST(Evaluation, ErrorsOnBadInput) {
  LabelMap gt(2, 1, -1), pred(2, 1, 0);
  EXPECT_THROW(miou_macc(pred, gt, 2), DomainError);
  gt.ids = {0, 5};
  EXPECT_THROW(miou_macc(pred, gt, 2), DomainError);
  EXPECT_THROW(miou_macc(LabelMap(3, 1, 0), LabelMap(2, 1, 0), 2), ContractError);
}

TEST(Evaluation, ObjectSelection) {
  Bitmap a(4, 1), b(4, 1), c(4, 1);
  a.bits = {1, 1, 0, 0};
  b.bits = {0, 1, 1, 0};
  c.bits = {0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mask_iou(Bitmap(4, 1), Bitmap(4, 1)), 0.0);
  const SelectionMetrics m = object_selection_eval({a, a, c}, {b, a, std::nullopt});
  EXPECT_EQ(m.skipped, (std::vector<int>{2}));
  ASSERT_EQ(m.iou.size(), 2u);
  EXPECT_NEAR(m.miou, (1.0 / 3.0 + 1.0) / 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
  // IoU of exactly 0.25 does not count as a hit.
  Bitmap d(4, 1), e(4, 1);
  d.bits = {1, 0, 0, 0};
  e.bits = {1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(object_selection_eval({d}, {e}).accuracy, 0.0);
}
