#include "test_support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace supergseg;
using namespace supergseg::testing;

TEST(Masks, PatchesMatchOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const MaskSet masks = random_masks(12, 10, 1 + static_cast<int>(rng() % 6), rng);
    const PatchSplit got = decompose_to_patches(masks);
    const PatchSplit want = oracle_patches(masks);
    EXPECT_EQ(got.patch_map, want.patch_map);
    EXPECT_EQ(got.patch_masksets, want.patch_masksets);
  }
}

TEST(Masks, PatchesPartitionAndRefineEveryMask) {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const MaskSet masks = random_masks(16, 16, 5, rng);
    const PatchSplit split = decompose_to_patches(masks);
    for (std::size_t m = 0; m < masks.masks.size(); ++m) {
      // Each mask is exactly the union of the patches whose set contains it.
      for (std::size_t p = 0; p < split.patch_map.pixel_count(); ++p) {
        const int id = split.patch_map.ids[p];
        const bool in_patch_union =
            id >= 0 && std::binary_search(split.patch_masksets[id].begin(), split.patch_masksets[id].end(),
                                          static_cast<int>(m));
        EXPECT_EQ(in_patch_union, masks.masks[m](p));
      }
    }
    // Distinct patches have distinct mask sets.
    std::set<std::vector<int>> seen(split.patch_masksets.begin(), split.patch_masksets.end());
    EXPECT_EQ(seen.size(), split.patch_masksets.size());
  }
}

TEST(Masks, CorrelationAndLevelSetsMatchOracle) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const MaskSet masks = random_masks(10, 10, 1 + static_cast<int>(rng() % 7), rng);
    const PatchSplit split = decompose_to_patches(masks);
    const auto corr = correlation_matrix(split.patch_masksets);
    EXPECT_EQ(corr, oracle_correlation(split.patch_masksets));
    for (int p = 0; p < static_cast<int>(split.patch_masksets.size()); ++p) {
      EXPECT_EQ(level_sets(p, corr), oracle_level_sets(p, split.patch_masksets));
    }
  }
}

TEST(Masks, LevelSetsPartitionCorrelatedPatches) {
  Rng rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const PatchDecomposition d = build_decomposition(random_masks(12, 12, 6, rng));
    for (int p = 0; p < d.patch_count(); ++p) {
      const auto& levels = d.levels[p];
      ASSERT_FALSE(levels.empty());
      // The patch itself sits in the first (most correlated) level.
      EXPECT_TRUE(std::binary_search(levels[0].begin(), levels[0].end(), p));
      std::set<int> seen;
      int prev = std::numeric_limits<int>::max();
      for (const auto& level : levels) {
        const int v = d.corr[p][level.front()];
        EXPECT_LT(v, prev);
        prev = v;
        for (int q : level) {
          EXPECT_EQ(d.corr[p][q], v);
          EXPECT_TRUE(seen.insert(q).second);
        }
      }
      for (int q = 0; q < d.patch_count(); ++q) EXPECT_EQ(seen.count(q) == 1, d.corr[p][q] > 0);
    }
  }
}

TEST(Masks, InstancesFollowTheLargestCoveringMask) {
  Rng rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    const MaskSet masks = random_masks(12, 12, 5, rng);
    const PatchDecomposition d = build_decomposition(masks);
    for (std::size_t px = 0; px < d.patch_map.pixel_count(); ++px) {
      const int patch = d.patch_map.ids[px];
      if (patch < 0) {
        EXPECT_EQ(d.instance_map.ids[px], -1);
        continue;
      }
      int best = -1;
      std::size_t best_area = 0;
      for (int m : d.patch_masksets[patch]) {
        if (masks.masks[m].area() > best_area) {
          best = m;
          best_area = masks.masks[m].area();
        }
      }
      EXPECT_EQ(d.instance_masks[d.instance_map.ids[px]], best);
    }
  }
}

TEST(Masks, NestedMasksGiveExpectedPatches) {
  MaskSet masks;
  masks.width = 4;
  masks.height = 1;
  Bitmap whole(4, 1), left(4, 1);
  whole.bits = {1, 1, 1, 0};
  left.bits = {1, 1, 0, 0};
  masks.masks = {whole, left};
  const PatchDecomposition d = build_decomposition(masks);
  EXPECT_EQ(d.patch_map.ids, (std::vector<int>{0, 0, 1, -1}));
  EXPECT_EQ(d.patch_masksets, (std::vector<std::vector<int>>{{0, 1}, {0}}));
  EXPECT_EQ(d.corr, (std::vector<std::vector<int>>{{2, 1}, {1, 1}}));
  EXPECT_EQ(d.levels[0], (std::vector<std::vector<int>>{{0}, {1}}));
  EXPECT_EQ(d.levels[1], (std::vector<std::vector<int>>{{0, 1}}));
  EXPECT_EQ(d.instance_map.ids, (std::vector<int>{0, 0, 0, -1}));
}

TEST(Masks, EmptyOrMismatchedMasksAreRejected) {
  MaskSet masks;
  masks.width = masks.height = 4;
  EXPECT_THROW(decompose_to_patches(masks), IngestionError);
  masks.masks.push_back(Bitmap(4, 4));
  EXPECT_THROW(decompose_to_patches(masks), IngestionError);
  masks.masks[0] = Bitmap(3, 4);
  masks.masks[0].bits[0] = 1;
  EXPECT_THROW(decompose_to_patches(masks), IngestionError);
}

TEST(Masks, BinaryFormatsRoundTrip) {
  Rng rng(26);
  const MaskSet masks = random_masks(13, 7, 4, rng);
  const MaskSet back = decode_mask_set(encode_mask_set(masks));
  ASSERT_EQ(back.masks.size(), masks.masks.size());
  for (std::size_t m = 0; m < masks.masks.size(); ++m) EXPECT_EQ(back.masks[m], masks.masks[m]);
  // 13*7 = 91 bits -> 12 bytes per mask.
  EXPECT_EQ(encode_mask_set(masks).size(), 16u + 4 * 12);
  EXPECT_THROW(decode_mask_set("SGMX" + encode_mask_set(masks).substr(4)), ParseError);

  const LabelMap labels = random_labels(9, 5, 4, rng);
  EXPECT_EQ(decode_label_map(encode_label_map(labels, "SGIM"), "SGIM"), labels);
  EXPECT_THROW(decode_label_map(encode_label_map(labels, "SGIM"), "SGPM"), ParseError);
}
