#pragma once

#include "supergseg/common.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace supergseg {

inline constexpr int kMaxPatchesPerView = 4096;

struct Bitmap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // one byte per pixel, 0/1

  Bitmap() = default;
  Bitmap(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}
  bool operator()(std::size_t p) const { return bits[p] != 0; }
  std::size_t area() const;
  bool operator==(const Bitmap&) const = default;
};

/// Binary masks of one view; overlaps allowed.
struct MaskSet {
  int view_id = 0;
  int width = 0;
  int height = 0;
  std::vector<Bitmap> masks;

  void validate() const;
};

/// Integer id map, row-major; -1 marks background.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<int> ids;

  LabelMap() = default;
  LabelMap(int w, int h, int fill = -1) : width(w), height(h), ids(static_cast<std::size_t>(w) * h, fill) {}
  std::size_t pixel_count() const { return ids.size(); }
  int max_id() const;
  bool operator==(const LabelMap&) const = default;
};

struct PatchDecomposition {
  LabelMap patch_map;
  std::vector<std::vector<int>> patch_masksets;  // sorted covering mask indices per patch
  std::vector<std::vector<int>> corr;             // symmetric, corr[p][p] = |masksets[p]|
  /// levels[p][d] = patches at level d+1 for patch p, ordered by id.
  std::vector<std::vector<std::vector<int>>> levels;
  LabelMap instance_map;
  /// Mask index that defines each instance (largest covering mask).
  std::vector<int> instance_masks;

  int patch_count() const { return static_cast<int>(patch_masksets.size()); }
  int instance_count() const { return static_cast<int>(instance_masks.size()); }
};

struct PatchSplit {
  LabelMap patch_map;
  std::vector<std::vector<int>> patch_masksets;
};

/// Pixels share a patch iff their covering-mask sets are identical. Ids are
/// assigned in row-major first-occurrence order; uncovered pixels get -1.
PatchSplit decompose_to_patches(const MaskSet& masks);

/// corr[p][q] = |masksets[p] ∩ masksets[q]|.
std::vector<std::vector<int>> correlation_matrix(const std::vector<std::vector<int>>& patch_masksets);

/// Level sets of patch p: distinct positive values of corr row p in
/// descending order, each level holding the patches with that value.
std::vector<std::vector<int>> level_sets(int patch, const std::vector<std::vector<int>>& corr);

struct InstanceGrouping {
  LabelMap instance_map;
  std::vector<int> instance_masks;
  std::vector<int> patch_instance;  // instance id per patch
};

/// Each patch joins the instance of its largest covering mask (ties: lower
/// mask index).
InstanceGrouping group_instances(const PatchSplit& split, const MaskSet& masks);

/// Runs the whole pipeline above for one view.
PatchDecomposition build_decomposition(const MaskSet& masks);

// SGMK: "SGMK", u32 W, u32 H, u32 M, then M bitmaps of ceil(W*H/8) bytes, MSB-first.
std::string encode_mask_set(const MaskSet& masks);
MaskSet decode_mask_set(std::string_view bytes, int view_id = 0);
void write_mask_set(const MaskSet& masks, const std::filesystem::path& path);
MaskSet read_mask_set(const std::filesystem::path& path, int view_id = 0);

/// Label maps as "SGPM" (patches) or "SGIM" (instances): magic, u32 W, u32 H, i32 ids.
std::string encode_label_map(const LabelMap& map, std::string_view magic);
LabelMap decode_label_map(std::string_view bytes, std::string_view magic);
void write_label_map(const LabelMap& map, std::string_view magic, const std::filesystem::path& path);
LabelMap read_label_map(const std::filesystem::path& path, std::string_view magic);

}  // namespace supergseg
