#pragma once

#include "supergseg/masks.hpp"
#include "supergseg/raster.hpp"
#include "supergseg/scene.hpp"
#include "supergseg/vocabulary.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace supergseg {

/// Parameters of the synthetic scene generator. Objects stand in a row along
/// x like books on a shelf: each is `object_spacing` thick, touches its
/// neighbours, and is a vertical stack of box-shaped parts with anchors near
/// the surface.
struct SyntheticSpec {
  int objects = 3;
  int parts_per_object = 2;
  int anchors_per_part = 250;
  int image_size = 64;
  int train_views = 12;
  int test_views = 4;
  int k_spawn = 5;
  int language_dim = 16;
  double object_radius = 0.6;
  double object_spacing = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything known about one camera view: the observed image, the
/// segmentation masks standing in for an external mask generator, one
/// embedding per mask (if any), and ground truth for evaluation.
struct ViewData {
  int id = 0;
  int camera_index = 0;
  bool train = true;
  FeatureImage rgb;
  MaskSet masks;
  std::vector<std::optional<VecX>> mask_embeddings;
  LabelMap gt_instance;  // object id
  LabelMap gt_part;      // global part id
  LabelMap gt_semantic;  // vocabulary class index
};

struct Dataset {
  Scene scene;
  EmbeddingVocabulary vocab;
  std::vector<ViewData> views;
  std::vector<std::string> object_labels;  // semantic label of each object
  std::vector<int> anchor_instance;        // ground-truth object per anchor
  std::vector<int> anchor_part;            // ground-truth global part per anchor
  std::uint64_t seed = 0;

  std::vector<int> train_view_indices() const;
  std::vector<int> test_view_indices() const;
  int object_count() const { return static_cast<int>(object_labels.size()); }
};

Dataset generate_synthetic_scene(const SyntheticSpec& spec);

/// Ground-truth label maps from a blend state: a pixel is covered when the
/// blended weight reaches 0.5; it takes the label with the largest weight.
LabelMap coverage_labels(const BlendState& state, const std::vector<int>& gaussian_label, int label_count);

/// Directory layout: scene.json, vocab.json, dataset.json, views/view_NNN.*
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace supergseg
