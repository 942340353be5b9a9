#pragma once

#include "supergseg/masks.hpp"
#include "supergseg/raster.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace supergseg {

/// Stop-gradient quantities of a contrastive loss evaluation: the normalised
/// group means and, for the hierarchical loss, the per-level thresholds in
/// evaluation order. Passing them back in replays the loss with these values
/// held fixed, which is the function the returned gradient differentiates.
struct ContrastiveStats {
  MatX means;
  std::vector<double> thresholds;
};

/// Options shared by the contrastive losses.
struct ContrastiveOptions {
  double tau = 0.1;
  double lambda_decay = 0.5;
  int pixels_per_mask = 256;
  bool full_enumeration = false;  // use every pixel instead of sampling
  std::uint64_t seed = 0;
  const ContrastiveStats* frozen = nullptr;
};

struct LossResult {
  double value = 0.0;
  FeatureImage grad;  // dL/dImage, same shape as the input image
  bool skipped = false;
  std::string notice;
  ContrastiveStats stats;
};

/// Seeded pixel subsampling. The draw for a group depends only on the seed and
/// the group's pixel set, so relabelling groups does not change it.
std::vector<std::size_t> sample_pixels(const std::vector<std::size_t>& pixels, const ContrastiveOptions& opt);

/// Pixels grouped by label id (index = id), ascending pixel order.
std::vector<std::vector<std::size_t>> pixels_by_label(const LabelMap& labels);

/// Instance contrastive loss: mean over instances and sampled pixels of the
/// softmax cross-entropy of normalised pixel features against the
/// (stop-gradient) normalised instance means, temperature tau.
LossResult instance_loss(const FeatureImage& features, const LabelMap& instance_map, const ContrastiveOptions& opt);

/// Level-ordered hierarchical contrastive loss over the patches of a view.
LossResult hierarchical_loss(const FeatureImage& features, const PatchDecomposition& decomposition,
                             const ContrastiveOptions& opt);

/// Mean absolute difference; gradient uses sign(0) = 0.
LossResult rgb_l1(const FeatureImage& rendered, const FeatureImage& target);

}  // namespace supergseg
