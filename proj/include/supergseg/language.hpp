#pragma once

#include "supergseg/masks.hpp"
#include "supergseg/optim.hpp"
#include "supergseg/raster.hpp"
#include "supergseg/supergaussian.hpp"
#include "supergseg/synthetic.hpp"
#include "supergseg/vocabulary.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace supergseg {

/// Per-Super-Gaussian latent plus the shared decoder F_L: [f_l | x_hat] -> R^D.
struct LanguageField {
  MatX latents;   // S x 32
  TinyMLP decoder;

  static LanguageField random(std::size_t S, int dim, std::mt19937_64& rng);
  int dim() const { return decoder.output_dim(); }
  std::size_t size() const { return static_cast<std::size_t>(latents.rows()); }
  void validate() const;
};

/// Decoded unit language features, one row per Super-Gaussian. A zero decoder
/// output stays zero.
MatX decode_language(const LanguageField& field, const std::vector<SuperGaussian>& supergs);

/// Every neural Gaussian carries its Super-Gaussian's feature; blended as usual.
FeatureImage render_language_map(const BlendState& state, const std::vector<int>& gaussian_superg,
                                 const MatX& decoded);

struct CosineLossResult {
  double value = 0.0;
  FeatureImage grad;
  int skipped = 0;  // valid pixels whose rendered feature had zero norm
};

/// Mean over valid pixels of 1 - cos(L_hat, L).
CosineLossResult cosine_loss(const FeatureImage& rendered, const FeatureImage& target,
                             const std::vector<std::uint8_t>& valid);

/// Supervision for one view: each instance mask's pixels get that mask's embedding.
struct LanguageView {
  int camera_index = 0;
  BlendState state;
  FeatureImage target;
  std::vector<std::uint8_t> valid;
  int excluded_masks = 0;  // instance masks without an embedding
};

LanguageView prepare_language_view(const BlendState& state, int camera_index, const MaskSet& masks,
                                   const std::vector<std::optional<VecX>>& embeddings, int dim);
std::vector<LanguageView> prepare_language_views(const Dataset& dataset);

struct Stage3Config {
  long iterations = 500;
  double lr_initial = 0.01;
  double lr_final = 0.001;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Stage3Evaluation {
  double loss = 0.0;
  MatX d_latents;
  MlpGradient d_decoder;
};

Stage3Evaluation evaluate_stage3(const LanguageField& field, const ClusterModel& model, const LanguageView& view,
                                 int k_spawn);

struct Stage3StepLog {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Adam over the latents and F_L, one view per step.
void train_stage3(LanguageField& field, const ClusterModel& model, const std::vector<LanguageView>& views,
                  int k_spawn, const Stage3Config& cfg, const std::function<void(const Stage3StepLog&)>& on_step = {});

struct TextQueryResult {
  std::vector<int> selected;          // top_m Super-Gaussians, best first
  std::vector<double> relevancy;      // per instance label
  int winner = -1;
};

int default_top_m(std::size_t S);

/// Selects the top_m labelled Super-Gaussians by cosine with the query; each
/// votes for its instance; relevancy = votes / instance size.
TextQueryResult text_query_3d(const VecX& query, const MatX& decoded, const std::vector<int>& instance_labels,
                              int top_m);

/// Per-pixel argmax over vocabulary cosines; zero-norm pixels get -1.
LabelMap semantic_map(const EmbeddingVocabulary& vocab, const FeatureImage& language_map);

// "supergseg-language/1"
void save_language_field(const LanguageField& field, const std::filesystem::path& path);
LanguageField load_language_field(const std::filesystem::path& path);

}  // namespace supergseg
