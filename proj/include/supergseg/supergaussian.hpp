#pragma once

#include "supergseg/optim.hpp"
#include "supergseg/raster.hpp"
#include "supergseg/scene.hpp"
#include "supergseg/tiny_mlp.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace supergseg {

inline constexpr int kLatentDim = 32;
inline constexpr int kEmbedDim = 16;

struct ClusterConfig {
  int S = 1000;
  int k_nn = 3;
  long iterations = 1000;
  int knn_refresh_period = 100;
  double w_recon = 1.0;
  double w_compact = 1.0;
  double tau_ins = 0.8;
  double tau_hier = 0.9;
  int graph_k = 3;
  double lr_initial = 0.01;
  double lr_final = 0.001;
  /// Association sees position differences only (feature embeddings get zeros).
  bool coords_only = false;
  std::uint64_t seed = 0;

  void validate() const;
  void validate(std::size_t anchor_count) const;
};

struct SuperGaussian {
  int id = 0;
  Vec3 x_hat = Vec3::Zero();
  VecX f_s_hat = VecX::Zero(kAnchorFeatureDim);
  VecX f_g_hat = VecX::Zero(kAnchorFeatureDim);
  VecX f_l = VecX::Zero(kLatentDim);
  std::vector<int> members;  // anchor indices, ascending
  bool orphan = false;
};

/// Anchor attributes as row matrices (positions n x 3, features n x 32).
struct AnchorAttributes {
  MatX x;
  MatX f_s;
  MatX f_g;

  static AnchorAttributes from(const std::vector<Anchor>& anchors);
  Eigen::Index size() const { return x.rows(); }
};

/// Super-Gaussian attributes as row matrices (S rows).
struct SuperAttributes {
  MatX x;
  MatX f_s;
  MatX f_g;
  std::vector<double> weight;  // total incoming association weight
  std::vector<bool> orphan;

  static SuperAttributes from(const std::vector<SuperGaussian>& supergs);
  Eigen::Index size() const { return x.rows(); }
};

/// F_phi (positions), F_phi' (f_s), F_psi (f_g) embed attribute differences;
/// F_sg maps the concatenated embeddings to one logit.
struct AssociationNets {
  TinyMLP phi;
  TinyMLP phi_s;
  TinyMLP psi;
  TinyMLP sg;

  /// Random embedding nets; F_sg's output layer starts at zero so the initial
  /// association is uniform.
  static AssociationNets random(std::mt19937_64& rng);
  void validate() const;
};

/// Soft association over each anchor's k_nn nearest Super-Gaussians.
struct AssociationMap {
  int k_nn = 0;
  std::vector<int> neighbors;  // n * k_nn Super-Gaussian ids, nearest first
  MatX logits;                 // n x k_nn
  MatX soft;                   // n x k_nn, rows sum to 1
  std::vector<int> hard;       // n, filled by harden()

  std::size_t anchor_count() const { return static_cast<std::size_t>(soft.rows()); }
  int neighbor(std::size_t i, int slot) const { return neighbors[i * k_nn + slot]; }
};

/// Greedy farthest point sampling; the first index is drawn from the seed,
/// distance ties go to the lowest index.
std::vector<int> farthest_point_sample(const MatX& positions, int S, std::uint64_t seed);
std::vector<int> farthest_point_sample_from(const MatX& positions, int S, int first);

/// k nearest centres per point (ascending distance, ties by lower id).
/// Centres flagged in `skip` are never chosen.
std::vector<int> nearest_centers(const MatX& points, const MatX& centers, int k, const std::vector<bool>* skip = nullptr);

/// Super-Gaussians initialised at the FPS anchors' attributes.
std::vector<SuperGaussian> init_supergs(const AnchorAttributes& anchors, const std::vector<int>& seeds);

/// Row-wise softmax of an n x k logit matrix.
MatX softmax_rows(const MatX& logits);

/// Logits and soft rows for given neighbour sets.
AssociationMap associate(const AnchorAttributes& anchors, const SuperAttributes& supergs, const AssociationNets& nets,
                         std::vector<int> neighbors, int k_nn, bool coords_only = false);

/// Weighted-mean update of the Super-Gaussian attributes from soft rows.
/// Super-Gaussians without incoming weight keep `previous` and are orphaned.
SuperAttributes update_supergs(const AnchorAttributes& anchors, const AssociationMap& assoc,
                               const SuperAttributes& previous);

struct AssociationLoss {
  double value = 0.0;
  MatX d_logits;  // n x k_nn
};

enum class Attribute { position, f_s, f_g };

/// (1/n) sum_i || a_i - sum_j A_ij a_hat_j ||, where a_hat is the update of
/// `previous` under the same soft rows; gradient flows through both uses of A.
AssociationLoss reconstruction_loss(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                    const AssociationMap& assoc, Attribute attribute);

/// (1/S) sum_j mean over anchors with j among their neighbours of ||x_i - x_hat_j||.
AssociationLoss compactness_loss(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                 const AssociationMap& assoc);

/// Row argmax; ties go to the lowest Super-Gaussian id.
std::vector<int> harden(const AssociationMap& assoc);

/// Sets members from a hard assignment and recomputes attributes as plain
/// member means; Super-Gaussians left without members are orphaned.
void apply_hard_assignment(std::vector<SuperGaussian>& supergs, const AnchorAttributes& anchors,
                           const std::vector<int>& hard);

struct Stage2Evaluation {
  double recon_x = 0.0;
  double recon_f_s = 0.0;
  double recon_f_g = 0.0;
  double compact = 0.0;
  double total = 0.0;
  MlpGradient phi, phi_s, psi, sg;
  SuperAttributes updated;
  AssociationMap assoc;
};

/// Association, update, losses and net gradients for fixed neighbour sets.
Stage2Evaluation evaluate_stage2(const AnchorAttributes& anchors, const SuperAttributes& previous,
                                 const AssociationNets& nets, const std::vector<int>& neighbors,
                                 const ClusterConfig& cfg);

/// Per-Super-Gaussian grouping features and labels.
struct ClusterModel {
  ClusterConfig config;
  std::vector<SuperGaussian> supergs;
  AssociationNets nets;
  AssociationMap assoc;
  std::vector<int> instance_labels;  // per Super-Gaussian, -1 for orphans
  std::vector<int> part_labels;      // per Super-Gaussian, -1 for orphans
  MatX instance_features;            // S x 16, unit rows (zero for orphans)
  MatX hier_features;                // S x 16
  std::string method = "learned";    // learned | kmeans

  std::size_t size() const { return supergs.size(); }
  int instance_count() const;
  /// Super-Gaussian of every neural Gaussian (anchor a's Gaussians share hard[a]).
  std::vector<int> gaussian_superg(int k_spawn) const;
};

struct Stage2StepLog {
  long step = 0;
  double recon = 0.0;
  double compact = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

/// FPS init, then cfg.iterations of associate -> update -> losses -> Adam,
/// refreshing neighbours every knn_refresh_period steps; finishes by hardening.
ClusterModel train_stage2(const Scene& scene, const ClusterConfig& cfg,
                          const std::function<void(const Stage2StepLog&)>& on_step = {});

/// Lloyd's algorithm on standardised [x | f_s | f_g] with k-means++ seeding.
struct KMeansResult {
  std::vector<int> assignment;
  MatX centroids;                // in standardised space
  std::vector<double> objective;  // after each iteration
  int iterations = 0;
};
KMeansResult kmeans_baseline(const AnchorAttributes& anchors, int S, std::uint64_t seed, int max_iterations = 100);

/// Builds a cluster model from a KMeans assignment (no learned nets).
ClusterModel cluster_from_kmeans(const Scene& scene, const ClusterConfig& cfg);

/// Normalised mean of member Gaussians' features per Super-Gaussian.
MatX superg_features(const MatX& gaussian_features, const std::vector<int>& gaussian_superg, std::size_t S);

/// Connected components of the kNN-by-position graph, keeping edges whose
/// feature cosine exceeds tau. Component ids follow their lowest member id.
/// Rows flagged in `skip` get label -1 and take no part in the graph.
std::vector<int> group_instances_graph(const MatX& positions, const MatX& features, int k, double tau,
                                       const std::vector<bool>& skip);

/// The same construction within each instance on hierarchical features.
std::vector<int> group_parts_graph(const MatX& positions, const MatX& features, const std::vector<int>& instance,
                                   int k, double tau);

/// Fills features and instance/part labels of a model from the scene's
/// rendered attributes.
void group_supergs(ClusterModel& model, const Scene& scene);

enum class ClickMode { part, instance };
std::string to_string(ClickMode m);
ClickMode click_mode_from_string(const std::string& s);

struct ClickResult {
  bool empty = true;
  std::vector<int> selected;  // ascending Super-Gaussian ids
  int instance = -1;          // majority instance of the part selection
};

/// Part mode: Super-Gaussians whose hier and instance features both match the
/// clicked pixel (cos > tau_hier and > tau_ins); if none pass, the single best
/// hier match. Instance mode: every Super-Gaussian sharing an instance label
/// with the part selection.
ClickResult click_query(std::size_t pixel, const BlendState& state, const FeatureImage& h_map,
                        const FeatureImage& g_map, const ClusterModel& model, ClickMode mode);

/// Binary mask of a Super-Gaussian selection: a pixel is set when its total
/// weight reaches 0.5 and the selection holds more than half of it.
std::vector<std::uint8_t> selection_mask(const BlendState& state, const std::vector<int>& gaussian_superg,
                                         const std::vector<int>& selected, std::size_t S);

/// Fraction of Super-Gaussians (with members) whose majority label holds at
/// least `threshold` of the members.
double cluster_purity(const ClusterModel& model, const std::vector<int>& anchor_labels, double threshold = 0.9);

// "supergseg-cluster/1"
nlohmann::json cluster_to_json(const ClusterModel& model);
ClusterModel cluster_from_json(const nlohmann::json& j);
void save_cluster(const ClusterModel& model, const std::filesystem::path& path);
ClusterModel load_cluster(const std::filesystem::path& path);

}  // namespace supergseg
