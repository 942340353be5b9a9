#pragma once

#include "supergseg/common.hpp"
#include "supergseg/tiny_mlp.hpp"

#include <Eigen/Geometry>

#include <optional>
#include <vector>

namespace supergseg {

inline constexpr int kAnchorFeatureDim = 32;
inline constexpr int kInstanceDim = 16;
inline constexpr int kHierDim = 16;
inline constexpr int kDecoderHidden = 32;

struct Anchor {
  int id = 0;
  Vec3 position = Vec3::Zero();
  VecX f_g = VecX::Zero(kAnchorFeatureDim);  // geometry feature
  VecX f_s = VecX::Zero(kAnchorFeatureDim);  // segmentation feature
  double scale = 1.0;                        // l
  std::vector<Vec3> offsets;                 // k_spawn learnable offsets

  bool operator==(const Anchor&) const = default;
};

struct NeuralGaussian {
  Vec3 mean = Vec3::Zero();
  Vec3 scale = Vec3::Ones();
  Eigen::Vector4d rotation{1.0, 0.0, 0.0, 0.0};  // (w, x, y, z), unit
  double opacity = 1.0;
  Vec3 color = Vec3::Zero();
  VecX instance = VecX::Zero(kInstanceDim);
  VecX hier = VecX::Zero(kHierDim);
  int anchor_id = 0;
};

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (x right, y down, z forward).
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height);
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }
  void validate() const;

  bool operator==(const Camera&) const = default;
};

/// Decoders from anchor features to per-Gaussian attributes. The first four
/// read f_g; instance/hier read f_s concatenated with the anchor position.
struct DecoderSet {
  TinyMLP opacity;
  TinyMLP color;
  TinyMLP rotation;
  TinyMLP scale;
  TinyMLP instance;
  TinyMLP hier;

  static DecoderSet random(int k_spawn, std::mt19937_64& rng);
  void validate(int k_spawn) const;

  bool operator==(const DecoderSet&) const = default;
};

struct SceneConfig {
  int k_spawn = 5;

  bool operator==(const SceneConfig&) const = default;
};

struct Scene {
  SceneConfig config;
  std::vector<Anchor> anchors;
  DecoderSet decoders;
  std::vector<Camera> cameras;

  void validate() const;
  std::size_t gaussian_count() const { return anchors.size() * static_cast<std::size_t>(config.k_spawn); }

  bool operator==(const Scene&) const = default;
};

/// R S S^T R^T for positive scales and a (normalised) quaternion.
Mat3 build_covariance(const Vec3& scale, const Eigen::Vector4d& quaternion);
Mat3 quaternion_to_matrix(const Eigen::Vector4d& quaternion);

Vec3 clamp_scale(const Vec3& log_scale);
double sigmoid(double x);

/// Decodes the k_spawn Gaussians of one anchor.
std::vector<NeuralGaussian> spawn_neural_gaussians(const Anchor& anchor, const DecoderSet& decoders, int k_spawn);

/// Batched spawn over the whole scene; Gaussian a*k_spawn+i belongs to anchor a.
std::vector<NeuralGaussian> spawn_all(const Scene& scene);

/// Rows [f_s | x] for the instance/hier decoders.
MatX segmentation_inputs(const std::vector<Anchor>& anchors);
MatX geometry_inputs(const std::vector<Anchor>& anchors);

}  // namespace supergseg
