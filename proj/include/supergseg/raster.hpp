#pragma once

#include "supergseg/common.hpp"
#include "supergseg/scene.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace supergseg {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovarianceRegularizer = 0.3;
inline constexpr double kMinContribution = 1.0 / 255.0;
inline constexpr double kTerminationTransmittance = 1e-4;
inline constexpr int kTileSize = 16;

/// A Gaussian projected to the image plane.
struct Splat2D {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();    // J W Sigma W^T J^T, unregularised
  Mat2 conic = Mat2::Identity();  // (cov + 0.3 I)^-1
  double depth = 0.0;
  double opacity = 0.0;
  double radius = 0.0;  // pixel radius beyond which the contribution is below 1/255
  int gaussian_index = 0;
  bool invertible = true;
};

std::optional<Splat2D> project_gaussian(const Vec3& mean, const Mat3& covariance, double opacity, int index,
                                        const Camera& cam);
std::optional<Splat2D> project_gaussian(const NeuralGaussian& g, int index, const Camera& cam);

/// o = alpha * exp(-1/2 d^T conic d), d = u - mean.
double evaluate_contribution(const Splat2D& splat, double alpha, const Vec2& u);

/// Ascending depth; equal depths keep the lower gaussian_index first.
std::vector<std::size_t> depth_sort(std::span<const Splat2D> splats);

struct Contributor {
  std::uint32_t gaussian = 0;
  double weight = 0.0;  // T_i * o_i
};

/// Per-pixel front-to-back contributor lists in CSR layout plus the
/// transmittance left after the last contributor.
struct BlendState {
  int width = 0;
  int height = 0;
  std::size_t gaussian_count = 0;
  std::vector<std::size_t> offsets;  // width*height + 1
  std::vector<Contributor> contributors;
  std::vector<double> transmittance;

  std::span<const Contributor> pixel(std::size_t p) const {
    return {contributors.data() + offsets[p], offsets[p + 1] - offsets[p]};
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

struct FeatureImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;  // row-major, channels interleaved

  FeatureImage() = default;
  FeatureImage(int w, int h, int c) : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  double& at(std::size_t pixel, int c) { return data[pixel * channels + c]; }
  double at(std::size_t pixel, int c) const { return data[pixel * channels + c]; }
  std::span<const double> pixel(std::size_t p) const { return {data.data() + p * channels, static_cast<std::size_t>(channels)}; }
  std::span<double> pixel(std::size_t p) { return {data.data() + p * channels, static_cast<std::size_t>(channels)}; }
};

/// Builds the blend state for depth-sorted splats using 16x16 tiles.
BlendState rasterize(std::span<const Splat2D> splats, std::size_t gaussian_count, int width, int height,
                     int tile_size = kTileSize);

/// Alpha-blends per-Gaussian channel values (gaussian_count x C).
FeatureImage blend(const BlendState& state, const MatX& values);

/// dL/dvalues given dL/dImage; linear in the cotangent.
MatX blend_gradient(const BlendState& state, const FeatureImage& d_image);

struct ChannelSpec {
  bool color = true;
  bool instance = false;
  bool hier = false;
  /// Optional per-Gaussian language features (gaussian_count x D).
  std::optional<MatX> language;
};

struct RenderOutput {
  std::map<std::string, FeatureImage> images;  // keys: color, instance, hier, language
  BlendState state;
};

/// Projects every Gaussian (culling as needed) and rasterizes.
BlendState build_blend_state(const std::vector<NeuralGaussian>& gaussians, const Camera& cam);
RenderOutput render(const std::vector<NeuralGaussian>& gaussians, const Camera& cam, const ChannelSpec& spec);
RenderOutput render(const Scene& scene, const Camera& cam, const ChannelSpec& spec);

/// Stacks the per-Gaussian color / instance / hier attributes as rows.
MatX gaussian_colors(const std::vector<NeuralGaussian>& gaussians);
MatX gaussian_instance_features(const std::vector<NeuralGaussian>& gaussians);
MatX gaussian_hier_features(const std::vector<NeuralGaussian>& gaussians);

// SGFI: "SGFI", u32 width, u32 height, u32 channels (LE), then f32 payload.
void write_feature_image(const FeatureImage& image, const std::filesystem::path& path);
FeatureImage read_feature_image(const std::filesystem::path& path);
std::string encode_feature_image(const FeatureImage& image);
FeatureImage decode_feature_image(std::string_view bytes);

/// Binary P6 with values clamped to [0,1]; image must have 3 channels.
std::string encode_ppm(const FeatureImage& image);
void write_ppm(const FeatureImage& image, const std::filesystem::path& path);

/// 3-channel preview of a feature image (per-pixel normalised, first three channels).
FeatureImage feature_preview(const FeatureImage& image);

}  // namespace supergseg
