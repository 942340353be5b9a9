#include "supergseg/scene.hpp"

#include <cmath>

namespace supergseg {

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) throw ConfigError("look_at: up vector parallel to view direction");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  return cam;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
  if ((rotation.transpose() * rotation - Mat3::Identity()).norm() >= 1e-6) {
    throw ConfigError("camera rotation is not orthonormal");
  }
}

DecoderSet DecoderSet::random(int k_spawn, std::mt19937_64& rng) {
  const int f = kAnchorFeatureDim;
  const int h = kDecoderHidden;
  DecoderSet d;
  d.opacity = TinyMLP::random({f, h, k_spawn}, rng);
  d.color = TinyMLP::random({f, h, 3 * k_spawn}, rng);
  d.rotation = TinyMLP::random({f, h, 4 * k_spawn}, rng);
  d.scale = TinyMLP::random({f, h, 3 * k_spawn}, rng);
  d.instance = TinyMLP::random({f + 3, h, kInstanceDim * k_spawn}, rng);
  d.hier = TinyMLP::random({f + 3, h, kHierDim * k_spawn}, rng);
  return d;
}

void DecoderSet::validate(int k_spawn) const {
  auto check = [](const TinyMLP& m, int in, int out, const char* name) {
    if (m.input_dim() != in || m.output_dim() != out) {
      throw ConfigError(std::string("decoder '") + name + "' has dims " + std::to_string(m.input_dim()) + "->" +
                        std::to_string(m.output_dim()) + ", expected " + std::to_string(in) + "->" + std::to_string(out));
    }
  };
  const int f = kAnchorFeatureDim;
  check(opacity, f, k_spawn, "opacity");
  check(color, f, 3 * k_spawn, "color");
  check(rotation, f, 4 * k_spawn, "rotation");
  check(scale, f, 3 * k_spawn, "scale");
  check(instance, f + 3, kInstanceDim * k_spawn, "instance");
  check(hier, f + 3, kHierDim * k_spawn, "hier");
}

void Scene::validate() const {
  if (config.k_spawn < 1) throw ConfigError("k_spawn must be at least 1");
  decoders.validate(config.k_spawn);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Anchor& a = anchors[i];
    if (a.id != static_cast<int>(i)) throw ConfigError("anchor ids must be unique and dense");
    if (!(a.scale > 0.0) || !std::isfinite(a.scale)) throw ConfigError("anchor scale must be positive");
    if (a.f_g.size() != kAnchorFeatureDim || a.f_s.size() != kAnchorFeatureDim) {
      throw ConfigError("anchor feature dimension mismatch");
    }
    if (!a.f_g.allFinite() || !a.f_s.allFinite() || !a.position.allFinite()) {
      throw ConfigError("anchor " + std::to_string(i) + " has non-finite values");
    }
    if (static_cast<int>(a.offsets.size()) != config.k_spawn) throw ConfigError("anchor offset count != k_spawn");
    for (const auto& o : a.offsets) {
      if (!o.allFinite()) throw ConfigError("anchor offsets must be finite");
    }
  }
  for (const auto& c : cameras) c.validate();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Vec3 clamp_scale(const Vec3& log_scale) {
  Vec3 s;
  for (int i = 0; i < 3; ++i) s[i] = std::clamp(std::exp(log_scale[i]), 1e-4, 1e2);
  return s;
}

Mat3 quaternion_to_matrix(const Eigen::Vector4d& q) {
  const double n = q.norm();
  if (!(n > 0.0)) throw DomainError("zero-norm quaternion");
  const Eigen::Quaterniond quat(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
  return quat.toRotationMatrix();
}

Mat3 build_covariance(const Vec3& scale, const Eigen::Vector4d& quaternion) {
  for (int i = 0; i < 3; ++i) {
    if (!(scale[i] > 0.0)) throw DomainError("covariance scale factors must be positive");
  }
  const Mat3 r = quaternion_to_matrix(quaternion);
  const Mat3 m = r * scale.asDiagonal();
  Mat3 cov = m * m.transpose();
  // exact symmetry
  cov = 0.5 * (cov + cov.transpose()).eval();
  return cov;
}

MatX geometry_inputs(const std::vector<Anchor>& anchors) {
  MatX x(anchors.size(), kAnchorFeatureDim);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i].f_g.size() != kAnchorFeatureDim) throw ConfigError("anchor geometry feature must be 32-d");
    x.row(i) = anchors[i].f_g.transpose();
  }
  return x;
}

MatX segmentation_inputs(const std::vector<Anchor>& anchors) {
  MatX x(anchors.size(), kAnchorFeatureDim + 3);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i].f_s.size() != kAnchorFeatureDim) throw ConfigError("anchor segmentation feature must be 32-d");
    x.row(i).head(kAnchorFeatureDim) = anchors[i].f_s.transpose();
    x.row(i).tail(3) = anchors[i].position.transpose();
  }
  return x;
}

namespace {

std::vector<NeuralGaussian> decode(const std::vector<Anchor>& anchors, const DecoderSet& d, int k) {
  d.validate(k);
  const MatX geo = geometry_inputs(anchors);
  const MatX seg = segmentation_inputs(anchors);
  const MatX alpha = d.opacity.forward(geo);
  const MatX color = d.color.forward(geo);
  const MatX rot = d.rotation.forward(geo);
  const MatX scale = d.scale.forward(geo);
  const MatX inst = d.instance.forward(seg);
  const MatX hier = d.hier.forward(seg);

  std::vector<NeuralGaussian> out;
  out.reserve(anchors.size() * k);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const Anchor& anchor = anchors[a];
    if (static_cast<int>(anchor.offsets.size()) != k) throw ConfigError("anchor offset count != k_spawn");
    for (int i = 0; i < k; ++i) {
      NeuralGaussian g;
      g.anchor_id = anchor.id;
      g.mean = anchor.position + anchor.offsets[i] * anchor.scale;
      g.opacity = sigmoid(alpha(a, i));
      for (int c = 0; c < 3; ++c) g.color[c] = sigmoid(color(a, 3 * i + c));
      Eigen::Vector4d q(rot(a, 4 * i), rot(a, 4 * i + 1), rot(a, 4 * i + 2), rot(a, 4 * i + 3));
      const double qn = q.norm();
      g.rotation = qn > 1e-12 ? Eigen::Vector4d(q / qn) : Eigen::Vector4d(1.0, 0.0, 0.0, 0.0);
      g.scale = clamp_scale(Vec3(scale(a, 3 * i), scale(a, 3 * i + 1), scale(a, 3 * i + 2)));
      g.instance = inst.row(a).segment(kInstanceDim * i, kInstanceDim).transpose();
      g.hier = hier.row(a).segment(kHierDim * i, kHierDim).transpose();
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace

std::vector<NeuralGaussian> spawn_neural_gaussians(const Anchor& anchor, const DecoderSet& decoders, int k_spawn) {
  return decode(std::vector<Anchor>{anchor}, decoders, k_spawn);
}

std::vector<NeuralGaussian> spawn_all(const Scene& scene) {
  return decode(scene.anchors, scene.decoders, scene.config.k_spawn);
}

}  // namespace supergseg
