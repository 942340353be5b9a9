#include "supergseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace supergseg {

namespace {

constexpr double kMinFeatureNorm = 1e-12;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  return x;
}

/// Normalised feature of one sampled pixel.
struct Sample {
  std::size_t pixel;
  VecX unit;
  double norm;
};

std::vector<Sample> gather(const FeatureImage& image, const std::vector<std::size_t>& pixels) {
  std::vector<Sample> out;
  out.reserve(pixels.size());
  for (std::size_t p : pixels) {
    const auto px = image.pixel(p);
    VecX v = Eigen::Map<const VecX>(px.data(), image.channels);
    const double n = v.norm();
    if (n < kMinFeatureNorm) continue;
    out.push_back({p, v / n, n});
  }
  return out;
}

/// Normalised mean of unit features; zero vector if the mean vanishes.
VecX unit_mean(const std::vector<Sample>& samples, int dim) {
  VecX m = VecX::Zero(dim);
  for (const auto& s : samples) m += s.unit;
  const double n = m.norm();
  return n > kMinFeatureNorm ? VecX(m / n) : m;
}

/// Pushes dL/d(unit) back through v/||v|| into the gradient image.
void scatter(FeatureImage& grad, const Sample& s, const VecX& d_unit) {
  const VecX d = (d_unit - s.unit * s.unit.dot(d_unit)) / s.norm;
  for (int c = 0; c < grad.channels; ++c) grad.at(s.pixel, c) += d[c];
}

struct Softmax {
  VecX logits;
  VecX prob;
  double lse = 0.0;
};

Softmax softmax(const VecX& unit, const MatX& means, double tau) {
  Softmax s;
  s.logits = means * unit / tau;
  const double mx = s.logits.maxCoeff();
  s.prob = (s.logits.array() - mx).exp().matrix();
  const double sum = s.prob.sum();
  s.prob /= sum;
  s.lse = mx + std::log(sum);
  return s;
}

}  // namespace

std::vector<std::size_t> sample_pixels(const std::vector<std::size_t>& pixels, const ContrastiveOptions& opt) {
  if (opt.full_enumeration || pixels.size() <= static_cast<std::size_t>(std::max(opt.pixels_per_mask, 0))) return pixels;
  std::mt19937_64 rng(mix(opt.seed, pixels.front()));
  std::vector<std::size_t> out;
  out.reserve(opt.pixels_per_mask);
  std::sample(pixels.begin(), pixels.end(), std::back_inserter(out), opt.pixels_per_mask, rng);
  return out;
}

std::vector<std::vector<std::size_t>> pixels_by_label(const LabelMap& labels) {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(labels.max_id() + 1));
  for (std::size_t p = 0; p < labels.pixel_count(); ++p) {
    if (labels.ids[p] >= 0) groups[labels.ids[p]].push_back(p);
  }
  return groups;
}

LossResult instance_loss(const FeatureImage& features, const LabelMap& instance_map, const ContrastiveOptions& opt) {
  if (features.width != instance_map.width || features.height != instance_map.height) {
    throw ContractError("instance_loss: feature map and instance map sizes differ");
  }
  if (!(opt.tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  LossResult out;
  out.grad = FeatureImage(features.width, features.height, features.channels);

  std::vector<std::vector<Sample>> groups;
  for (const auto& pixels : pixels_by_label(instance_map)) {
    if (pixels.empty()) continue;
    auto samples = gather(features, sample_pixels(pixels, opt));
    if (!samples.empty()) groups.push_back(std::move(samples));
  }
  if (groups.size() < 2) {
    out.skipped = true;
    out.notice = "instance loss skipped: fewer than two instances in view";
    return out;
  }

  const int dim = features.channels;
  MatX means(groups.size(), dim);
  if (opt.frozen) {
    if (opt.frozen->means.rows() != static_cast<Eigen::Index>(groups.size()) || opt.frozen->means.cols() != dim) {
      throw ContractError("instance_loss: frozen means do not match the instance groups");
    }
    means = opt.frozen->means;
  } else {
    for (std::size_t q = 0; q < groups.size(); ++q) means.row(q) = unit_mean(groups[q], dim).transpose();
  }
  out.stats.means = means;

  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  for (std::size_t p = 0; p < groups.size(); ++p) {
    const double w = inv_groups / static_cast<double>(groups[p].size());
    for (const auto& s : groups[p]) {
      const Softmax sm = softmax(s.unit, means, opt.tau);
      out.value += w * (sm.lse - sm.logits[p]);
      VecX d_unit = (means.transpose() * sm.prob - means.row(p).transpose()) / opt.tau;
      scatter(out.grad, s, w * d_unit);
    }
  }
  return out;
}

LossResult hierarchical_loss(const FeatureImage& features, const PatchDecomposition& decomposition,
                             const ContrastiveOptions& opt) {
  const LabelMap& patches = decomposition.patch_map;
  if (features.width != patches.width || features.height != patches.height) {
    throw ContractError("hierarchical_loss: feature map and patch map sizes differ");
  }
  if (!(opt.tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  if (!(opt.lambda_decay > 0.0 && opt.lambda_decay <= 1.0)) throw ConfigError("lambda_decay must be in (0, 1]");
  LossResult out;
  out.grad = FeatureImage(features.width, features.height, features.channels);

  const int patch_count = decomposition.patch_count();
  if (patch_count == 0) return out;
  const int dim = features.channels;

  auto pixel_groups = pixels_by_label(patches);
  pixel_groups.resize(patch_count);
  std::vector<std::vector<Sample>> samples(patch_count);
  MatX means = MatX::Zero(patch_count, dim);
  for (int p = 0; p < patch_count; ++p) {
    if (pixel_groups[p].empty()) continue;
    samples[p] = gather(features, sample_pixels(pixel_groups[p], opt));
    means.row(p) = unit_mean(samples[p], dim).transpose();
  }
  if (opt.frozen) {
    if (opt.frozen->means.rows() != patch_count || opt.frozen->means.cols() != dim) {
      throw ContractError("hierarchical_loss: frozen means do not match the patches");
    }
    means = opt.frozen->means;
  }
  out.stats.means = means;
  std::size_t next_threshold = 0;

  for (int p = 0; p < patch_count; ++p) {
    if (samples[p].empty()) continue;
    const auto& levels = decomposition.levels[p];
    const double inv_t = 1.0 / static_cast<double>(samples[p].size());
    for (const auto& s : samples[p]) {
      const Softmax sm = softmax(s.unit, means, opt.tau);
      // per-target loss l(r) = lse - z_r; coefficient c_r of each selected l(r)
      VecX coeff = VecX::Zero(patch_count);
      double threshold = -std::numeric_limits<double>::infinity();
      double decay = 1.0;
      for (const auto& level : levels) {
        if (opt.frozen) {
          if (next_threshold >= opt.frozen->thresholds.size()) {
            throw ContractError("hierarchical_loss: frozen thresholds do not match the evaluation");
          }
          threshold = opt.frozen->thresholds[next_threshold];
        }
        ++next_threshold;
        out.stats.thresholds.push_back(threshold);
        const double w = decay / static_cast<double>(level.size());
        double level_max = -std::numeric_limits<double>::infinity();
        for (int r : level) {
          const double l = sm.lse - sm.logits[r];
          level_max = std::max(level_max, l);
          if (l >= threshold) {
            out.value += inv_t * w * l;
            coeff[r] += inv_t * w;
          } else {
            out.value += inv_t * w * threshold;  // detached threshold
          }
        }
        threshold = level_max;
        decay *= opt.lambda_decay;
      }
      const double total = coeff.sum();
      if (total == 0.0) continue;
      // dL/dz = -coeff + total * softmax
      const VecX d_logits = sm.prob * total - coeff;
      const VecX d_unit = means.transpose() * d_logits / opt.tau;
      scatter(out.grad, s, d_unit);
    }
  }
  return out;
}

LossResult rgb_l1(const FeatureImage& rendered, const FeatureImage& target) {
  if (rendered.width != target.width || rendered.height != target.height || rendered.channels != target.channels) {
    throw ContractError("rgb_l1: image dimensions differ");
  }
  LossResult out;
  out.grad = FeatureImage(rendered.width, rendered.height, rendered.channels);
  const std::size_t n = rendered.data.size();
  if (n == 0) return out;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = rendered.data[i] - target.data[i];
    out.value += std::abs(d) * inv;
    out.grad.data[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return out;
}

}  // namespace supergseg
