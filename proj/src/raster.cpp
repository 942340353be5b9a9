#include "supergseg/raster.hpp"

#include "supergseg/binary_io.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

namespace supergseg {

namespace {

std::atomic<bool> g_singular_logged{false};

double max_eigenvalue(const Mat2& m) {
  const double tr = 0.5 * (m(0, 0) + m(1, 1));
  const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return tr + std::sqrt(std::max(0.0, tr * tr - det));
}

}  // namespace

std::optional<Splat2D> project_gaussian(const Vec3& mean, const Mat3& covariance, double opacity, int index,
                                        const Camera& cam) {
  const Vec3 p = cam.to_camera(mean);
  if (!(p.z() > kNearPlane)) return std::nullopt;

  const double inv_z = 1.0 / p.z();
  Splat2D s;
  s.mean = Vec2(cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy);
  Eigen::Matrix<double, 2, 3> jac;
  jac << cam.fx * inv_z, 0.0, -cam.fx * p.x() * inv_z * inv_z,
         0.0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> t = jac * cam.rotation;
  s.cov = t * covariance * t.transpose();
  s.cov(1, 0) = s.cov(0, 1);
  s.depth = p.z();
  s.opacity = opacity;
  s.gaussian_index = index;

  const Mat2 reg = s.cov + kCovarianceRegularizer * Mat2::Identity();
  const double det = reg(0, 0) * reg(1, 1) - reg(0, 1) * reg(1, 0);
  if (!(det > 0.0) || !std::isfinite(det)) {
    s.invertible = false;
    s.conic.setZero();
    if (!g_singular_logged.exchange(true)) log_info("singular projected covariance; contributor skipped");
  } else {
    s.conic << reg(1, 1) / det, -reg(0, 1) / det, -reg(1, 0) / det, reg(0, 0) / det;
  }

  // 3-sigma visibility test against the image rectangle.
  const double lambda = max_eigenvalue(reg);
  const double three_sigma = 3.0 * std::sqrt(lambda);
  if (s.mean.x() + three_sigma < 0.0 || s.mean.x() - three_sigma > cam.width - 1 || s.mean.y() + three_sigma < 0.0 ||
      s.mean.y() - three_sigma > cam.height - 1) {
    return std::nullopt;
  }
  const double level = 255.0 * opacity;
  s.radius = level > 1.0 ? std::sqrt(2.0 * std::log(level) * lambda) + 1e-6 : 0.0;
  return s;
}

std::optional<Splat2D> project_gaussian(const NeuralGaussian& g, int index, const Camera& cam) {
  return project_gaussian(g.mean, build_covariance(g.scale, g.rotation), g.opacity, index, cam);
}

double evaluate_contribution(const Splat2D& splat, double alpha, const Vec2& u) {
  if (!splat.invertible) return 0.0;
  const Vec2 d = u - splat.mean;
  const double m = d.dot(splat.conic * d);
  return alpha * std::exp(-0.5 * m);
}

std::vector<std::size_t> depth_sort(std::span<const Splat2D> splats) {
  std::vector<std::size_t> order(splats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (splats[a].depth != splats[b].depth) return splats[a].depth < splats[b].depth;
    return splats[a].gaussian_index < splats[b].gaussian_index;
  });
  return order;
}

BlendState rasterize(std::span<const Splat2D> splats, std::size_t gaussian_count, int width, int height, int tile_size) {
  if (tile_size <= 0) throw ConfigError("tile size must be positive");
  BlendState state;
  state.width = width;
  state.height = height;
  state.gaussian_count = gaussian_count;
  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  state.transmittance.assign(pixels, 1.0);

  const auto order = depth_sort(splats);
  const int tiles_x = (width + tile_size - 1) / tile_size;
  const int tiles_y = (height + tile_size - 1) / tile_size;
  const std::size_t tile_count = static_cast<std::size_t>(tiles_x) * tiles_y;

  // Bin splats (in depth order) into the tiles their cutoff box touches.
  std::vector<std::vector<std::uint32_t>> bins(tile_count);
  for (std::size_t k : order) {
    const Splat2D& s = splats[k];
    if (s.radius <= 0.0 || !s.invertible) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(s.mean.x() - s.radius)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(s.mean.x() + s.radius)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(s.mean.y() - s.radius)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(s.mean.y() + s.radius)));
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = y0 / tile_size; ty <= y1 / tile_size; ++ty) {
      for (int tx = x0 / tile_size; tx <= x1 / tile_size; ++tx) {
        bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<std::uint32_t>(k));
      }
    }
  }

  std::vector<std::vector<Contributor>> per_pixel(pixels);
  parallel_chunks(tile_count, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t t = begin; t < end; ++t) {
      const int tx = static_cast<int>(t % tiles_x);
      const int ty = static_cast<int>(t / tiles_x);
      const auto& bin = bins[t];
      for (int y = ty * tile_size; y < std::min(height, (ty + 1) * tile_size); ++y) {
        for (int x = tx * tile_size; x < std::min(width, (tx + 1) * tile_size); ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * width + x;
          const Vec2 u(x, y);
          double trans = 1.0;
          auto& list = per_pixel[p];
          for (std::uint32_t k : bin) {
            const Splat2D& s = splats[k];
            const double o = evaluate_contribution(s, s.opacity, u);
            if (o < kMinContribution) continue;
            list.push_back({static_cast<std::uint32_t>(s.gaussian_index), trans * o});
            trans *= 1.0 - o;
            if (trans < kTerminationTransmittance) break;
          }
          state.transmittance[p] = trans;
        }
      }
    }
  });

  state.offsets.resize(pixels + 1);
  state.offsets[0] = 0;
  for (std::size_t p = 0; p < pixels; ++p) state.offsets[p + 1] = state.offsets[p] + per_pixel[p].size();
  state.contributors.resize(state.offsets[pixels]);
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy(per_pixel[p].begin(), per_pixel[p].end(), state.contributors.begin() + static_cast<std::ptrdiff_t>(state.offsets[p]));
  }
  return state;
}

FeatureImage blend(const BlendState& state, const MatX& values) {
  if (static_cast<std::size_t>(values.rows()) != state.gaussian_count) {
    throw ContractError("blend: value rows (" + std::to_string(values.rows()) + ") != gaussian count (" +
                        std::to_string(state.gaussian_count) + ")");
  }
  const int channels = static_cast<int>(values.cols());
  FeatureImage image(state.width, state.height, channels);
  parallel_chunks(state.pixel_count(), [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t p = begin; p < end; ++p) {
      double* out = image.data.data() + p * channels;
      for (const auto& c : state.pixel(p)) {
        const double* v = values.data() + static_cast<std::size_t>(c.gaussian) * channels;
        for (int ch = 0; ch < channels; ++ch) out[ch] += c.weight * v[ch];
      }
    }
  });
  return image;
}

MatX blend_gradient(const BlendState& state, const FeatureImage& d_image) {
  if (d_image.width != state.width || d_image.height != state.height) {
    throw ContractError("blend_gradient: cotangent image size does not match the blend state");
  }
  if (d_image.channels <= 0) throw ContractError("blend_gradient: cotangent has no channels");
  const int channels = d_image.channels;
  const std::size_t workers = worker_count();
  std::vector<MatX> partial(workers);
  parallel_chunks(state.pixel_count(), [&](std::size_t begin, std::size_t end, std::size_t w) {
    MatX& acc = partial[w];
    acc = MatX::Zero(static_cast<Eigen::Index>(state.gaussian_count), channels);
    for (std::size_t p = begin; p < end; ++p) {
      const double* d = d_image.data.data() + p * channels;
      bool any = false;
      for (int ch = 0; ch < channels; ++ch) any = any || d[ch] != 0.0;
      if (!any) continue;
      for (const auto& c : state.pixel(p)) {
        double* g = acc.data() + static_cast<std::size_t>(c.gaussian) * channels;
        for (int ch = 0; ch < channels; ++ch) g[ch] += c.weight * d[ch];
      }
    }
  });
  MatX grad = MatX::Zero(static_cast<Eigen::Index>(state.gaussian_count), channels);
  for (const auto& acc : partial) {
    if (acc.size() != 0) grad += acc;
  }
  return grad;
}

MatX gaussian_colors(const std::vector<NeuralGaussian>& gaussians) {
  MatX m(gaussians.size(), 3);
  for (std::size_t i = 0; i < gaussians.size(); ++i) m.row(i) = gaussians[i].color.transpose();
  return m;
}

MatX gaussian_instance_features(const std::vector<NeuralGaussian>& gaussians) {
  MatX m(gaussians.size(), kInstanceDim);
  for (std::size_t i = 0; i < gaussians.size(); ++i) m.row(i) = gaussians[i].instance.transpose();
  return m;
}

MatX gaussian_hier_features(const std::vector<NeuralGaussian>& gaussians) {
  MatX m(gaussians.size(), kHierDim);
  for (std::size_t i = 0; i < gaussians.size(); ++i) m.row(i) = gaussians[i].hier.transpose();
  return m;
}

BlendState build_blend_state(const std::vector<NeuralGaussian>& gaussians, const Camera& cam) {
  std::vector<Splat2D> splats;
  splats.reserve(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    if (auto s = project_gaussian(gaussians[i], static_cast<int>(i), cam)) splats.push_back(*s);
  }
  return rasterize(splats, gaussians.size(), cam.width, cam.height);
}

RenderOutput render(const std::vector<NeuralGaussian>& gaussians, const Camera& cam, const ChannelSpec& spec) {
  RenderOutput out;
  out.state = build_blend_state(gaussians, cam);
  if (spec.color) out.images["color"] = blend(out.state, gaussian_colors(gaussians));
  if (spec.instance) out.images["instance"] = blend(out.state, gaussian_instance_features(gaussians));
  if (spec.hier) out.images["hier"] = blend(out.state, gaussian_hier_features(gaussians));
  if (spec.language) out.images["language"] = blend(out.state, *spec.language);
  return out;
}

RenderOutput render(const Scene& scene, const Camera& cam, const ChannelSpec& spec) {
  return render(spawn_all(scene), cam, spec);
}

std::string encode_feature_image(const FeatureImage& image) {
  ByteWriter w;
  w.raw("SGFI");
  w.u32(static_cast<std::uint32_t>(image.width));
  w.u32(static_cast<std::uint32_t>(image.height));
  w.u32(static_cast<std::uint32_t>(image.channels));
  w.raw(pack_f32(image.data));
  return w.take();
}

FeatureImage decode_feature_image(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "SGFI") throw ParseError("bad feature image magic", 0);
  FeatureImage img;
  img.width = static_cast<int>(r.u32());
  img.height = static_cast<int>(r.u32());
  img.channels = static_cast<int>(r.u32());
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.data = unpack_f32(r.raw(count * 4));
  if (r.remaining() != 0) throw ParseError("trailing bytes after feature image payload", r.offset());
  return img;
}

void write_feature_image(const FeatureImage& image, const std::filesystem::path& path) {
  write_file(path, encode_feature_image(image));
}

FeatureImage read_feature_image(const std::filesystem::path& path) { return decode_feature_image(read_file(path)); }

std::string encode_ppm(const FeatureImage& image) {
  if (image.channels != 3) throw ContractError("PPM export needs a 3-channel image");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.data.size());
  for (double v : image.data) out += static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

void write_ppm(const FeatureImage& image, const std::filesystem::path& path) { write_file(path, encode_ppm(image)); }

FeatureImage feature_preview(const FeatureImage& image) {
  FeatureImage out(image.width, image.height, 3);
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    const auto px = image.pixel(p);
    double norm = 0.0;
    for (double v : px) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (int c = 0; c < 3 && c < image.channels; ++c) out.at(p, c) = 0.5 + 0.5 * px[c] / norm;
  }
  return out;
}

}  // namespace supergseg
