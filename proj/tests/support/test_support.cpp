#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace supergseg::testing {

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, const std::vector<std::size_t>& coords, double h) {
  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

std::vector<std::size_t> pick_coordinates(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, count));
  std::sort(all.begin(), all.end());
  return all;
}

FeatureImage random_image(int w, int h, int c, Rng& rng, double lo, double hi) {
  FeatureImage img(w, h, c);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : img.data) v = u(rng);
  return img;
}

LabelMap random_labels(int w, int h, int classes, Rng& rng, double background) {
  LabelMap m(w, h, -1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> c(0, classes - 1);
  for (int& id : m.ids) id = u(rng) < background ? -1 : c(rng);
  return m;
}

Bitmap random_bitmap(int w, int h, Rng& rng, double p) {
  Bitmap b(w, h);
  std::bernoulli_distribution coin(p);
  for (auto& bit : b.bits) bit = coin(rng) ? 1 : 0;
  return b;
}

MaskSet random_masks(int w, int h, int count, Rng& rng) {
  // Rectangles, so masks overlap and nest the way real segmenter output does.
  MaskSet set;
  set.width = w;
  set.height = h;
  std::uniform_int_distribution<int> ux(0, w - 1), uy(0, h - 1);
  for (int m = 0; m < count; ++m) {
    int x0 = ux(rng), x1 = ux(rng), y0 = uy(rng), y1 = uy(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    Bitmap b(w, h);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) b.bits[static_cast<std::size_t>(y) * w + x] = 1;
    }
    set.masks.push_back(std::move(b));
  }
  return set;
}

Camera test_camera(int w, int h) {
  return Camera::look_at(Vec3(0, 0, -4), Vec3(0, 0, 0), Vec3(0, -1, 0), 1.2 * w, w, h);
}

std::vector<NeuralGaussian> random_gaussians(int count, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> s(0.08, 0.35);
  std::uniform_real_distribution<double> o(0.2, 0.95);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<NeuralGaussian> out(count);
  for (int i = 0; i < count; ++i) {
    NeuralGaussian& g = out[i];
    g.mean = Vec3(u(rng), u(rng), u(rng));
    g.scale = Vec3(s(rng), s(rng), s(rng));
    g.rotation = Eigen::Vector4d(n(rng), n(rng), n(rng), n(rng)).normalized();
    g.opacity = o(rng);
    g.color = Vec3(0.5 + 0.5 * u(rng), 0.5 + 0.5 * u(rng), 0.5 + 0.5 * u(rng));
    for (int c = 0; c < kInstanceDim; ++c) g.instance[c] = n(rng);
    for (int c = 0; c < kHierDim; ++c) g.hier[c] = n(rng);
    g.anchor_id = i;
  }
  return out;
}

Dataset tiny_dataset(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.objects = 2;
  spec.parts_per_object = 2;
  spec.anchors_per_part = 2;
  spec.image_size = 16;
  spec.train_views = 2;
  spec.test_views = 1;
  spec.k_spawn = 5;
  spec.language_dim = 8;
  spec.seed = seed;
  return generate_synthetic_scene(spec);
}

AnchorAttributes random_anchors(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  AnchorAttributes a;
  a.x.resize(n, 3);
  a.f_s.resize(n, kAnchorFeatureDim);
  a.f_g.resize(n, kAnchorFeatureDim);
  for (Eigen::Index i = 0; i < a.x.size(); ++i) a.x.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < a.f_s.size(); ++i) a.f_s.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < a.f_g.size(); ++i) a.f_g.data()[i] = g(rng);
  return a;
}

BlendState naive_blend_state(const std::vector<Splat2D>& splats, std::size_t gaussian_count, int w, int h) {
  std::vector<std::size_t> order(splats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (splats[a].depth != splats[b].depth) return splats[a].depth < splats[b].depth;
    return splats[a].gaussian_index < splats[b].gaussian_index;
  });
  BlendState state;
  state.width = w;
  state.height = h;
  state.gaussian_count = gaussian_count;
  state.offsets.push_back(0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double trans = 1.0;
      for (std::size_t k : order) {
        const Splat2D& s = splats[k];
        if (s.radius <= 0.0 || !s.invertible) continue;
        const Vec2 d = Vec2(x, y) - s.mean;
        const double o = s.opacity * std::exp(-0.5 * d.dot(s.conic * d));
        if (o < kMinContribution) continue;
        state.contributors.push_back({static_cast<std::uint32_t>(s.gaussian_index), trans * o});
        trans *= 1.0 - o;
        if (trans < kTerminationTransmittance) break;
      }
      state.transmittance.push_back(trans);
      state.offsets.push_back(state.contributors.size());
    }
  }
  return state;
}

FeatureImage naive_blend(const BlendState& state, const MatX& values) {
  FeatureImage img(state.width, state.height, static_cast<int>(values.cols()));
  for (std::size_t p = 0; p < state.pixel_count(); ++p) {
    for (std::size_t q = state.offsets[p]; q < state.offsets[p + 1]; ++q) {
      const Contributor& c = state.contributors[q];
      for (int ch = 0; ch < img.channels; ++ch) img.at(p, ch) += c.weight * values(c.gaussian, ch);
    }
  }
  return img;
}

PatchSplit oracle_patches(const MaskSet& masks) {
  PatchSplit out;
  out.patch_map = LabelMap(masks.width, masks.height, -1);
  std::map<std::vector<int>, int> ids;
  for (std::size_t p = 0; p < out.patch_map.pixel_count(); ++p) {
    std::vector<int> cover;
    for (std::size_t m = 0; m < masks.masks.size(); ++m) {
      if (masks.masks[m](p)) cover.push_back(static_cast<int>(m));
    }
    if (cover.empty()) continue;
    auto it = ids.find(cover);
    if (it == ids.end()) {
      it = ids.emplace(cover, static_cast<int>(out.patch_masksets.size())).first;
      out.patch_masksets.push_back(cover);
    }
    out.patch_map.ids[p] = it->second;
  }
  return out;
}

std::vector<std::vector<int>> oracle_correlation(const std::vector<std::vector<int>>& masksets) {
  const std::size_t n = masksets.size();
  std::vector<std::vector<int>> corr(n, std::vector<int>(n, 0));
  for (std::size_t p = 0; p < n; ++p) {
    const std::set<int> a(masksets[p].begin(), masksets[p].end());
    for (std::size_t q = 0; q < n; ++q) {
      int shared = 0;
      for (int m : masksets[q]) shared += static_cast<int>(a.count(m));
      corr[p][q] = shared;
    }
  }
  return corr;
}

std::vector<std::vector<int>> oracle_level_sets(int patch, const std::vector<std::vector<int>>& masksets) {
  const auto corr = oracle_correlation(masksets);
  std::set<int, std::greater<>> values;
  for (int v : corr[patch]) {
    if (v > 0) values.insert(v);
  }
  std::vector<std::vector<int>> levels;
  for (int v : values) {
    std::vector<int> level;
    for (std::size_t q = 0; q < corr.size(); ++q) {
      if (corr[patch][q] == v) level.push_back(static_cast<int>(q));
    }
    levels.push_back(level);
  }
  return levels;
}

SuperAttributes oracle_update(const AnchorAttributes& anchors, const AssociationMap& assoc,
                              const SuperAttributes& previous) {
  const Eigen::Index S = previous.size();
  SuperAttributes out = previous;
  out.weight.assign(S, 0.0);
  out.orphan.assign(S, false);
  for (Eigen::Index j = 0; j < S; ++j) {
    double w = 0.0;
    Vec3 x = Vec3::Zero();
    VecX fs = VecX::Zero(anchors.f_s.cols()), fg = VecX::Zero(anchors.f_g.cols());
    for (Eigen::Index i = 0; i < anchors.size(); ++i) {
      for (int s = 0; s < assoc.k_nn; ++s) {
        if (assoc.neighbor(i, s) != j) continue;
        const double a = assoc.soft(i, s);
        w += a;
        x += a * anchors.x.row(i).transpose();
        fs += a * anchors.f_s.row(i).transpose();
        fg += a * anchors.f_g.row(i).transpose();
      }
    }
    out.weight[j] = w;
    if (w > 0.0) {
      out.x.row(j) = (x / w).transpose();
      out.f_s.row(j) = (fs / w).transpose();
      out.f_g.row(j) = (fg / w).transpose();
    } else {
      out.orphan[j] = true;
    }
  }
  return out;
}

std::vector<std::vector<int>> oracle_membership(const AssociationMap& assoc, std::size_t S) {
  std::vector<std::vector<int>> members(S);
  for (std::size_t j = 0; j < S; ++j) {
    for (std::size_t i = 0; i < assoc.anchor_count(); ++i) {
      for (int s = 0; s < assoc.k_nn; ++s) {
        if (assoc.neighbor(i, s) == static_cast<int>(j)) members[j].push_back(static_cast<int>(i));
      }
    }
  }
  return members;
}

double oracle_compactness(const AnchorAttributes& anchors, const SuperAttributes& updated, const AssociationMap& assoc) {
  const std::size_t S = static_cast<std::size_t>(updated.size());
  const auto members = oracle_membership(assoc, S);
  double total = 0.0;
  for (std::size_t j = 0; j < S; ++j) {
    if (members[j].empty()) continue;
    double sum = 0.0;
    for (int i : members[j]) sum += (anchors.x.row(i) - updated.x.row(j)).norm();
    total += sum / static_cast<double>(members[j].size());
  }
  return total / static_cast<double>(S);
}

SegmentationMetrics oracle_miou(const LabelMap& pred, const LabelMap& gt, int classes) {
  SegmentationMetrics m;
  m.iou.resize(classes);
  m.acc.resize(classes);
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> P, G;
    for (std::size_t p = 0; p < gt.ids.size(); ++p) {
      if (gt.ids[p] < 0) continue;
      if (pred.ids[p] == c) P.insert(p);
      if (gt.ids[p] == c) G.insert(p);
    }
    if (G.empty()) continue;
    std::vector<std::size_t> inter, uni;
    std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(inter));
    std::set_union(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(uni));
    m.iou[c] = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    m.acc[c] = static_cast<double>(inter.size()) / static_cast<double>(G.size());
    m.miou += *m.iou[c];
    m.macc += *m.acc[c];
    ++m.valid_classes;
  }
  if (m.valid_classes > 0) {
    m.miou /= m.valid_classes;
    m.macc /= m.valid_classes;
  }
  return m;
}

}  // namespace supergseg::testing

namespace supergseg::testing {

namespace {

std::vector<double> gather_coords(const std::vector<double>& all, const std::vector<std::size_t>& coords) {
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t c : coords) out.push_back(all[c]);
  return out;
}

double image_check(const FeatureImage& x, const FeatureImage& grad, std::size_t count, Rng& rng,
                   const std::function<double(const FeatureImage&)>& f) {
  const auto coords = pick_coordinates(x.data.size(), count, rng);
  const auto fn = [&](const std::vector<double>& v) {
    FeatureImage img = x;
    img.data = v;
    return f(img);
  };
  return relative_error(gather_coords(grad.data, coords), central_difference(fn, x.data, coords));
}

}  // namespace

double gradient_check_instance(Rng& rng) {
  const FeatureImage f = random_image(16, 16, kInstanceDim, rng);
  LabelMap labels = random_labels(16, 16, 4, rng);
  labels.ids[0] = 0;
  labels.ids[1] = 1;  // at least two instances
  ContrastiveOptions opt;
  opt.full_enumeration = true;
  const LossResult base = instance_loss(f, labels, opt);
  opt.frozen = &base.stats;
  return image_check(f, base.grad, 40, rng, [&](const FeatureImage& img) { return instance_loss(img, labels, opt).value; });
}

double gradient_check_hierarchical(Rng& rng) {
  const FeatureImage f = random_image(16, 16, kHierDim, rng);
  const PatchDecomposition d = build_decomposition(random_masks(16, 16, 5, rng));
  ContrastiveOptions opt;
  opt.full_enumeration = true;
  const LossResult base = hierarchical_loss(f, d, opt);
  opt.frozen = &base.stats;
  return image_check(f, base.grad, 40, rng, [&](const FeatureImage& img) { return hierarchical_loss(img, d, opt).value; });
}

double gradient_check_l1(Rng& rng) {
  const FeatureImage a = random_image(16, 16, 3, rng), b = random_image(16, 16, 3, rng);
  return image_check(a, rgb_l1(a, b).grad, 60, rng, [&](const FeatureImage& img) { return rgb_l1(img, b).value; });
}

double gradient_check_cosine(Rng& rng) {
  const FeatureImage r = random_image(16, 16, 8, rng), t = random_image(16, 16, 8, rng);
  const Bitmap valid = random_bitmap(16, 16, rng, 0.7);
  const CosineLossResult base = cosine_loss(r, t, valid.bits);
  return image_check(r, base.grad, 60, rng, [&](const FeatureImage& img) { return cosine_loss(img, t, valid.bits).value; });
}

double gradient_check_blend(Rng& rng) {
  const auto gs = random_gaussians(1 + static_cast<int>(rng() % 50), rng);
  const BlendState st = build_blend_state(gs, test_camera(16, 16));
  const int C = 4;
  const Eigen::Index n = static_cast<Eigen::Index>(gs.size());
  const FeatureImage cot = random_image(16, 16, C, rng);
  MatX values(n, C);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = u(rng);
  const auto f = [&](const std::vector<double>& v) {
    const FeatureImage img = blend(st, Eigen::Map<const MatX>(v.data(), n, C));
    double s = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) s += img.data[i] * cot.data[i];
    return s;
  };
  const MatX g = blend_gradient(st, cot);
  const std::vector<double> x(values.data(), values.data() + values.size());
  const std::vector<double> gv(g.data(), g.data() + g.size());
  const auto coords = pick_coordinates(x.size(), 60, rng);
  return relative_error(gather_coords(gv, coords), central_difference(f, x, coords));
}

AssociationCase random_association(int n, int S, int k, Rng& rng) {
  AssociationCase c;
  c.anchors = random_anchors(n, rng);
  const auto seeds = farthest_point_sample(c.anchors.x, S, rng());
  c.previous = SuperAttributes::from(init_supergs(c.anchors, seeds));
  c.assoc.k_nn = k;
  c.assoc.neighbors = nearest_centers(c.anchors.x, c.previous.x, k);
  c.assoc.logits.resize(n, k);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < c.assoc.logits.size(); ++i) c.assoc.logits.data()[i] = g(rng);
  c.assoc.soft = softmax_rows(c.assoc.logits);
  return c;
}

namespace {

double logit_check(const AssociationCase& c, const MatX& d_logits, Rng& rng,
                   const std::function<double(const AssociationMap&)>& f) {
  const std::vector<double> x(c.assoc.logits.data(), c.assoc.logits.data() + c.assoc.logits.size());
  const std::vector<double> g(d_logits.data(), d_logits.data() + d_logits.size());
  const auto fn = [&](const std::vector<double>& v) {
    AssociationMap m = c.assoc;
    m.logits = Eigen::Map<const MatX>(v.data(), m.logits.rows(), m.logits.cols());
    m.soft = softmax_rows(m.logits);
    return f(m);
  };
  const auto coords = pick_coordinates(x.size(), 60, rng);
  return relative_error(gather_coords(g, coords), central_difference(fn, x, coords));
}

}  // namespace

double gradient_check_reconstruction(Rng& rng, Attribute attribute) {
  const AssociationCase c = random_association(40, 8, 3, rng);
  const AssociationLoss base = reconstruction_loss(c.anchors, c.previous, c.assoc, attribute);
  return logit_check(c, base.d_logits, rng, [&](const AssociationMap& m) {
    return reconstruction_loss(c.anchors, c.previous, m, attribute).value;
  });
}

double gradient_check_compactness(Rng& rng) {
  const AssociationCase c = random_association(40, 8, 3, rng);
  const AssociationLoss base = compactness_loss(c.anchors, c.previous, c.assoc);
  return logit_check(c, base.d_logits,
                     rng, [&](const AssociationMap& m) { return compactness_loss(c.anchors, c.previous, m).value; });
}

double gradient_check_stage2(Rng& rng) {
  const AssociationCase c = random_association(40, 8, 3, rng);
  AssociationNets nets = AssociationNets::random(rng);
  // Fresh nets have zero biases and a zero output layer. A seed anchor then
  // feeds an all-zero row into F_sg and sits exactly on a ReLU hinge, so
  // perturb biases and weights to land on a differentiable point.
  std::normal_distribution<double> small(0.0, 0.1);
  for (TinyMLP* m : {&nets.phi, &nets.phi_s, &nets.psi, &nets.sg}) {
    for (auto& l : m->layers()) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = small(rng);
    }
  }
  for (Eigen::Index i = 0; i < nets.sg.layers().back().weight.size(); ++i) {
    nets.sg.layers().back().weight.data()[i] = small(rng);
  }
  ClusterConfig cfg;
  cfg.k_nn = 3;
  const Stage2Evaluation base = evaluate_stage2(c.anchors, c.previous, nets, c.assoc.neighbors, cfg);
  std::vector<double> x, g;
  for (const TinyMLP* m : {&nets.phi, &nets.phi_s, &nets.psi, &nets.sg}) {
    const auto p = m->parameters();
    x.insert(x.end(), p.begin(), p.end());
  }
  for (const MlpGradient* m : {&base.phi, &base.phi_s, &base.psi, &base.sg}) {
    const auto p = m->flatten();
    g.insert(g.end(), p.begin(), p.end());
  }
  const auto fn = [&](const std::vector<double>& v) {
    AssociationNets n = nets;
    std::size_t off = 0;
    for (TinyMLP* m : {&n.phi, &n.phi_s, &n.psi, &n.sg}) {
      const std::size_t count = m->parameter_count();
      m->set_parameters(std::span<const double>(v.data() + off, count));
      off += count;
    }
    return evaluate_stage2(c.anchors, c.previous, n, c.assoc.neighbors, cfg).total;
  };
  const auto coords = pick_coordinates(x.size(), 60, rng);
  return relative_error(gather_coords(g, coords), central_difference(fn, x, coords));
}

double gradient_check_stage1(std::uint64_t seed) {
  const Dataset ds = tiny_dataset(seed);
  const auto views = prepare_training_views(ds);
  const TrainingView& view = views[seed % views.size()];
  Stage1Config cfg;
  cfg.full_enumeration = true;
  const Stage1Evaluation base = evaluate_stage1(ds.scene, view, cfg, seed);

  const auto pack = [](const Scene& s) {
    std::vector<double> v = s.decoders.color.parameters();
    for (const TinyMLP* m : {&s.decoders.instance, &s.decoders.hier}) {
      const auto p = m->parameters();
      v.insert(v.end(), p.begin(), p.end());
    }
    for (const Anchor& a : s.anchors) v.insert(v.end(), a.f_s.data(), a.f_s.data() + a.f_s.size());
    return v;
  };
  std::vector<double> g = base.grad.color.flatten();
  for (const MlpGradient* m : {&base.grad.instance, &base.grad.hier}) {
    const auto p = m->flatten();
    g.insert(g.end(), p.begin(), p.end());
  }
  g.insert(g.end(), base.grad.f_s.data(), base.grad.f_s.data() + base.grad.f_s.size());

  const auto fn = [&](const std::vector<double>& v) {
    Scene s = ds.scene;
    std::size_t off = 0;
    for (TinyMLP* m : {&s.decoders.color, &s.decoders.instance, &s.decoders.hier}) {
      const std::size_t count = m->parameter_count();
      m->set_parameters(std::span<const double>(v.data() + off, count));
      off += count;
    }
    for (Anchor& a : s.anchors) {
      a.f_s = Eigen::Map<const VecX>(v.data() + off, kAnchorFeatureDim);
      off += kAnchorFeatureDim;
    }
    return evaluate_stage1(s, view, cfg, seed, &base.instance_stats, &base.hier_stats).total;
  };
  Rng rng(seed);
  const auto x = pack(ds.scene);
  const auto coords = pick_coordinates(x.size(), 60, rng);
  return relative_error(gather_coords(g, coords), central_difference(fn, x, coords));
}

double gradient_check_stage3(std::uint64_t seed) {
  const Dataset ds = tiny_dataset(seed);
  ClusterConfig cfg;
  cfg.S = 4;
  cfg.seed = seed;
  ClusterModel model = cluster_from_kmeans(ds.scene, cfg);
  const auto views = prepare_language_views(ds);
  const LanguageView& view = views[seed % views.size()];
  Rng rng(seed);
  const LanguageField field = LanguageField::random(model.size(), ds.vocab.dim(), rng);
  const int k = ds.scene.config.k_spawn;
  const Stage3Evaluation base = evaluate_stage3(field, model, view, k);

  std::vector<double> x(field.latents.data(), field.latents.data() + field.latents.size());
  const auto dec = field.decoder.parameters();
  x.insert(x.end(), dec.begin(), dec.end());
  std::vector<double> g(base.d_latents.data(), base.d_latents.data() + base.d_latents.size());
  const auto gd = base.d_decoder.flatten();
  g.insert(g.end(), gd.begin(), gd.end());
  const auto fn = [&](const std::vector<double>& v) {
    LanguageField f = field;
    std::copy(v.begin(), v.begin() + f.latents.size(), f.latents.data());
    f.decoder.set_parameters(std::span<const double>(v.data() + f.latents.size(), v.size() - f.latents.size()));
    return evaluate_stage3(f, model, view, k).loss;
  };
  const auto coords = pick_coordinates(x.size(), 60, rng);
  return relative_error(gather_coords(g, coords), central_difference(fn, x, coords));
}

}  // namespace supergseg::testing
