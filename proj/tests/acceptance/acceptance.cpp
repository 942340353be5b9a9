// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "test_support.hpp"

#include "supergseg/optim.hpp"
#include "supergseg/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

using namespace supergseg;
using namespace supergseg::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

void report(int id, const std::string& name, const Outcome& o, int& failures) {
  std::printf("criterion %d %-28s %s%s\n", id, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

// ---- 1: gradients ---------------------------------------------------------

Outcome gradient_suite() {
  constexpr int kCases = 20;
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(2024);
  auto run = [&](const std::string& name, double tol, const std::function<double(int)>& check) {
    double worst = 0.0;
    for (int c = 0; c < kCases; ++c) worst = std::max(worst, check(c));
    o.detail << " " << name << "=" << worst;
    o.require(worst <= tol, name);
  };
  run("instance", 1e-4, [&](int) { return gradient_check_instance(rng); });
  run("hierarchical", 1e-4, [&](int) { return gradient_check_hierarchical(rng); });
  run("l1", 1e-4, [&](int) { return gradient_check_l1(rng); });
  run("reconstruction", 1e-4, [&](int c) {
    const Attribute a[] = {Attribute::position, Attribute::f_s, Attribute::f_g};
    return gradient_check_reconstruction(rng, a[c % 3]);
  });
  run("compactness", 1e-4, [&](int) { return gradient_check_compactness(rng); });
  run("cosine", 1e-4, [&](int) { return gradient_check_cosine(rng); });
  run("blend", 1e-4, [&](int) { return gradient_check_blend(rng); });
  run("stage1_e2e", 1e-3, [&](int c) { return gradient_check_stage1(1 + c); });
  const double secs = seconds_since(t0);
  o.detail << " runtime=" << secs << "s";
  o.require(secs <= 60.0, "runtime");
  return o;
}

// ---- 2: oracles ---------------------------------------------------------

std::vector<Splat2D> project_all(const std::vector<NeuralGaussian>& gs, const Camera& cam) {
  std::vector<Splat2D> out;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (auto s = project_gaussian(gs[i], static_cast<int>(i), cam)) out.push_back(*s);
  }
  return out;
}

Outcome oracle_suite() {
  constexpr int kCases = 100;
  constexpr double kTol = 1e-6;
  Outcome o;
  Rng rng(77);

  int bad = 0;
  for (int t = 0; t < kCases; ++t) {
    const MaskSet masks = random_masks(12, 10, 1 + static_cast<int>(rng() % 6), rng);
    const PatchSplit got = decompose_to_patches(masks), want = oracle_patches(masks);
    bad += !(got.patch_map == want.patch_map && got.patch_masksets == want.patch_masksets);
  }
  o.detail << " patches=" << kCases - bad << "/" << kCases;
  o.require(bad == 0, "patches");

  int bad_corr = 0, bad_levels = 0;
  for (int t = 0; t < kCases; ++t) {
    const PatchSplit split = decompose_to_patches(random_masks(10, 10, 1 + static_cast<int>(rng() % 7), rng));
    const auto corr = correlation_matrix(split.patch_masksets);
    bad_corr += corr != oracle_correlation(split.patch_masksets);
    bool ok = true;
    for (int p = 0; p < static_cast<int>(split.patch_masksets.size()); ++p) {
      ok &= level_sets(p, corr) == oracle_level_sets(p, split.patch_masksets);
    }
    bad_levels += !ok;
  }
  o.detail << " correlation=" << kCases - bad_corr << "/" << kCases << " levels=" << kCases - bad_levels << "/" << kCases;
  o.require(bad_corr == 0, "correlation");
  o.require(bad_levels == 0, "level sets");

  double update_err = 0.0;
  int bad_orphans = 0;
  for (int t = 0; t < kCases; ++t) {
    const int S = 2 + static_cast<int>(rng() % 8);
    AssociationCase c = random_association(10 + static_cast<int>(rng() % 40), S, 1 + static_cast<int>(rng() % 2), rng);
    if (t % 2 == 0) {
      for (int& j : c.assoc.neighbors) j = static_cast<int>(rng() % (S - 1));
    }
    const SuperAttributes got = update_supergs(c.anchors, c.assoc, c.previous);
    const SuperAttributes want = oracle_update(c.anchors, c.assoc, c.previous);
    bad_orphans += got.orphan != want.orphan;
    update_err = std::max({update_err, (got.x - want.x).cwiseAbs().maxCoeff(), (got.f_s - want.f_s).cwiseAbs().maxCoeff(),
                           (got.f_g - want.f_g).cwiseAbs().maxCoeff()});
  }
  o.detail << " update=" << update_err;
  o.require(update_err <= kTol && bad_orphans == 0, "update");

  // Compactness value, plus hard membership against the {i : j in N_i} sets.
  double compact_err = 0.0;
  int bad_members = 0;
  for (int t = 0; t < kCases; ++t) {
    const int S = 3 + static_cast<int>(rng() % 6);
    const AssociationCase c =
        random_association(10 + static_cast<int>(rng() % 30), S, 1 + static_cast<int>(rng() % 3), rng);
    const SuperAttributes up = update_supergs(c.anchors, c.assoc, c.previous);
    compact_err = std::max(compact_err, std::abs(compactness_loss(c.anchors, c.previous, c.assoc).value -
                                                 oracle_compactness(c.anchors, up, c.assoc)));
    AssociationMap hard_map;
    hard_map.k_nn = 1;
    hard_map.neighbors = harden(c.assoc);
    hard_map.soft = MatX::Ones(static_cast<Eigen::Index>(hard_map.neighbors.size()), 1);
    std::vector<SuperGaussian> sgs = init_supergs(c.anchors, farthest_point_sample(c.anchors.x, S, 1));
    apply_hard_assignment(sgs, c.anchors, hard_map.neighbors);
    const auto want = oracle_membership(hard_map, S);
    for (int j = 0; j < S; ++j) bad_members += sgs[j].members != want[j];
  }
  o.detail << " compactness=" << compact_err << " membership_mismatch=" << bad_members;
  o.require(compact_err <= kTol, "compactness");
  o.require(bad_members == 0, "membership");

  double render_err = 0.0;
  int bad_ids = 0;
  const Camera cam = test_camera(16, 16);
  for (int t = 0; t < kCases; ++t) {
    const auto gs = random_gaussians(1 + static_cast<int>(rng() % 50), rng);
    const auto splats = project_all(gs, cam);
    const BlendState fast = rasterize(splats, gs.size(), 16, 16);
    const BlendState slow = naive_blend_state(splats, gs.size(), 16, 16);
    if (fast.offsets != slow.offsets) {
      ++bad_ids;
      continue;
    }
    for (std::size_t q = 0; q < fast.contributors.size(); ++q) {
      bad_ids += fast.contributors[q].gaussian != slow.contributors[q].gaussian;
      render_err = std::max(render_err, std::abs(fast.contributors[q].weight - slow.contributors[q].weight));
    }
    const MatX colors = gaussian_colors(gs);
    const FeatureImage a = blend(fast, colors), b = naive_blend(slow, colors);
    for (std::size_t i = 0; i < a.data.size(); ++i) render_err = std::max(render_err, std::abs(a.data[i] - b.data[i]));
  }
  o.detail << " render=" << render_err;
  o.require(render_err <= kTol && bad_ids == 0, "render");

  double miou_err = 0.0;
  int bad_valid = 0;
  for (int t = 0; t < kCases; ++t) {
    const int classes = 2 + static_cast<int>(rng() % 5);
    const LabelMap gt = random_labels(12, 9, classes, rng, 0.2), pred = random_labels(12, 9, classes, rng, 0.1);
    const SegmentationMetrics got = miou_macc(pred, gt, classes), want = oracle_miou(pred, gt, classes);
    bad_valid += got.valid_classes != want.valid_classes;
    miou_err = std::max({miou_err, std::abs(got.miou - want.miou), std::abs(got.macc - want.macc)});
  }
  o.detail << " miou=" << miou_err;
  o.require(miou_err <= kTol && bad_valid == 0, "miou");
  return o;
}

// ---- 3-6: the gate scene -----------------------------------------------

struct VariantResult {
  SegmentationMetrics metrics;
  double purity = 0.0;
};

VariantResult run_variant(const Dataset& trained, const ClusterConfig& s2, const std::string& method,
                          const Stage3Config& s3, const std::string& name) {
  const auto t0 = Clock::now();
  const ClusterModel model = run_stage2(trained.scene, s2, method);
  const double t2 = seconds_since(t0);
  const LanguageField field = run_stage3(trained, model, s3);
  VariantResult r;
  r.metrics = evaluate_semantic(trained, model, field, trained.test_view_indices()).metrics;
  r.purity = cluster_purity(model, trained.anchor_instance, 0.9);
  std::cerr << "  " << name << ": stage2 " << t2 << "s, stage2+3 " << seconds_since(t0) << "s, mIoU " << r.metrics.miou
            << ", mAcc " << r.metrics.macc << ", purity " << r.purity << "\n";
  return r;
}

struct GateResults {
  VariantResult full, coords_only, kmeans;
  double pipeline_seconds = 0.0;
  std::size_t anchors = 0;
};

GateResults run_gate() {
  SyntheticSpec spec;  // 3 objects x 2 parts, 64x64 views, D = 16
  spec.seed = 1;
  PipelineConfig cfg;
  cfg.set_seed(1);
  cfg.stage1.iterations = 2000;
  cfg.stage2.iterations = 1000;
  cfg.stage2.S = 20;
  cfg.stage3.iterations = 500;

  GateResults g;
  const auto t0 = Clock::now();
  Dataset trained = generate_synthetic_scene(spec);
  g.anchors = trained.scene.anchors.size();
  Adam opt;
  train_stage1(trained.scene, prepare_training_views(trained), cfg.stage1, opt);
  std::cerr << "  stage1: " << seconds_since(t0) << "s\n";
  g.full = run_variant(trained, cfg.stage2, "learned", cfg.stage3, "full");
  g.pipeline_seconds = seconds_since(t0);

  ClusterConfig coords = cfg.stage2;
  coords.coords_only = true;
  g.coords_only = run_variant(trained, coords, "learned", cfg.stage3, "coords_only");
  g.kmeans = run_variant(trained, cfg.stage2, "kmeans", cfg.stage3, "kmeans");
  return g;
}

// ---- 7: invariants ------------------------------------------------------

Outcome invariants() {
  Outcome o;
  Rng rng(99);

  double softmax_err = 0.0, min_prob = 1.0;
  std::normal_distribution<double> g(0.0, 30.0);
  for (int t = 0; t < 100; ++t) {
    MatX logits(20, 1 + static_cast<int>(rng() % 5));
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
    const MatX s = softmax_rows(logits);
    for (Eigen::Index i = 0; i < s.rows(); ++i) softmax_err = std::max(softmax_err, std::abs(s.row(i).sum() - 1.0));
    min_prob = std::min(min_prob, s.minCoeff());
  }
  o.detail << " softmax=" << softmax_err;
  o.require(softmax_err <= 1e-12 && min_prob >= 0.0, "softmax rows");

  double conservation = 0.0;
  for (int t = 0; t < 100; ++t) {
    const BlendState st = build_blend_state(random_gaussians(1 + static_cast<int>(rng() % 50), rng), test_camera(16, 16));
    for (std::size_t p = 0; p < st.pixel_count(); ++p) {
      double sum = st.transmittance[p];
      for (std::size_t q = st.offsets[p]; q < st.offsets[p + 1]; ++q) sum += st.contributors[q].weight;
      conservation = std::max(conservation, std::abs(sum - 1.0));
    }
  }
  o.detail << " blend=" << conservation;
  o.require(conservation <= 1e-9, "blend weight conservation");

  // Patches partition the covered pixels and refine every mask.
  int bad_partition = 0;
  for (int t = 0; t < 100; ++t) {
    const MaskSet masks = random_masks(16, 16, 1 + static_cast<int>(rng() % 6), rng);
    const PatchSplit split = decompose_to_patches(masks);
    for (std::size_t p = 0; p < split.patch_map.pixel_count(); ++p) {
      const int id = split.patch_map.ids[p];
      bool covered = false;
      for (std::size_t m = 0; m < masks.masks.size(); ++m) {
        covered |= masks.masks[m](p) != 0;
        const bool in_union = id >= 0 && std::binary_search(split.patch_masksets[id].begin(),
                                                            split.patch_masksets[id].end(), static_cast<int>(m));
        bad_partition += in_union != (masks.masks[m](p) != 0);
      }
      bad_partition += covered != (id >= 0);
    }
    const std::set<std::vector<int>> distinct(split.patch_masksets.begin(), split.patch_masksets.end());
    bad_partition += distinct.size() != split.patch_masksets.size();
  }
  o.detail << " partition_violations=" << bad_partition;
  o.require(bad_partition == 0, "partition/refinement");

  AssociationMap m;
  m.k_nn = 3;
  m.neighbors = {4, 2, 7, 5, 1, 3, 0, 6, 2};
  m.soft.resize(3, 3);
  m.soft << 0.2, 0.5, 0.3, 0.4, 0.2, 0.4, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  int bad_harden = harden(m) != std::vector<int>{2, 3, 0};
  for (int t = 0; t < 100; ++t) {
    const AssociationCase c = random_association(20, 5, 3, rng);
    const auto hard = harden(c.assoc);
    for (std::size_t i = 0; i < hard.size(); ++i) {
      double best = -1.0;
      int best_id = -1;
      for (int s = 0; s < 3; ++s) {
        const double v = c.assoc.soft(i, s);
        const int id = c.assoc.neighbor(i, s);
        if (v > best || (v == best && id < best_id)) best = v, best_id = id;
      }
      bad_harden += hard[i] != best_id;
    }
  }
  o.detail << " harden_mismatch=" << bad_harden;
  o.require(bad_harden == 0, "harden argmax and ties");

  int bad_relevancy = 0;
  for (int t = 0; t < 100; ++t) {
    MatX d = MatX::Random(20, 5);
    for (Eigen::Index j = 0; j < 20; ++j) d.row(j).normalize();
    std::vector<int> labels(20);
    for (int& x : labels) x = static_cast<int>(rng() % 5) - 1;
    const VecX q = VecX::Random(5).normalized();
    const auto r = text_query_3d(q, d, labels, 1 + static_cast<int>(rng() % 6));
    for (double rel : r.relevancy) bad_relevancy += rel < 0.0 || rel > 1.0;
    for (int s : r.selected) bad_relevancy += labels[s] < 0;
  }
  o.detail << " relevancy_violations=" << bad_relevancy;
  o.require(bad_relevancy == 0, "voting relevancy bounds");

  const double lr0 = lr_schedule(0, 2000, 0.01, 0.001), lr1 = lr_schedule(2000, 2000, 0.01, 0.001);
  o.detail << " lr=" << lr0 << "->" << lr1;
  o.require(std::abs(lr0 - 0.01) <= 1e-15 && std::abs(lr1 - 0.001) <= 1e-15, "lr endpoints");
  return o;
}

}  // namespace

int main() {
  set_logging(false);
  int failures = 0;
  report(1, "gradient suite", gradient_suite(), failures);
  report(2, "oracle equivalence", oracle_suite(), failures);

  std::cerr << "gate scene (this takes a few minutes)\n";
  const GateResults g = run_gate();

  Outcome gate;
  gate.detail << " anchors=" << g.anchors << " mIoU=" << g.full.metrics.miou << " mAcc=" << g.full.metrics.macc
              << " runtime=" << g.pipeline_seconds << "s";
  gate.require(g.anchors <= 2000, "anchor budget");
  gate.require(g.full.metrics.miou >= 0.70, "mIoU");
  gate.require(g.full.metrics.macc >= 0.80, "mAcc");
  gate.require(g.pipeline_seconds <= 600.0, "runtime");
  report(3, "gate scene", gate, failures);

  Outcome coords;
  coords.detail << " full=" << g.full.metrics.miou << " coords_only=" << g.coords_only.metrics.miou
                << " gap=" << g.full.metrics.miou - g.coords_only.metrics.miou;
  coords.require(g.full.metrics.miou >= g.coords_only.metrics.miou + 0.15, "gap");
  report(4, "features beat coords-only", coords, failures);

  Outcome km;
  km.detail << " learned=" << g.full.metrics.miou << " kmeans=" << g.kmeans.metrics.miou;
  km.require(g.full.metrics.miou >= g.kmeans.metrics.miou - 0.02, "kmeans margin");
  report(5, "learned vs kmeans", km, failures);

  Outcome purity;
  purity.detail << " pure_fraction=" << g.full.purity;
  purity.require(g.full.purity >= 0.90, "purity");
  report(6, "super-gaussian purity", purity, failures);

  report(7, "invariants", invariants(), failures);
  std::printf("%s: %d of 7 criteria failed\n", failures == 0 ? "PASS" : "FAIL", failures);
  return failures == 0 ? 0 : 1;
}
