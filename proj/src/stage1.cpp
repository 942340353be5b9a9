#include "supergseg/stage1.hpp"

#include <json.hpp>

#include <cmath>

namespace supergseg {

namespace {

std::uint64_t step_seed(std::uint64_t seed, long step) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(step + 1);
  x ^= x >> 31;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 29;
  return x;
}

// N x (C*k) row-major and (N*k) x C row-major share one memory layout.
MatX per_gaussian(const MatX& per_anchor, int channels) {
  return Eigen::Map<const MatX>(per_anchor.data(), per_anchor.size() / channels, channels);
}

MatX per_anchor(const MatX& per_gaussian_rows, Eigen::Index anchors) {
  return Eigen::Map<const MatX>(per_gaussian_rows.data(), anchors, per_gaussian_rows.size() / anchors);
}

}  // namespace

void Stage1Config::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(lambda_decay > 0.0 && lambda_decay <= 1.0)) throw ConfigError("lambda_decay must be in (0, 1]");
  if (lambda_g < 0.0 || lambda_h < 0.0) throw ConfigError("loss weights must be non-negative");
  if (pixels_per_mask < 2) throw ConfigError("pixels_per_mask must be at least 2");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning rates must be positive");
}

TrainingView prepare_training_view(const Scene& scene, int camera_index, const FeatureImage& rgb, const MaskSet& masks) {
  if (camera_index < 0 || camera_index >= static_cast<int>(scene.cameras.size())) {
    throw ContractError("training view references a missing camera");
  }
  TrainingView v;
  v.camera_index = camera_index;
  v.rgb = rgb;
  v.decomposition = build_decomposition(masks);
  v.state = build_blend_state(spawn_all(scene), scene.cameras[camera_index]);
  if (rgb.width != v.state.width || rgb.height != v.state.height || rgb.channels != 3) {
    throw ContractError("training image does not match its camera");
  }
  return v;
}

std::vector<TrainingView> prepare_training_views(const Dataset& dataset) {
  std::vector<TrainingView> out;
  const auto gaussians = spawn_all(dataset.scene);
  for (int i : dataset.train_view_indices()) {
    const ViewData& v = dataset.views[i];
    TrainingView t;
    t.camera_index = v.camera_index;
    t.rgb = v.rgb;
    t.decomposition = build_decomposition(v.masks);
    t.state = build_blend_state(gaussians, dataset.scene.cameras[v.camera_index]);
    out.push_back(std::move(t));
  }
  return out;
}

Stage1Evaluation evaluate_stage1(const Scene& scene, const TrainingView& view, const Stage1Config& cfg,
                                 std::uint64_t sample_seed, const ContrastiveStats* instance_stats,
                                 const ContrastiveStats* hier_stats) {
  cfg.validate();
  const DecoderSet& d = scene.decoders;
  const Eigen::Index n = static_cast<Eigen::Index>(scene.anchors.size());
  if (view.state.gaussian_count != scene.gaussian_count()) {
    throw ContractError("blend state was built for a different scene");
  }
  Stage1Evaluation ev;
  ev.grad.color = d.color.make_gradient();
  ev.grad.instance = d.instance.make_gradient();
  ev.grad.hier = d.hier.make_gradient();
  ev.grad.f_s = MatX::Zero(n, kAnchorFeatureDim);
  if (n == 0) return ev;

  const MatX geo = geometry_inputs(scene.anchors);
  const MatX seg = segmentation_inputs(scene.anchors);

  // colour
  TinyMLP::Tape color_tape;
  const MatX color_pre = d.color.forward(geo, color_tape);
  const MatX color = color_pre.unaryExpr([](double v) { return sigmoid(v); });
  const FeatureImage rendered = blend(view.state, per_gaussian(color, 3));
  LossResult lc = rgb_l1(rendered, view.rgb);
  ev.l_c = lc.value;
  {
    const MatX d_color = per_anchor(blend_gradient(view.state, lc.grad), n);
    const MatX d_pre = d_color.cwiseProduct(color.cwiseProduct((1.0 - color.array()).matrix()));
    d.color.backward(color_tape, d_pre, ev.grad.color);
  }

  ContrastiveOptions copt;
  copt.tau = cfg.tau;
  copt.lambda_decay = cfg.lambda_decay;
  copt.pixels_per_mask = cfg.pixels_per_mask;
  copt.full_enumeration = cfg.full_enumeration;
  copt.seed = sample_seed;

  MatX d_seg = MatX::Zero(n, seg.cols());
  if (cfg.lambda_g > 0.0) {
    TinyMLP::Tape tape;
    const MatX g = d.instance.forward(seg, tape);
    const FeatureImage g_map = blend(view.state, per_gaussian(g, kInstanceDim));
    copt.frozen = instance_stats;
    LossResult lg = instance_loss(g_map, view.decomposition.instance_map, copt);
    if (lg.skipped) ev.notices.push_back(lg.notice);
    ev.l_g = lg.value;
    ev.instance_stats = std::move(lg.stats);
    if (!lg.skipped) {
      for (double& v : lg.grad.data) v *= cfg.lambda_g;
      d_seg += d.instance.backward(tape, per_anchor(blend_gradient(view.state, lg.grad), n), ev.grad.instance);
    }
  }
  if (cfg.lambda_h > 0.0) {
    TinyMLP::Tape tape;
    const MatX h = d.hier.forward(seg, tape);
    const FeatureImage h_map = blend(view.state, per_gaussian(h, kHierDim));
    copt.frozen = hier_stats;
    LossResult lh = hierarchical_loss(h_map, view.decomposition, copt);
    ev.l_h = lh.value;
    ev.hier_stats = std::move(lh.stats);
    for (double& v : lh.grad.data) v *= cfg.lambda_h;
    d_seg += d.hier.backward(tape, per_anchor(blend_gradient(view.state, lh.grad), n), ev.grad.hier);
  }
  ev.grad.f_s = d_seg.leftCols(kAnchorFeatureDim);
  ev.total = ev.l_c + cfg.lambda_g * ev.l_g + cfg.lambda_h * ev.l_h;
  return ev;
}

Stage1StepResult stage1_step(Scene& scene, const TrainingView& view, const Stage1Config& cfg, Adam& opt, long step) {
  Stage1StepResult r;
  r.step = step;
  r.lr = lr_schedule(std::min(step, cfg.iterations), cfg.iterations, cfg.lr_initial, cfg.lr_final);
  Stage1Evaluation ev = evaluate_stage1(scene, view, cfg, step_seed(cfg.seed, step));
  r.l_c = ev.l_c;
  r.l_g = ev.l_g;
  r.l_h = ev.l_h;
  r.total = ev.total;
  for (const auto& [name, v] : {std::pair{"l_c", ev.l_c}, std::pair{"l_g", ev.l_g}, std::pair{"l_h", ev.l_h}}) {
    if (!std::isfinite(v)) {
      r.notice = std::string("step aborted: non-finite ") + name;
      return r;
    }
  }

  DecoderSet& d = scene.decoders;
  std::vector<double> color = d.color.parameters(), inst = d.instance.parameters(), hier = d.hier.parameters();
  const std::vector<double> g_color = ev.grad.color.flatten(), g_inst = ev.grad.instance.flatten(),
                            g_hier = ev.grad.hier.flatten();
  const std::size_t n = scene.anchors.size();
  std::vector<double> fs(n * kAnchorFeatureDim);
  for (std::size_t a = 0; a < n; ++a) {
    std::copy(scene.anchors[a].f_s.data(), scene.anchors[a].f_s.data() + kAnchorFeatureDim, fs.data() + a * kAnchorFeatureDim);
  }
  std::vector<ParamBlock> blocks = {{"decoder.color", color, g_color},
                                    {"decoder.instance", inst, g_inst},
                                    {"decoder.hier", hier, g_hier},
                                    {"anchors.f_s", fs, std::span<const double>(ev.grad.f_s.data(), ev.grad.f_s.size())}};
  if (!opt.step(blocks, r.lr)) {
    r.notice = "step aborted: non-finite gradient";
    return r;
  }
  d.color.set_parameters(color);
  d.instance.set_parameters(inst);
  d.hier.set_parameters(hier);
  for (std::size_t a = 0; a < n; ++a) {
    scene.anchors[a].f_s = Eigen::Map<const VecX>(fs.data() + a * kAnchorFeatureDim, kAnchorFeatureDim);
  }
  r.applied = true;
  return r;
}

std::string stage1_log_line(const Stage1StepResult& r) {
  nlohmann::json j = {{"step", r.step}, {"l_c", r.l_c}, {"l_g", r.l_g}, {"l_h", r.l_h}, {"lr", r.lr}};
  if (!r.applied) j["notice"] = r.notice;
  return j.dump();
}

void train_stage1(Scene& scene, const std::vector<TrainingView>& views, const Stage1Config& cfg, Adam& opt,
                  std::ostream* log, const std::function<void(const Stage1StepResult&)>& on_step) {
  cfg.validate();
  if (views.empty()) throw ContractError("stage 1 needs at least one training view");
  for (long step = opt.state().step; step < cfg.iterations; ++step) {
    const TrainingView& view = views[static_cast<std::size_t>(step) % views.size()];
    const Stage1StepResult r = stage1_step(scene, view, cfg, opt, step);
    if (log) *log << stage1_log_line(r) << '\n';
    if (on_step) on_step(r);
  }
}

}  // namespace supergseg
