#pragma once

#include "supergseg/losses.hpp"
#include "supergseg/masks.hpp"
#include "supergseg/optim.hpp"
#include "supergseg/raster.hpp"
#include "supergseg/scene.hpp"
#include "supergseg/synthetic.hpp"

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace supergseg {

struct Stage1Config {
  double tau = 0.1;
  double lambda_decay = 0.5;
  double lambda_g = 1.0;
  double lambda_h = 1.0;
  int pixels_per_mask = 256;
  long iterations = 2000;
  double lr_initial = 0.01;
  double lr_final = 0.001;
  bool full_enumeration = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// A view prepared for training. Geometry is frozen, so the blend state is
/// computed once and replayed for every step.
struct TrainingView {
  int camera_index = 0;
  FeatureImage rgb;
  PatchDecomposition decomposition;
  BlendState state;
};

TrainingView prepare_training_view(const Scene& scene, int camera_index, const FeatureImage& rgb, const MaskSet& masks);
std::vector<TrainingView> prepare_training_views(const Dataset& dataset);

/// Gradients of the stage-1 objective with respect to the trainable
/// parameters: colour/instance/hier decoders and the anchor f_s rows.
struct Stage1Gradients {
  MlpGradient color;
  MlpGradient instance;
  MlpGradient hier;
  MatX f_s;  // anchors x 32
};

struct Stage1Evaluation {
  double l_c = 0.0;
  double l_g = 0.0;
  double l_h = 0.0;
  double total = 0.0;
  Stage1Gradients grad;
  ContrastiveStats instance_stats;
  ContrastiveStats hier_stats;
  std::vector<std::string> notices;
};

/// Loss and gradients for one view. `sample_seed` drives pixel sampling; the
/// optional stats replay stop-gradient quantities from an earlier evaluation.
Stage1Evaluation evaluate_stage1(const Scene& scene, const TrainingView& view, const Stage1Config& cfg,
                                 std::uint64_t sample_seed, const ContrastiveStats* instance_stats = nullptr,
                                 const ContrastiveStats* hier_stats = nullptr);

struct Stage1StepResult {
  long step = 0;
  double l_c = 0.0;
  double l_g = 0.0;
  double l_h = 0.0;
  double total = 0.0;
  double lr = 0.0;
  bool applied = false;
  std::string notice;  // set when the step was aborted
};

/// One optimisation step on one view. A non-finite loss term aborts the step
/// without touching any parameter.
Stage1StepResult stage1_step(Scene& scene, const TrainingView& view, const Stage1Config& cfg, Adam& opt, long step);

/// JSON line {step, l_c, l_g, l_h, lr}.
std::string stage1_log_line(const Stage1StepResult& r);

/// Cycles through the views (one per step) for cfg.iterations steps, starting
/// from the optimizer's step counter.
void train_stage1(Scene& scene, const std::vector<TrainingView>& views, const Stage1Config& cfg, Adam& opt,
                  std::ostream* log = nullptr, const std::function<void(const Stage1StepResult&)>& on_step = {});

}  // namespace supergseg
