#pragma once

#include "supergseg/evaluation.hpp"
#include "supergseg/language.hpp"
#include "supergseg/stage1.hpp"
#include "supergseg/supergaussian.hpp"
#include "supergseg/synthetic.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace supergseg {

/// All training knobs in one JSON document. Missing keys keep defaults;
/// unknown keys are rejected.
struct PipelineConfig {
  Stage1Config stage1;
  ClusterConfig stage2;
  Stage3Config stage3;
  std::string cluster_method = "learned";  // learned | kmeans

  /// Sets every stage seed from one value.
  void set_seed(std::uint64_t seed);
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

ClusterModel run_stage2(const Scene& scene, const ClusterConfig& cfg, const std::string& method,
                        const std::function<void(const Stage2StepLog&)>& on_step = {});

/// Fresh language field trained against the dataset's training views.
LanguageField run_stage3(const Dataset& dataset, const ClusterModel& model, const Stage3Config& cfg,
                         const std::function<void(const Stage3StepLog&)>& on_step = {});

struct SemanticEvaluation {
  SegmentationMetrics metrics;
  std::vector<int> views;
  std::vector<LabelMap> predictions;
};

/// Semantic maps of the given views scored against their ground truth.
SemanticEvaluation evaluate_semantic(const Dataset& dataset, const ClusterModel& model, const LanguageField& field,
                                     const std::vector<int>& views);

/// Variant names: full, coords_only_clustering, no_instance_feat, no_hier_feat,
/// kmeans, s=<n>, k_nn=<n>.
struct AblationVariant {
  std::string name;
  PipelineConfig config;
};
AblationVariant make_variant(const std::string& name, const PipelineConfig& base);

struct AblationRow {
  std::string variant;
  SegmentationMetrics metrics;
  double purity = 0.0;
  int supergs = 0;
  int orphans = 0;
};

/// Trains each variant from the untrained dataset scene and scores held-out
/// views. Variants sharing stage-1 settings share one stage-1 run.
std::vector<AblationRow> run_ablation(const Dataset& dataset, const std::vector<std::string>& variants,
                                      const PipelineConfig& base);
nlohmann::json ablation_report(const std::vector<AblationRow>& rows, const Dataset& dataset);

/// Files of one training run, next to (not inside) the dataset directory.
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path stage1_scene() const { return dir / "stage1" / "scene.json"; }
  std::filesystem::path stage1_optimizer() const { return dir / "stage1" / "optimizer.json"; }
  std::filesystem::path stage1_log() const { return dir / "stage1" / "log.jsonl"; }
  std::filesystem::path cluster() const { return dir / "stage2" / "cluster.json"; }
  std::filesystem::path language() const { return dir / "stage3" / "language.json"; }
};

/// The dataset with its scene replaced by the stage-1 result; StageOrderError
/// if stage 1 has not been run.
Dataset load_trained_dataset(const std::filesystem::path& data_dir, const RunPaths& run);
ClusterModel load_stage2(const RunPaths& run);

struct Checkpoint {
  Dataset dataset;
  ClusterModel cluster;
  LanguageField language;
};

/// Everything a finished run produced; StageOrderError names the first
/// missing stage.
Checkpoint load_checkpoint(const std::filesystem::path& data_dir, const RunPaths& run);

}  // namespace supergseg
