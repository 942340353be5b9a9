#include "supergseg/pipeline.hpp"

#include "supergseg/scene_io.hpp"

#include <map>
#include <set>

namespace supergseg {

namespace {

using nlohmann::json;

// Reads `key` into `out` when present.
template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

json stage1_json(const Stage1Config& c) {
  return {{"tau", c.tau},
          {"lambda_decay", c.lambda_decay},
          {"lambda_g", c.lambda_g},
          {"lambda_h", c.lambda_h},
          {"pixels_per_mask", c.pixels_per_mask},
          {"iterations", c.iterations},
          {"lr_initial", c.lr_initial},
          {"lr_final", c.lr_final},
          {"full_enumeration", c.full_enumeration},
          {"seed", c.seed}};
}

Stage1Config stage1_from(const json& j) {
  reject_unknown(j, {"tau", "lambda_decay", "lambda_g", "lambda_h", "pixels_per_mask", "iterations", "lr_initial",
                     "lr_final", "full_enumeration", "seed"},
                 "stage1");
  Stage1Config c;
  read(j, "tau", c.tau);
  read(j, "lambda_decay", c.lambda_decay);
  read(j, "lambda_g", c.lambda_g);
  read(j, "lambda_h", c.lambda_h);
  read(j, "pixels_per_mask", c.pixels_per_mask);
  read(j, "iterations", c.iterations);
  read(j, "lr_initial", c.lr_initial);
  read(j, "lr_final", c.lr_final);
  read(j, "full_enumeration", c.full_enumeration);
  read(j, "seed", c.seed);
  return c;
}

json stage2_json(const ClusterConfig& c) {
  return {{"S", c.S},
          {"k_nn", c.k_nn},
          {"iterations", c.iterations},
          {"knn_refresh_period", c.knn_refresh_period},
          {"w_recon", c.w_recon},
          {"w_compact", c.w_compact},
          {"tau_ins", c.tau_ins},
          {"tau_hier", c.tau_hier},
          {"graph_k", c.graph_k},
          {"lr_initial", c.lr_initial},
          {"lr_final", c.lr_final},
          {"coords_only", c.coords_only},
          {"seed", c.seed}};
}

ClusterConfig stage2_from(const json& j) {
  reject_unknown(j, {"S", "k_nn", "iterations", "knn_refresh_period", "w_recon", "w_compact", "tau_ins", "tau_hier",
                     "graph_k", "lr_initial", "lr_final", "coords_only", "seed"},
                 "stage2");
  ClusterConfig c;
  read(j, "S", c.S);
  read(j, "k_nn", c.k_nn);
  read(j, "iterations", c.iterations);
  read(j, "knn_refresh_period", c.knn_refresh_period);
  read(j, "w_recon", c.w_recon);
  read(j, "w_compact", c.w_compact);
  read(j, "tau_ins", c.tau_ins);
  read(j, "tau_hier", c.tau_hier);
  read(j, "graph_k", c.graph_k);
  read(j, "lr_initial", c.lr_initial);
  read(j, "lr_final", c.lr_final);
  read(j, "coords_only", c.coords_only);
  read(j, "seed", c.seed);
  return c;
}

json stage3_json(const Stage3Config& c) {
  return {{"iterations", c.iterations}, {"lr_initial", c.lr_initial}, {"lr_final", c.lr_final}, {"seed", c.seed}};
}

Stage3Config stage3_from(const json& j) {
  reject_unknown(j, {"iterations", "lr_initial", "lr_final", "seed"}, "stage3");
  Stage3Config c;
  read(j, "iterations", c.iterations);
  read(j, "lr_initial", c.lr_initial);
  read(j, "lr_final", c.lr_final);
  read(j, "seed", c.seed);
  return c;
}

int parse_suffix(const std::string& name, const std::string& prefix) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(name.substr(prefix.size()), &used);
    if (used != name.size() - prefix.size()) throw std::invalid_argument(name);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("malformed ablation variant '" + name + "'");
  }
}

}  // namespace

void PipelineConfig::set_seed(std::uint64_t seed) {
  stage1.seed = seed;
  stage2.seed = seed;
  stage3.seed = seed;
}

void PipelineConfig::validate() const {
  stage1.validate();
  stage2.validate();
  stage3.validate();
  if (cluster_method != "learned" && cluster_method != "kmeans") {
    throw ConfigError("cluster_method must be 'learned' or 'kmeans'");
  }
}

json to_json(const PipelineConfig& cfg) {
  return {{"stage1", stage1_json(cfg.stage1)},
          {"stage2", stage2_json(cfg.stage2)},
          {"stage3", stage3_json(cfg.stage3)},
          {"cluster_method", cfg.cluster_method}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  try {
    reject_unknown(j, {"stage1", "stage2", "stage3", "cluster_method"}, "config");
    PipelineConfig cfg;
    if (j.contains("stage1")) cfg.stage1 = stage1_from(j.at("stage1"));
    if (j.contains("stage2")) cfg.stage2 = stage2_from(j.at("stage2"));
    if (j.contains("stage3")) cfg.stage3 = stage3_from(j.at("stage3"));
    read(j, "cluster_method", cfg.cluster_method);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ClusterModel run_stage2(const Scene& scene, const ClusterConfig& cfg, const std::string& method,
                        const std::function<void(const Stage2StepLog&)>& on_step) {
  if (method == "learned") return train_stage2(scene, cfg, on_step);
  if (method == "kmeans") return cluster_from_kmeans(scene, cfg);
  throw ConfigError("unknown clustering method '" + method + "'");
}

LanguageField run_stage3(const Dataset& dataset, const ClusterModel& model, const Stage3Config& cfg,
                         const std::function<void(const Stage3StepLog&)>& on_step) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ 0x1a9e1a9e1a9eULL);
  LanguageField field = LanguageField::random(model.size(), dataset.vocab.dim(), rng);
  const auto views = prepare_language_views(dataset);
  train_stage3(field, model, views, dataset.scene.config.k_spawn, cfg, on_step);
  return field;
}

SemanticEvaluation evaluate_semantic(const Dataset& dataset, const ClusterModel& model, const LanguageField& field,
                                     const std::vector<int>& views) {
  SemanticEvaluation out;
  const auto gaussians = spawn_all(dataset.scene);
  const auto g_sg = model.gaussian_superg(dataset.scene.config.k_spawn);
  const MatX decoded = decode_language(field, model.supergs);
  ConfusionAccumulator acc(static_cast<int>(dataset.vocab.size()));
  for (int i : views) {
    if (i < 0 || i >= static_cast<int>(dataset.views.size())) throw ContractError("evaluation view out of range");
    const ViewData& v = dataset.views[i];
    const BlendState state = build_blend_state(gaussians, dataset.scene.cameras[v.camera_index]);
    LabelMap pred = semantic_map(dataset.vocab, render_language_map(state, g_sg, decoded));
    acc.add(pred, v.gt_semantic);
    out.views.push_back(i);
    out.predictions.push_back(std::move(pred));
  }
  out.metrics = metrics(acc);
  return out;
}

AblationVariant make_variant(const std::string& name, const PipelineConfig& base) {
  AblationVariant v{name, base};
  if (name == "full") {
  } else if (name == "coords_only_clustering") {
    v.config.stage2.coords_only = true;
  } else if (name == "no_instance_feat") {
    v.config.stage1.lambda_g = 0.0;
  } else if (name == "no_hier_feat") {
    v.config.stage1.lambda_h = 0.0;
  } else if (name == "kmeans") {
    v.config.cluster_method = "kmeans";
  } else if (name.rfind("s=", 0) == 0) {
    v.config.stage2.S = parse_suffix(name, "s=");
  } else if (name.rfind("k_nn=", 0) == 0) {
    v.config.stage2.k_nn = parse_suffix(name, "k_nn=");
  } else {
    throw ConfigError("unknown ablation variant '" + name + "'");
  }
  v.config.validate();
  return v;
}

std::vector<AblationRow> run_ablation(const Dataset& dataset, const std::vector<std::string>& variants,
                                      const PipelineConfig& base) {
  std::vector<AblationVariant> specs;
  for (const auto& name : variants) specs.push_back(make_variant(name, base));
  std::map<std::string, Dataset> stage1_runs;  // keyed by the stage-1 config
  std::vector<AblationRow> rows;
  for (const auto& spec : specs) {
    const std::string key = stage1_json(spec.config.stage1).dump();
    auto it = stage1_runs.find(key);
    if (it == stage1_runs.end()) {
      Dataset trained = dataset;
      Adam opt;
      train_stage1(trained.scene, prepare_training_views(trained), spec.config.stage1, opt);
      it = stage1_runs.emplace(key, std::move(trained)).first;
    }
    const Dataset& trained = it->second;
    spec.config.stage2.validate(trained.scene.anchors.size());
    const ClusterModel model = run_stage2(trained.scene, spec.config.stage2, spec.config.cluster_method);
    const LanguageField field = run_stage3(trained, model, spec.config.stage3);
    AblationRow row;
    row.variant = spec.name;
    row.metrics = evaluate_semantic(trained, model, field, trained.test_view_indices()).metrics;
    row.purity = cluster_purity(model, trained.anchor_instance);
    row.supergs = static_cast<int>(model.size());
    for (const auto& sg : model.supergs) row.orphans += sg.orphan ? 1 : 0;
    rows.push_back(std::move(row));
  }
  return rows;
}

json ablation_report(const std::vector<AblationRow>& rows, const Dataset& dataset) {
  json table = json::array();
  for (const auto& r : rows) {
    json row = to_json(r.metrics, dataset.vocab.labels());
    row["variant"] = r.variant;
    row["purity"] = r.purity;
    row["supergs"] = r.supergs;
    row["orphans"] = r.orphans;
    table.push_back(row);
  }
  return {{"schema", "supergseg-ablation/1"}, {"seed", dataset.seed}, {"rows", table}};
}

Dataset load_trained_dataset(const std::filesystem::path& data_dir, const RunPaths& run) {
  if (!std::filesystem::exists(run.stage1_scene())) {
    throw StageOrderError("stage-1 checkpoint not found at " + run.stage1_scene().string() + "; run train-stage1 first");
  }
  Dataset ds = load_dataset(data_dir);
  Scene trained = load_scene(run.stage1_scene());
  if (trained.anchors.size() != ds.scene.anchors.size() || trained.cameras.size() != ds.scene.cameras.size()) {
    throw IngestionError("stage-1 checkpoint does not belong to this dataset");
  }
  ds.scene = std::move(trained);
  return ds;
}

ClusterModel load_stage2(const RunPaths& run) {
  if (!std::filesystem::exists(run.cluster())) {
    throw StageOrderError("stage-2 checkpoint not found at " + run.cluster().string() + "; run train-stage2 first");
  }
  return load_cluster(run.cluster());
}

Checkpoint load_checkpoint(const std::filesystem::path& data_dir, const RunPaths& run) {
  Checkpoint c;
  c.dataset = load_trained_dataset(data_dir, run);
  c.cluster = load_stage2(run);
  if (c.cluster.assoc.hard.size() != c.dataset.scene.anchors.size()) {
    throw IngestionError("stage-2 checkpoint does not match the scene");
  }
  if (!std::filesystem::exists(run.language())) {
    throw StageOrderError("stage-3 checkpoint not found at " + run.language().string() + "; run train-stage3 first");
  }
  c.language = load_language_field(run.language());
  if (c.language.size() != c.cluster.size() || c.language.dim() != c.dataset.vocab.dim()) {
    throw IngestionError("stage-3 checkpoint does not match the clustering or vocabulary");
  }
  return c;
}

}  // namespace supergseg
