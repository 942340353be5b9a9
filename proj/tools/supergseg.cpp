// Pipeline driver: generate -> train-stage1/2/3 -> render / query-text / eval,
// plus ablate and serve. Exit codes: 0 ok, 1 validation error, 2 runtime failure.
#include "supergseg/binary_io.hpp"
#include "supergseg/pipeline.hpp"
#include "supergseg/scene_io.hpp"
#include "supergseg/service.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace supergseg;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string data, run, out;

  // generate
  SyntheticSpec spec;

  // stage overrides
  std::optional<long> iterations;
  std::optional<double> lambda_g, lambda_h;
  std::optional<int> S, k_nn;
  std::optional<std::string> method;
  bool coords_only = false;
  bool resume = false;

  // render / query / serve / ablate
  int view = 0;
  std::string channel = "color";
  std::string label;
  std::optional<int> query_view;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> variants = {"full", "coords_only_clustering", "kmeans"};
};

PipelineConfig load_config(const Options& o) {
  PipelineConfig cfg;
  if (!o.config_path.empty()) {
    const std::string text = read_file(o.config_path);
    cfg = pipeline_config_from_json(parse_json(text, "config file"));
  }
  if (o.seed) cfg.set_seed(*o.seed);
  if (o.lambda_g) cfg.stage1.lambda_g = *o.lambda_g;
  if (o.lambda_h) cfg.stage1.lambda_h = *o.lambda_h;
  if (o.S) cfg.stage2.S = *o.S;
  if (o.k_nn) cfg.stage2.k_nn = *o.k_nn;
  if (o.method) cfg.cluster_method = *o.method;
  if (o.coords_only) cfg.stage2.coords_only = true;
  cfg.validate();
  return cfg;
}

void write_json(const json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_file(path, j.dump(2) + "\n");
  }
}

int cmd_generate(const Options& o) {
  SyntheticSpec spec = o.spec;
  if (o.seed) spec.seed = *o.seed;
  const Dataset ds = generate_synthetic_scene(spec);
  save_dataset(ds, o.out);
  log_info("wrote " + std::to_string(ds.views.size()) + " views and " + std::to_string(ds.scene.anchors.size()) +
           " anchors to " + o.out);
  return 0;
}

int cmd_train_stage1(const Options& o) {
  PipelineConfig cfg = load_config(o);
  if (o.iterations) cfg.stage1.iterations = *o.iterations;
  cfg.validate();
  const RunPaths run{o.run};
  Dataset ds = load_dataset(o.data);
  Adam opt;
  if (o.resume && fs::exists(run.stage1_scene()) && fs::exists(run.stage1_optimizer())) {
    ds = load_trained_dataset(o.data, run);
    opt = Adam(load_optimizer_state(run.stage1_optimizer()));
    log_info("resuming stage 1 at step " + std::to_string(opt.state().step));
  }
  fs::create_directories(run.stage1_scene().parent_path());
  std::ofstream log(run.stage1_log(), o.resume ? std::ios::app : std::ios::trunc);
  train_stage1(ds.scene, prepare_training_views(ds), cfg.stage1, opt, &log);
  save_scene(ds.scene, run.stage1_scene());
  save_optimizer_state(opt.state(), run.stage1_optimizer());
  log_info("stage 1 done: " + run.stage1_scene().string());
  return 0;
}

int cmd_train_stage2(const Options& o) {
  PipelineConfig cfg = load_config(o);
  if (o.iterations) cfg.stage2.iterations = *o.iterations;
  cfg.validate();
  const RunPaths run{o.run};
  const Dataset ds = load_trained_dataset(o.data, run);
  cfg.stage2.validate(ds.scene.anchors.size());
  const ClusterModel model = run_stage2(ds.scene, cfg.stage2, cfg.cluster_method, [&](const Stage2StepLog& s) {
    if (!o.quiet && s.step % 100 == 0) {
      std::cerr << json{{"step", s.step}, {"recon", s.recon}, {"compact", s.compact}, {"lr", s.lr}}.dump() << '\n';
    }
  });
  fs::create_directories(run.cluster().parent_path());
  save_cluster(model, run.cluster());
  log_info("stage 2 done: " + std::to_string(model.size()) + " Super-Gaussians, " +
           std::to_string(model.instance_count()) + " instances");
  return 0;
}

int cmd_train_stage3(const Options& o) {
  PipelineConfig cfg = load_config(o);
  if (o.iterations) cfg.stage3.iterations = *o.iterations;
  cfg.validate();
  const RunPaths run{o.run};
  const Dataset ds = load_trained_dataset(o.data, run);
  const ClusterModel model = load_stage2(run);
  const LanguageField field = run_stage3(ds, model, cfg.stage3, [&](const Stage3StepLog& s) {
    if (!o.quiet && s.step % 100 == 0) std::cerr << json{{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}}.dump() << '\n';
  });
  fs::create_directories(run.language().parent_path());
  save_language_field(field, run.language());
  log_info("stage 3 done: " + run.language().string());
  return 0;
}

FeatureImage label_preview(const LabelMap& map) {
  FeatureImage img(map.width, map.height, 3);
  for (std::size_t p = 0; p < map.pixel_count(); ++p) {
    const int l = map.ids[p];
    if (l < 0) continue;
    const double h = std::fmod(l * 0.61803398875, 1.0);
    for (int c = 0; c < 3; ++c) img.at(p, c) = 0.5 + 0.5 * std::cos(2.0 * M_PI * (h + c / 3.0));
  }
  return img;
}

int cmd_render(const Options& o) {
  const RunPaths run{o.run};
  const Dataset ds = load_trained_dataset(o.data, run);
  if (o.view < 0 || o.view >= static_cast<int>(ds.views.size())) throw ConfigError("--view out of range");
  const Camera& cam = ds.scene.cameras[ds.views[o.view].camera_index];
  FeatureImage image;
  if (o.channel == "color" || o.channel == "instance" || o.channel == "hier") {
    ChannelSpec spec;
    spec.instance = o.channel == "instance";
    spec.hier = o.channel == "hier";
    image = render(ds.scene, cam, spec).images.at(o.channel);
  } else if (o.channel == "language" || o.channel == "semantic") {
    const ClusterModel model = load_stage2(run);
    if (!fs::exists(run.language())) throw StageOrderError("stage-3 checkpoint missing; run train-stage3 first");
    const LanguageField field = load_language_field(run.language());
    const BlendState state = build_blend_state(spawn_all(ds.scene), cam);
    image = render_language_map(state, model.gaussian_superg(ds.scene.config.k_spawn),
                                decode_language(field, model.supergs));
    if (o.channel == "semantic") image = label_preview(semantic_map(ds.vocab, image));
  } else {
    throw ConfigError("--channel must be color, instance, hier, language or semantic");
  }
  if (fs::path(o.out).extension() == ".sgfi") {
    write_feature_image(image, o.out);
  } else {
    write_ppm(image.channels == 3 ? image : feature_preview(image), o.out);
  }
  return 0;
}

int cmd_query_text(const Options& o) {
  const QueryService service(load_checkpoint(o.data, RunPaths{o.run}));
  json body = {{"label", o.label}};
  if (o.query_view) body["view"] = *o.query_view;
  const ServiceResponse r = service.text(body.dump());
  if (r.status != 200) throw ConfigError(json::parse(r.body).at("error").get<std::string>());
  write_json(json::parse(r.body), o.out);
  return 0;
}

int cmd_eval(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(o.data, RunPaths{o.run});
  const Dataset& ds = ckpt.dataset;
  const SemanticEvaluation sem = evaluate_semantic(ds, ckpt.cluster, ckpt.language, ds.test_view_indices());

  // Object selection: text query of each object's label against that object's mask.
  const QueryService service(ckpt);
  std::vector<Bitmap> predicted;
  std::vector<std::optional<Bitmap>> truth;
  for (int vi : ds.test_view_indices()) {
    const ViewData& v = ds.views[vi];
    for (int obj = 0; obj < ds.object_count(); ++obj) {
      const json r = json::parse(service.text(json{{"label", ds.object_labels[obj]}, {"view", v.id}}.dump()).body);
      Bitmap pred(v.gt_instance.width, v.gt_instance.height);
      pred.bits = decode_rle(r.at("mask_rle").at("runs").get<std::vector<std::uint32_t>>(), pred.bits.size());
      Bitmap gt(v.gt_instance.width, v.gt_instance.height);
      for (std::size_t p = 0; p < gt.bits.size(); ++p) gt.bits[p] = v.gt_instance.ids[p] == obj;
      predicted.push_back(std::move(pred));
      truth.push_back(gt.area() > 0 ? std::optional<Bitmap>(std::move(gt)) : std::nullopt);
    }
  }
  const SelectionMetrics sel = object_selection_eval(predicted, truth);
  const json report = {{"schema", "supergseg-eval/1"},
                       {"semantic", to_json(sem.metrics, ds.vocab.labels())},
                       {"views", sem.views},
                       {"object_selection",
                        {{"miou", sel.miou}, {"accuracy", sel.accuracy}, {"iou", sel.iou}, {"skipped", sel.skipped}}},
                       {"purity", cluster_purity(ckpt.cluster, ds.anchor_instance)}};
  write_json(report, o.out);
  return 0;
}

int cmd_ablate(const Options& o) {
  const PipelineConfig cfg = load_config(o);
  const Dataset ds = load_dataset(o.data);
  const auto rows = run_ablation(ds, o.variants, cfg);
  write_json(ablation_report(rows, ds), o.out);
  return 0;
}

int cmd_serve(const Options& o) {
  const QueryService service(load_checkpoint(o.data, RunPaths{o.run}));
  serve(service, o.host, o.port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SuperGSeg desk-scale pipeline"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file; flags override it");
    sub->add_option("--seed", o.seed, "seed for every stage");
    sub->add_flag("--quiet", o.quiet, "suppress progress output");
  };
  const auto needs_run = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "dataset directory")->required();
    sub->add_option("--run", o.run, "run directory holding stage checkpoints")->required();
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  common(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--objects", o.spec.objects);
  gen->add_option("--parts", o.spec.parts_per_object);
  gen->add_option("--anchors-per-part", o.spec.anchors_per_part);
  gen->add_option("--image-size", o.spec.image_size);
  gen->add_option("--train-views", o.spec.train_views);
  gen->add_option("--test-views", o.spec.test_views);
  gen->add_option("--language-dim", o.spec.language_dim);
  gen->add_option("--k-spawn", o.spec.k_spawn);

  auto* s1 = app.add_subcommand("train-stage1", "train decoders and segmentation features");
  common(s1);
  needs_run(s1);
  s1->add_option("--iterations", o.iterations);
  s1->add_option("--lambda-g", o.lambda_g);
  s1->add_option("--lambda-h", o.lambda_h);
  s1->add_flag("--resume", o.resume, "continue from the saved optimizer state");

  auto* s2 = app.add_subcommand("train-stage2", "cluster anchors into Super-Gaussians");
  common(s2);
  needs_run(s2);
  s2->add_option("--iterations", o.iterations);
  s2->add_option("--S", o.S, "number of Super-Gaussians");
  s2->add_option("--k-nn", o.k_nn);
  s2->add_option("--method", o.method, "learned | kmeans");
  s2->add_flag("--coords-only", o.coords_only, "associate on positions only");

  auto* s3 = app.add_subcommand("train-stage3", "distill the language field");
  common(s3);
  needs_run(s3);
  s3->add_option("--iterations", o.iterations);

  auto* rnd = app.add_subcommand("render", "render one view to PPM or SGFI");
  common(rnd);
  needs_run(rnd);
  rnd->add_option("--view", o.view)->required();
  rnd->add_option("--channel", o.channel, "color | instance | hier | language | semantic");
  rnd->add_option("--out", o.out, "output .ppm or .sgfi")->required();

  auto* qt = app.add_subcommand("query-text", "text query through instance voting");
  common(qt);
  needs_run(qt);
  qt->add_option("--label", o.label)->required();
  qt->add_option("--view", o.query_view, "view for the returned mask");
  qt->add_option("--out", o.out, "write JSON here instead of stdout");

  auto* ev = app.add_subcommand("eval", "score held-out views");
  common(ev);
  needs_run(ev);
  ev->add_option("--out", o.out, "write the JSON report here instead of stdout");

  auto* ab = app.add_subcommand("ablate", "train and score ablation variants");
  common(ab);
  ab->add_option("--data", o.data, "dataset directory")->required();
  ab->add_option("--variants", o.variants, "variant names")->delimiter(',');
  ab->add_option("--out", o.out, "write the JSON report here instead of stdout");
  ab->add_option("--S", o.S);
  ab->add_option("--k-nn", o.k_nn);

  auto* sv = app.add_subcommand("serve", "HTTP query service");
  common(sv);
  needs_run(sv);
  sv->add_option("--host", o.host);
  sv->add_option("--port", o.port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  set_logging(!o.quiet);
  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "generate") return cmd_generate(o);
    if (cmd == "train-stage1") return cmd_train_stage1(o);
    if (cmd == "train-stage2") return cmd_train_stage2(o);
    if (cmd == "train-stage3") return cmd_train_stage3(o);
    if (cmd == "render") return cmd_render(o);
    if (cmd == "query-text") return cmd_query_text(o);
    if (cmd == "eval") return cmd_eval(o);
    if (cmd == "ablate") return cmd_ablate(o);
    if (cmd == "serve") return cmd_serve(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const StageOrderError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
