#include "supergseg/synthetic.hpp"

#include "supergseg/binary_io.hpp"
#include "supergseg/scene_io.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace supergseg {

using nlohmann::json;

namespace {

constexpr std::string_view kDatasetSchema = "supergseg-dataset/1";

const std::vector<std::string> kObjectNames = {"teapot", "lamp", "cactus", "book", "clock", "vase", "mug", "shoe"};
constexpr int kDistractorLabels = 2;

struct Box {
  Vec3 center;
  Vec3 half;
};

// Part colour: hues spread so that neighbouring parts differ strongly.
Vec3 part_color(int part) {
  const double h = std::fmod(part * 0.61803398875, 1.0) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double v = 0.9, s = 0.75;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double box_surface_distance(const Box& b, const Vec3& x) {
  const Vec3 d = (x - b.center).cwiseAbs();
  return (b.half - d).minCoeff();
}

std::string view_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "views/view_%03d", id);
  return buf;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

void SyntheticSpec::validate() const {
  if (objects < 1 || parts_per_object < 2) throw ConfigError("need at least one object with two parts");
  if (anchors_per_part < 1) throw ConfigError("anchors_per_part must be positive");
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (train_views < 1 || test_views < 0) throw ConfigError("need at least one training view");
  if (k_spawn < 1) throw ConfigError("k_spawn must be positive");
  if (language_dim < objects + kDistractorLabels) throw ConfigError("language_dim too small for the vocabulary");
  if (!(object_radius > 0.0) || !(object_spacing > 0.0)) throw ConfigError("object size and spacing must be positive");
  if (static_cast<long>(objects) * parts_per_object > static_cast<long>(image_size) * image_size) {
    throw GenerationError("more parts requested than pixels per view");
  }
}

std::vector<int> Dataset::train_view_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].train) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> Dataset::test_view_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!views[i].train) out.push_back(static_cast<int>(i));
  }
  return out;
}

LabelMap coverage_labels(const BlendState& state, const std::vector<int>& gaussian_label, int label_count) {
  LabelMap out(state.width, state.height, -1);
  std::vector<double> w(label_count);
  for (std::size_t p = 0; p < state.pixel_count(); ++p) {
    std::fill(w.begin(), w.end(), 0.0);
    double total = 0.0;
    for (const auto& c : state.pixel(p)) {
      const int l = gaussian_label[c.gaussian];
      if (l < 0) continue;
      w[l] += c.weight;
      total += c.weight;
    }
    if (total < 0.5) continue;
    out.ids[p] = static_cast<int>(std::max_element(w.begin(), w.end()) - w.begin());
  }
  return out;
}

Dataset generate_synthetic_scene(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int n_obj = spec.objects;
  const int n_parts = spec.parts_per_object;
  const int total_parts = n_obj * n_parts;

  // Objects in a row along x; each is a stack of boxes along z.
  std::vector<Box> boxes;
  const double r = spec.object_radius;
  for (int o = 0; o < n_obj; ++o) {
    const double cx = (o - 0.5 * (n_obj - 1)) * spec.object_spacing;
    double z = 0.0;
    for (int j = 0; j < n_parts; ++j) {
      const double height = r * (j == 0 ? 0.9 : 0.65) * (0.9 + 0.2 * uni(rng));
      const double depth = r * (1.0 - 0.15 * j) * (0.9 + 0.2 * uni(rng));
      boxes.push_back({Vec3(cx, 0.0, z + 0.5 * height), Vec3(0.5 * spec.object_spacing, depth, 0.5 * height)});
      z += height;
    }
  }

  Dataset ds;
  ds.seed = spec.seed;
  ds.scene.config.k_spawn = spec.k_spawn;

  // Geometry features: colour embedded by a fixed random projection plus noise.
  MatX basis(kAnchorFeatureDim, 3);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = normal(rng);
  std::vector<Vec3> colors(total_parts);
  for (int p = 0; p < total_parts; ++p) colors[p] = part_color(p);

  // Anchors sit in a shell under each part's surface, including faces pressed
  // against a neighbour.
  for (int p = 0; p < total_parts; ++p) {
    const Box& b = boxes[p];
    const double volume = 8.0 * b.half.prod();
    const double spacing = std::cbrt(volume / spec.anchors_per_part);
    const double shell = std::min(0.35 * b.half.minCoeff(), 1.5 * spacing);
    for (int n = 0; n < spec.anchors_per_part;) {
      Vec3 x;
      for (int c = 0; c < 3; ++c) x[c] = b.center[c] + b.half[c] * (2.0 * uni(rng) - 1.0);
      if (box_surface_distance(b, x) > shell) continue;
      Anchor a;
      a.id = static_cast<int>(ds.scene.anchors.size());
      a.position = x;
      a.scale = 0.6 * spacing;
      a.f_g = basis * (2.0 * colors[p] - Vec3::Ones());
      for (int c = 0; c < kAnchorFeatureDim; ++c) {
        a.f_g[c] += 0.15 * normal(rng);
        a.f_s[c] = 0.1 * normal(rng);
      }
      a.offsets.resize(spec.k_spawn);
      for (auto& o : a.offsets) o = Vec3(0.5 * normal(rng), 0.5 * normal(rng), 0.5 * normal(rng));
      ds.scene.anchors.push_back(std::move(a));
      ds.anchor_instance.push_back(p / n_parts);
      ds.anchor_part.push_back(p);
      ++n;
    }
  }

  // Geometry decoders: near-constant outputs so splats are similar in size and opacity.
  double mean_scale = 0.0;
  for (const auto& a : ds.scene.anchors) mean_scale += a.scale;
  mean_scale /= static_cast<double>(ds.scene.anchors.size());
  ds.scene.decoders = DecoderSet::random(spec.k_spawn, rng);
  auto damp = [](TinyMLP& mlp, double factor) { mlp.layers().back().weight *= factor; };
  damp(ds.scene.decoders.opacity, 0.02);
  ds.scene.decoders.opacity.layers().back().bias.setConstant(logit(0.8));
  damp(ds.scene.decoders.scale, 0.02);
  ds.scene.decoders.scale.layers().back().bias.setConstant(std::log(0.9 * mean_scale));
  damp(ds.scene.decoders.rotation, 0.2);
  for (int i = 0; i < spec.k_spawn; ++i) ds.scene.decoders.rotation.layers().back().bias[4 * i] = 1.0;
  damp(ds.scene.decoders.color, 0.3);

  // Cameras orbit the scene centre.
  double top = 0.0;
  for (const auto& b : boxes) top = std::max(top, b.center.z() + b.half.z());
  const Vec3 target(0.0, 0.0, 0.5 * top);
  double extent = 0.0;
  for (const auto& a : ds.scene.anchors) extent = std::max(extent, (a.position - target).norm());
  const double radius = 4.0 * extent;
  const int w = spec.image_size;
  const double focal = 0.5 * w * radius / (1.15 * extent);
  const double pi = std::numbers::pi;
  auto orbit = [&](double azimuth, double elevation) {
    const Vec3 eye = target + radius * Vec3(std::cos(elevation) * std::cos(azimuth),
                                            std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
    return Camera::look_at(eye, target, Vec3(0, 0, 1), focal, w, w);
  };
  std::vector<bool> is_train;
  for (int i = 0; i < spec.train_views; ++i) {
    ds.scene.cameras.push_back(orbit(2.0 * pi * i / spec.train_views + 0.3, (i % 2 == 0 ? 35.0 : 50.0) * pi / 180.0));
    is_train.push_back(true);
  }
  for (int i = 0; i < spec.test_views; ++i) {
    ds.scene.cameras.push_back(orbit(2.0 * pi * (i + 0.37) / spec.test_views + 0.3, 42.0 * pi / 180.0));
    is_train.push_back(false);
  }

  // Vocabulary: one label per object plus unused distractors.
  std::vector<std::string> labels;
  for (int o = 0; o < n_obj + kDistractorLabels; ++o) {
    labels.push_back(o < static_cast<int>(kObjectNames.size()) ? kObjectNames[o] : "object_" + std::to_string(o));
  }
  ds.object_labels.assign(labels.begin(), labels.begin() + n_obj);
  ds.vocab = EmbeddingVocabulary::orthogonal(spec.language_dim, labels, rng);

  // Ground truth: render the true part colours and labels.
  std::vector<NeuralGaussian> gaussians = spawn_all(ds.scene);
  const int k = spec.k_spawn;
  std::vector<int> g_instance(gaussians.size()), g_part(gaussians.size());
  for (std::size_t g = 0; g < gaussians.size(); ++g) {
    const int a = static_cast<int>(g) / k;
    g_instance[g] = ds.anchor_instance[a];
    g_part[g] = ds.anchor_part[a];
    gaussians[g].color = colors[g_part[g]];
  }
  const MatX true_colors = gaussian_colors(gaussians);
  std::vector<int> object_class(n_obj);
  for (int o = 0; o < n_obj; ++o) object_class[o] = *ds.vocab.index_of(ds.object_labels[o]);

  for (std::size_t v = 0; v < ds.scene.cameras.size(); ++v) {
    const Camera& cam = ds.scene.cameras[v];
    const BlendState state = build_blend_state(gaussians, cam);
    ViewData view;
    view.id = static_cast<int>(v);
    view.camera_index = static_cast<int>(v);
    view.train = is_train[v];
    view.rgb = blend(state, true_colors);
    view.gt_instance = coverage_labels(state, g_instance, n_obj);
    // Part label: the strongest part of the winning object.
    view.gt_part = LabelMap(w, w, -1);
    {
      std::vector<double> pw(total_parts);
      for (std::size_t p = 0; p < state.pixel_count(); ++p) {
        const int obj = view.gt_instance.ids[p];
        if (obj < 0) continue;
        std::fill(pw.begin(), pw.end(), 0.0);
        for (const auto& c : state.pixel(p)) pw[g_part[c.gaussian]] += c.weight;
        const auto first = pw.begin() + obj * n_parts;
        view.gt_part.ids[p] = static_cast<int>(std::max_element(first, first + n_parts) - pw.begin());
      }
    }
    view.gt_semantic = LabelMap(w, w, -1);
    for (std::size_t p = 0; p < view.gt_instance.pixel_count(); ++p) {
      if (view.gt_instance.ids[p] >= 0) view.gt_semantic.ids[p] = object_class[view.gt_instance.ids[p]];
    }

    // Masks: whole objects (with embeddings) first, then parts.
    view.masks.view_id = view.id;
    view.masks.width = w;
    view.masks.height = w;
    auto add_mask = [&](const LabelMap& labels_map, int label, std::optional<VecX> embedding) {
      Bitmap m(w, w);
      for (std::size_t p = 0; p < labels_map.pixel_count(); ++p) m.bits[p] = labels_map.ids[p] == label ? 1 : 0;
      if (m.area() == 0) return;
      view.masks.masks.push_back(std::move(m));
      view.mask_embeddings.push_back(std::move(embedding));
    };
    for (int o = 0; o < n_obj; ++o) add_mask(view.gt_instance, o, ds.vocab.vector(object_class[o]));
    for (int p = 0; p < total_parts; ++p) add_mask(view.gt_part, p, std::nullopt);
    if (view.masks.masks.empty()) throw GenerationError("view " + std::to_string(v) + " sees no object");
    ds.views.push_back(std::move(view));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  save_scene(ds.scene, dir / "scene.json");
  save_vocabulary(ds.vocab, dir / "vocab.json");
  json j;
  j["schema"] = kDatasetSchema;
  j["seed"] = ds.seed;
  j["object_labels"] = ds.object_labels;
  j["anchor_instance"] = ds.anchor_instance;
  j["anchor_part"] = ds.anchor_part;
  j["views"] = json::array();
  for (const auto& v : ds.views) {
    const std::string stem = view_stem(v.id);
    write_feature_image(v.rgb, dir / (stem + ".rgb.sgfi"));
    write_mask_set(v.masks, dir / (stem + ".sgmk"));
    write_label_map(v.gt_instance, "SGIM", dir / (stem + ".gt_instance.sgim"));
    write_label_map(v.gt_part, "SGIM", dir / (stem + ".gt_part.sgim"));
    write_label_map(v.gt_semantic, "SGIM", dir / (stem + ".gt_semantic.sgim"));
    write_label_map(decompose_to_patches(v.masks).patch_map, "SGPM", dir / (stem + ".patches.sgpm"));
    json emb = json::array();
    for (const auto& e : v.mask_embeddings) {
      if (e) {
        emb.push_back(std::vector<double>(e->data(), e->data() + e->size()));
      } else {
        emb.push_back(nullptr);
      }
    }
    write_file(dir / (stem + ".embeddings.json"), json{{"embeddings", emb}}.dump());
    j["views"].push_back({{"id", v.id},
                          {"camera", v.camera_index},
                          {"split", v.train ? "train" : "test"},
                          {"rgb", stem + ".rgb.sgfi"},
                          {"masks", stem + ".sgmk"},
                          {"embeddings", stem + ".embeddings.json"},
                          {"gt_instance", stem + ".gt_instance.sgim"},
                          {"gt_part", stem + ".gt_part.sgim"},
                          {"gt_semantic", stem + ".gt_semantic.sgim"}});
  }
  write_file(dir / "dataset.json", j.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "dataset.json")) {
    throw IngestionError("no dataset.json in '" + dir.string() + "'");
  }
  Dataset ds;
  ds.scene = load_scene(dir / "scene.json");
  ds.vocab = load_vocabulary(dir / "vocab.json");
  const std::string text = read_file(dir / "dataset.json");
  const json j = parse_json(text, "dataset.json");
  try {
    if (j.at("schema").get<std::string>() != kDatasetSchema) throw ParseError("unsupported dataset schema", 0);
    ds.seed = j.at("seed").get<std::uint64_t>();
    ds.object_labels = j.at("object_labels").get<std::vector<std::string>>();
    ds.anchor_instance = j.at("anchor_instance").get<std::vector<int>>();
    ds.anchor_part = j.at("anchor_part").get<std::vector<int>>();
    for (const auto& jv : j.at("views")) {
      ViewData v;
      v.id = jv.at("id").get<int>();
      v.camera_index = jv.at("camera").get<int>();
      if (v.camera_index < 0 || v.camera_index >= static_cast<int>(ds.scene.cameras.size())) {
        throw IngestionError("view " + std::to_string(v.id) + " references a missing camera");
      }
      v.train = jv.at("split").get<std::string>() == "train";
      v.rgb = read_feature_image(dir / jv.at("rgb").get<std::string>());
      v.masks = read_mask_set(dir / jv.at("masks").get<std::string>(), v.id);
      v.masks.validate();
      const json emb = parse_json(read_file(dir / jv.at("embeddings").get<std::string>()), "embeddings");
      for (const auto& e : emb.at("embeddings")) {
        if (e.is_null()) {
          v.mask_embeddings.emplace_back(std::nullopt);
          continue;
        }
        const auto values = e.get<std::vector<double>>();
        if (static_cast<int>(values.size()) != ds.vocab.dim()) throw IngestionError("mask embedding has wrong dimension");
        v.mask_embeddings.emplace_back(Eigen::Map<const VecX>(values.data(), values.size()));
      }
      if (v.mask_embeddings.size() != v.masks.masks.size()) {
        throw IngestionError("view " + std::to_string(v.id) + ": embedding count does not match mask count");
      }
      v.gt_instance = read_label_map(dir / jv.at("gt_instance").get<std::string>(), "SGIM");
      v.gt_part = read_label_map(dir / jv.at("gt_part").get<std::string>(), "SGIM");
      v.gt_semantic = read_label_map(dir / jv.at("gt_semantic").get<std::string>(), "SGIM");
      const Camera& cam = ds.scene.cameras[v.camera_index];
      if (v.rgb.width != cam.width || v.rgb.height != cam.height || v.rgb.channels != 3 || v.masks.width != cam.width ||
          v.masks.height != cam.height) {
        throw IngestionError("view " + std::to_string(v.id) + ": image size does not match its camera");
      }
      ds.views.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("dataset.json: ") + e.what(), text.size());
  }
  if (ds.anchor_instance.size() != ds.scene.anchors.size() || ds.anchor_part.size() != ds.scene.anchors.size()) {
    throw IngestionError("anchor label arrays do not match the scene");
  }
  return ds;
}

}  // namespace supergseg
