#include "supergseg/scene_io.hpp"

#include "supergseg/binary_io.hpp"

namespace supergseg {

using nlohmann::json;

json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(what + ": malformed JSON", e.byte > 0 ? e.byte - 1 : 0);
  }
}

json f32_array(std::span<const double> values) { return base64_encode(pack_f32(values)); }

std::vector<double> f32_array(const json& j, std::size_t expected_count, const char* field) {
  auto values = unpack_f32(base64_decode(j.get<std::string>()));
  if (values.size() != expected_count) {
    throw ParseError(std::string("field '") + field + "' holds " + std::to_string(values.size()) + " values, expected " +
                         std::to_string(expected_count),
                     0);
  }
  return values;
}

json matrix_to_json(const MatX& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", f32_array(std::span<const double>(m.data(), m.size()))}};
}

MatX matrix_from_json(const json& j, const char* field) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  if (rows < 0 || cols < 0) throw ParseError(std::string("negative matrix shape in '") + field + "'", 0);
  const auto values = f32_array(j.at("data"), static_cast<std::size_t>(rows * cols), field);
  MatX m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

json mlp_to_json(const TinyMLP& mlp) {
  json layers = json::array();
  for (const auto& layer : mlp.layers()) {
    layers.push_back({{"in", layer.input_dim()},
                      {"out", layer.output_dim()},
                      {"activation", to_string(layer.activation)},
                      {"weight", f32_array(std::span<const double>(layer.weight.data(), layer.weight.size()))},
                      {"bias", f32_array(std::span<const double>(layer.bias.data(), layer.bias.size()))}});
  }
  return {{"layers", layers}};
}

TinyMLP mlp_from_json(const json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& l : j.at("layers")) {
    const int in = l.at("in").get<int>();
    const int out = l.at("out").get<int>();
    if (in <= 0 || out <= 0) throw ParseError("MLP layer with non-positive width", 0);
    DenseLayer layer;
    layer.activation = activation_from_string(l.at("activation").get<std::string>());
    const auto w = f32_array(l.at("weight"), static_cast<std::size_t>(in) * out, "weight");
    const auto b = f32_array(l.at("bias"), static_cast<std::size_t>(out), "bias");
    layer.weight = Eigen::Map<const MatX>(w.data(), out, in);
    layer.bias = Eigen::Map<const VecX>(b.data(), out);
    layers.push_back(std::move(layer));
  }
  return TinyMLP(std::move(layers));
}

json camera_to_json(const Camera& cam) {
  // stored row-major
  const Mat3 rt = cam.rotation.transpose();
  std::vector<double> rows(rt.data(), rt.data() + 9);
  return {{"fx", cam.fx},
          {"fy", cam.fy},
          {"cx", cam.cx},
          {"cy", cam.cy},
          {"width", cam.width},
          {"height", cam.height},
          {"rotation", rows},
          {"translation", {cam.translation.x(), cam.translation.y(), cam.translation.z()}}};
}

Camera camera_from_json(const json& j) {
  Camera cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  const auto rows = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (rows.size() != 9 || t.size() != 3) throw ParseError("camera rotation/translation has wrong size", 0);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation(r, c) = rows[3 * r + c];
  }
  cam.translation = Vec3(t[0], t[1], t[2]);
  return cam;
}

std::string encode_scene(const Scene& scene) {
  scene.validate();
  const std::size_t n = scene.anchors.size();
  const int k = scene.config.k_spawn;
  std::vector<int> ids(n);
  std::vector<double> pos, fg, fs, scale, offsets;
  pos.reserve(3 * n);
  fg.reserve(kAnchorFeatureDim * n);
  fs.reserve(kAnchorFeatureDim * n);
  offsets.reserve(3 * k * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Anchor& a = scene.anchors[i];
    ids[i] = a.id;
    pos.insert(pos.end(), a.position.data(), a.position.data() + 3);
    fg.insert(fg.end(), a.f_g.data(), a.f_g.data() + kAnchorFeatureDim);
    fs.insert(fs.end(), a.f_s.data(), a.f_s.data() + kAnchorFeatureDim);
    scale.push_back(a.scale);
    for (const auto& o : a.offsets) offsets.insert(offsets.end(), o.data(), o.data() + 3);
  }
  json j;
  j["schema"] = kSceneSchema;
  j["config"] = {{"k_spawn", k}, {"feature_dim", kAnchorFeatureDim}, {"instance_dim", kInstanceDim}, {"hier_dim", kHierDim}};
  j["anchor_count"] = n;
  j["anchors"] = {{"id", base64_encode(pack_i32(ids))},
                  {"position", f32_array(pos)},
                  {"f_g", f32_array(fg)},
                  {"f_s", f32_array(fs)},
                  {"scale", f32_array(scale)},
                  {"offsets", f32_array(offsets)}};
  j["decoders"] = {{"opacity", mlp_to_json(scene.decoders.opacity)},
                   {"color", mlp_to_json(scene.decoders.color)},
                   {"rotation", mlp_to_json(scene.decoders.rotation)},
                   {"scale", mlp_to_json(scene.decoders.scale)},
                   {"instance", mlp_to_json(scene.decoders.instance)},
                   {"hier", mlp_to_json(scene.decoders.hier)}};
  j["cameras"] = json::array();
  for (const auto& c : scene.cameras) j["cameras"].push_back(camera_to_json(c));
  return j.dump();
}

Scene decode_scene(std::string_view text) {
  const json j = parse_json(text, "scene file");
  try {
    if (j.at("schema").get<std::string>() != kSceneSchema) throw ParseError("unsupported scene schema", 0);
    Scene scene;
    const auto& cfg = j.at("config");
    scene.config.k_spawn = cfg.at("k_spawn").get<int>();
    if (cfg.at("feature_dim").get<int>() != kAnchorFeatureDim || cfg.at("instance_dim").get<int>() != kInstanceDim ||
        cfg.at("hier_dim").get<int>() != kHierDim) {
      throw ParseError("scene feature dimensions are not supported", 0);
    }
    const int k = scene.config.k_spawn;
    if (k < 1) throw ParseError("k_spawn must be positive", 0);
    const auto n = j.at("anchor_count").get<std::size_t>();
    const auto& a = j.at("anchors");
    const auto ids = unpack_i32(base64_decode(a.at("id").get<std::string>()));
    if (ids.size() != n) throw ParseError("anchor id count mismatch", 0);
    const auto pos = f32_array(a.at("position"), 3 * n, "position");
    const auto fg = f32_array(a.at("f_g"), kAnchorFeatureDim * n, "f_g");
    const auto fs = f32_array(a.at("f_s"), kAnchorFeatureDim * n, "f_s");
    const auto scale = f32_array(a.at("scale"), n, "scale");
    const auto offsets = f32_array(a.at("offsets"), 3 * k * n, "offsets");
    scene.anchors.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      Anchor& an = scene.anchors[i];
      an.id = ids[i];
      an.position = Vec3(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
      an.f_g = Eigen::Map<const VecX>(fg.data() + kAnchorFeatureDim * i, kAnchorFeatureDim);
      an.f_s = Eigen::Map<const VecX>(fs.data() + kAnchorFeatureDim * i, kAnchorFeatureDim);
      an.scale = scale[i];
      an.offsets.resize(k);
      for (int o = 0; o < k; ++o) {
        const std::size_t b = 3 * (k * i + o);
        an.offsets[o] = Vec3(offsets[b], offsets[b + 1], offsets[b + 2]);
      }
    }
    const auto& d = j.at("decoders");
    scene.decoders.opacity = mlp_from_json(d.at("opacity"));
    scene.decoders.color = mlp_from_json(d.at("color"));
    scene.decoders.rotation = mlp_from_json(d.at("rotation"));
    scene.decoders.scale = mlp_from_json(d.at("scale"));
    scene.decoders.instance = mlp_from_json(d.at("instance"));
    scene.decoders.hier = mlp_from_json(d.at("hier"));
    for (const auto& c : j.at("cameras")) scene.cameras.push_back(camera_from_json(c));
    scene.validate();
    return scene;
  } catch (const json::exception& e) {
    throw ParseError(std::string("scene file: ") + e.what(), text.size());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("scene file: ") + e.what(), text.size());
  }
}

void save_scene(const Scene& scene, const std::filesystem::path& path) { write_file(path, encode_scene(scene)); }

Scene load_scene(const std::filesystem::path& path) { return decode_scene(read_file(path)); }

}  // namespace supergseg
