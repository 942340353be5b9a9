#include "supergseg/service.hpp"

#include <httplib.h>
#include <json.hpp>

namespace supergseg {

using nlohmann::json;

namespace {

// Request-level validation failure; mapped to an HTTP status.
struct RequestError {
  int status;
  std::string message;
};

ServiceResponse json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

ServiceResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

json parse_body(const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw RequestError{400, "request body must be a JSON object"};
  return j;
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw RequestError{400, std::string("missing field '") + key + "'"};
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw RequestError{400, std::string("field '") + key + "' has the wrong type"};
  }
}

template <typename Fn>
ServiceResponse guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const RequestError& e) {
    return error_response(e.status, e.message);
  } catch (const Error& e) {
    return error_response(500, e.what());
  }
}

json mask_json(const std::vector<std::uint8_t>& mask, int width, int height) {
  return {{"width", width}, {"height", height}, {"runs", encode_rle(mask)}};
}

}  // namespace

std::vector<std::uint32_t> encode_rle(const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint32_t> out;
  std::size_t p = 0;
  while (p < mask.size()) {
    if (!mask[p]) {
      ++p;
      continue;
    }
    const std::size_t start = p;
    while (p < mask.size() && mask[p]) ++p;
    out.push_back(static_cast<std::uint32_t>(start));
    out.push_back(static_cast<std::uint32_t>(p - start));
  }
  return out;
}

std::vector<std::uint8_t> decode_rle(const std::vector<std::uint32_t>& rle, std::size_t pixel_count) {
  if (rle.size() % 2 != 0) throw ParseError("run-length list must hold (start, length) pairs", 0);
  std::vector<std::uint8_t> mask(pixel_count, 0);
  for (std::size_t i = 0; i < rle.size(); i += 2) {
    const std::size_t start = rle[i], len = rle[i + 1];
    if (start + len > pixel_count) throw ParseError("run extends past the mask", i * 4);
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(start), mask.begin() + static_cast<std::ptrdiff_t>(start + len),
              1);
  }
  return mask;
}

QueryService::QueryService(Checkpoint checkpoint) : ckpt_(std::move(checkpoint)) {
  const Scene& scene = ckpt_.dataset.scene;
  gaussian_superg_ = ckpt_.cluster.gaussian_superg(scene.config.k_spawn);
  decoded_ = decode_language(ckpt_.language, ckpt_.cluster.supergs);
  const auto gaussians = spawn_all(scene);
  ChannelSpec spec;
  spec.instance = spec.hier = true;
  for (const ViewData& v : ckpt_.dataset.views) {
    RenderOutput r = supergseg::render(gaussians, scene.cameras[v.camera_index], spec);
    views_[v.id] = {std::move(r.state), std::move(r.images["color"]), std::move(r.images["instance"]),
                    std::move(r.images["hier"])};
  }
}

const QueryService::ViewCache& QueryService::view_cache(int view_id) const {
  const auto it = views_.find(view_id);
  if (it == views_.end()) throw RequestError{404, "unknown view " + std::to_string(view_id)};
  return it->second;
}

ServiceResponse QueryService::health() const { return {200, "ok", "text/plain"}; }

ServiceResponse QueryService::views() const {
  json list = json::array();
  for (const ViewData& v : ckpt_.dataset.views) {
    const Camera& c = ckpt_.dataset.scene.cameras[v.camera_index];
    list.push_back({{"id", v.id},
                    {"split", v.train ? "train" : "test"},
                    {"width", c.width},
                    {"height", c.height}});
  }
  return json_response(200, {{"views", list}});
}

ServiceResponse QueryService::render(const std::map<std::string, std::string>& params) const {
  return guarded([&] {
    const auto get = [&](const std::string& key, const std::string& fallback) {
      const auto it = params.find(key);
      return it == params.end() ? fallback : it->second;
    };
    const std::string view_text = get("view", "");
    int view_id = 0;
    try {
      std::size_t used = 0;
      view_id = std::stoi(view_text, &used);
      if (used != view_text.size()) throw std::invalid_argument(view_text);
    } catch (const std::exception&) {
      throw RequestError{400, "query parameter 'view' must be an integer"};
    }
    const std::string channel = get("channel", "color");
    const std::string format = get("format", "ppm");
    const ViewCache& cache = view_cache(view_id);
    const FeatureImage* image = nullptr;
    if (channel == "color") image = &cache.color;
    else if (channel == "instance") image = &cache.instance;
    else if (channel == "hier") image = &cache.hier;
    else throw RequestError{400, "channel must be color, instance or hier"};
    if (format == "sgfi") return ServiceResponse{200, encode_feature_image(*image), "application/octet-stream"};
    if (format != "ppm") throw RequestError{400, "format must be ppm or sgfi"};
    const FeatureImage preview = channel == "color" ? *image : feature_preview(*image);
    return ServiceResponse{200, encode_ppm(preview), "image/x-portable-pixmap"};
  });
}

ServiceResponse QueryService::click(const std::string& body) const {
  return guarded([&] {
    const json j = parse_body(body);
    const int view_id = field<int>(j, "view");
    const int u = field<int>(j, "u");
    const int v = field<int>(j, "v");
    const std::string mode_text = j.contains("mode") ? field<std::string>(j, "mode") : "part";
    ClickMode mode;
    try {
      mode = click_mode_from_string(mode_text);
    } catch (const ConfigError& e) {
      throw RequestError{400, e.what()};
    }
    const ViewCache& cache = view_cache(view_id);
    const int w = cache.state.width, h = cache.state.height;
    if (u < 0 || v < 0 || u >= w || v >= h) throw RequestError{400, "pixel outside the view"};
    const ClickResult r = click_query(static_cast<std::size_t>(v) * w + u, cache.state, cache.hier, cache.instance,
                                      ckpt_.cluster, mode);
    const auto mask = selection_mask(cache.state, gaussian_superg_, r.selected, ckpt_.cluster.size());
    return json_response(200, {{"status", r.empty ? "empty" : "ok"},
                               {"mode", to_string(mode)},
                               {"selected_supergs", r.selected},
                               {"instance", r.instance},
                               {"mask_rle", mask_json(mask, w, h)}});
  });
}

ServiceResponse QueryService::text(const std::string& body) const {
  return guarded([&] {
    const json j = parse_body(body);
    const std::string label = field<std::string>(j, "label");
    const auto index = ckpt_.dataset.vocab.index_of(label);
    if (!index) throw RequestError{400, "label '" + label + "' is not in the vocabulary"};
    const int view_id = j.contains("view") ? field<int>(j, "view") : ckpt_.dataset.views.front().id;
    const ViewCache& cache = view_cache(view_id);
    const VecX query = ckpt_.dataset.vocab.vector(*index);
    const TextQueryResult r = text_query_3d(query, decoded_, ckpt_.cluster.instance_labels,
                                            default_top_m(ckpt_.cluster.size()));
    std::vector<int> winner_supergs;
    for (std::size_t s = 0; s < ckpt_.cluster.instance_labels.size(); ++s) {
      if (r.winner >= 0 && ckpt_.cluster.instance_labels[s] == r.winner) winner_supergs.push_back(static_cast<int>(s));
    }
    const auto mask = selection_mask(cache.state, gaussian_superg_, winner_supergs, ckpt_.cluster.size());
    return json_response(200, {{"label", label},
                               {"view", view_id},
                               {"winner_instance", r.winner},
                               {"relevancy_per_instance", r.relevancy},
                               {"selected_supergs", r.selected},
                               {"mask_rle", mask_json(mask, cache.state.width, cache.state.height)}});
  });
}

void register_routes(httplib::Server& server, const QueryService& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  const auto send = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/health", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  server.Get("/views", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.views()); });
  server.Get("/render", [&service, send](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> params;
    for (const auto& [k, v] : req.params) params.emplace(k, v);
    send(res, service.render(params));
  });
  server.Post("/query/click",
              [&service, send](const httplib::Request& req, httplib::Response& res) { send(res, service.click(req.body)); });
  server.Post("/query/text",
              [&service, send](const httplib::Request& req, httplib::Response& res) { send(res, service.text(req.body)); });
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

void serve(const QueryService& service, const std::string& host, int port) {
  if (port < 1024 || port > 65535) throw ConfigError("port must be in [1024, 65535]");
  httplib::Server server;
  register_routes(server, service);
  log_info("serving on http://" + host + ":" + std::to_string(port));
  if (!server.listen(host, port)) throw Error("could not listen on " + host + ":" + std::to_string(port));
}

}  // namespace supergseg
