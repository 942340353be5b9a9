#pragma once

#include "supergseg/scene.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>

namespace supergseg {

inline constexpr std::string_view kSceneSchema = "supergseg-scene/1";

/// Scene file: one JSON document; bulk tensors are base64 little-endian f32.
std::string encode_scene(const Scene& scene);
/// Throws ParseError (with byte offset) on malformed input; never returns a
/// partially filled scene.
Scene decode_scene(std::string_view text);

void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

// Shared JSON codecs for the other file formats.
nlohmann::json mlp_to_json(const TinyMLP& mlp);
TinyMLP mlp_from_json(const nlohmann::json& j);
nlohmann::json camera_to_json(const Camera& cam);
Camera camera_from_json(const nlohmann::json& j);
nlohmann::json f32_array(std::span<const double> values);
std::vector<double> f32_array(const nlohmann::json& j, std::size_t expected_count, const char* field);
nlohmann::json matrix_to_json(const MatX& m);
MatX matrix_from_json(const nlohmann::json& j, const char* field);

/// Parses JSON text, mapping nlohmann errors to ParseError with a byte offset.
nlohmann::json parse_json(std::string_view text, const std::string& what);

}  // namespace supergseg
