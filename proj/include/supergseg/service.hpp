#pragma once

#include "supergseg/pipeline.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace supergseg {

/// Run-length pairs (start, length) of the set pixels of a row-major mask.
std::vector<std::uint32_t> encode_rle(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> decode_rle(const std::vector<std::uint32_t>& rle, std::size_t pixel_count);

struct ServiceResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Request handlers over an immutable checkpoint. Every handler is const and
/// safe to call from several threads.
class QueryService {
 public:
  explicit QueryService(Checkpoint checkpoint);

  ServiceResponse health() const;
  ServiceResponse views() const;
  /// Params: view, channel (color|instance|hier), format (ppm|sgfi, default ppm).
  ServiceResponse render(const std::map<std::string, std::string>& params) const;
  /// Body: {"view", "u", "v", "mode": "part"|"instance"}.
  ServiceResponse click(const std::string& body) const;
  /// Body: {"label", optional "view" for the mask, default the first view}.
  ServiceResponse text(const std::string& body) const;

  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  struct ViewCache {
    BlendState state;
    FeatureImage color, instance, hier;
  };

  const ViewCache& view_cache(int view_id) const;  // unknown ids answer 404

  Checkpoint ckpt_;
  std::vector<int> gaussian_superg_;
  MatX decoded_;
  std::map<int, ViewCache> views_;  // keyed by view id
};

/// Wires the endpoints (plus CORS headers) onto an httplib server.
void register_routes(httplib::Server& server, const QueryService& service);

/// Blocks serving HTTP on host:port until the process is stopped.
void serve(const QueryService& service, const std::string& host, int port);

}  // namespace supergseg
