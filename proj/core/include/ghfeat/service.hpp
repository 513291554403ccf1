#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "ghfeat/models.hpp"

namespace ghfeat {

struct ServiceOptions {
  std::chrono::seconds session_ttl{3600};
  std::string version = "0.1.0";
  // Injectable for expiry tests.
  std::function<std::chrono::steady_clock::time_point()> clock = [] { return std::chrono::steady_clock::now(); };
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::string body;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;
};

struct HttpResponse {
  int status = 200;
  nlohmann::json body;
};

/// HTTP/JSON facade over encode, edit and synthesis with an in-memory
/// session store. Request handling is independent of the socket layer so it
/// can be exercised directly.
///
/// Routes: POST /encode /mix /sample /edit/local /harmonize,
///         GET /reconstruct /levels /health.
/// Errors come back as {"code": <status>, "message": ...}.
class Service {
 public:
  explicit Service(std::optional<ModelBundle> bundle, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  HttpResponse handle(const HttpRequest& request);

  // Blocks until stop(). Returns false when the port could not be bound.
  bool listen(const std::string& host, int port);
  // Binds an ephemeral port and returns it; serve with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();

  size_t session_count();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

}  // namespace ghfeat
