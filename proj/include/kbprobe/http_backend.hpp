#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <nlohmann/json_fwd.hpp>

#include "kbprobe/backend.hpp"

namespace kbprobe {

inline constexpr const char* kGeneratePath = "/v1/generate_with_states";
inline constexpr const char* kEndpointEnv = "KBPROBE_ENDPOINT";

struct HttpBackendConfig {
  std::string endpoint;  // scheme://host:port
  std::chrono::milliseconds timeout{30000};
  std::string bearer_token;
  bool binary_states = false;  // ask for the binary reply via Accept
  std::size_t expected_h = 0;  // 0: accept whatever the server reports

  // Endpoint from KBPROBE_ENDPOINT; throws when unset.
  static HttpBackendConfig from_env();
};

// Client for POST /v1/generate_with_states.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  GenerationResult generate(const GenerationRequest& request) override;
  std::size_t hidden_width() const override { return config_.expected_h; }
  std::string name() const override { return "http"; }

 private:
  HttpBackendConfig config_;
};

nlohmann::json request_to_json(const GenerationRequest& request);
GenerationRequest request_from_json(const nlohmann::json& j);
nlohmann::json result_to_json(const GenerationResult& result);
// Throws Errc::malformed_reply on schema violations.
GenerationResult result_from_json(const nlohmann::json& j);

// Serves any Backend over the HTTP protocol. Used by `kbprobe serve` and
// the client tests.
class BackendServer {
 public:
  explicit BackendServer(Backend& backend);
  ~BackendServer();
  BackendServer(const BackendServer&) = delete;
  BackendServer& operator=(const BackendServer&) = delete;

  // Binds to an ephemeral port on host and starts serving on a background thread.
  int start(const std::string& host = "127.0.0.1");
  // Blocks serving on host:port.
  bool listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace kbprobe
