#include "kbprobe/http_backend.hpp"

#include <cmath>
#include <cstdlib>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace kbprobe {

namespace {

std::vector<float> float_array(const nlohmann::json& j, const char* field) {
  if (!j.is_array()) throw Error(Errc::malformed_reply, std::string("'") + field + "' must be an array");
  std::vector<float> out;
  out.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_number()) throw Error(Errc::malformed_reply, std::string("'") + field + "' holds a non-number");
    out.push_back(x.get<float>());
  }
  return out;
}

}  // namespace

HttpBackendConfig HttpBackendConfig::from_env() {
  const char* url = std::getenv(kEndpointEnv);
  if (url == nullptr || *url == '\0') {
    throw Error(Errc::invalid_argument, std::string(kEndpointEnv) + " is not set");
  }
  HttpBackendConfig cfg;
  cfg.endpoint = url;
  return cfg;
}

nlohmann::json request_to_json(const GenerationRequest& request) {
  nlohmann::json poolings = nlohmann::json::array();
  for (auto p : request.poolings) poolings.push_back(to_string(p));
  nlohmann::json j = {{"prompt", request.prompt},
                      {"max_tokens", request.max_tokens},
                      {"greedy", request.greedy},
                      {"capture_layer", request.capture_layer},
                      {"poolings", std::move(poolings)},
                      {"want_logprobs", request.want_logprobs}};
  if (!request.key.empty()) j["key"] = request.key;  // lets a served dump backend replay by id
  return j;
}

GenerationRequest request_from_json(const nlohmann::json& j) {
  try {
    GenerationRequest r;
    r.prompt = j.at("prompt").get<std::string>();
    r.max_tokens = j.value("max_tokens", std::size_t{64});
    r.greedy = j.value("greedy", true);
    r.capture_layer = j.value("capture_layer", -1);
    r.poolings.clear();
    for (const auto& p : j.at("poolings")) r.poolings.push_back(parse_pooling(p.get<std::string>()));
    r.want_logprobs = j.value("want_logprobs", false);
    r.key = j.value("key", std::string{});
    r.validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("bad request body: ") + e.what());
  }
}

nlohmann::json result_to_json(const GenerationResult& result) {
  nlohmann::json states = nlohmann::json::object();
  for (auto p : {Pooling::pre, Pooling::last, Pooling::avg}) {
    if (const auto& v = result.states.get(p); !v.empty()) states[std::string(to_string(p))] = v;
  }
  nlohmann::json j = {{"text", result.text}, {"states", std::move(states)}, {"h", result.h()}};
  if (!result.token_logprobs.empty()) j["token_logprobs"] = result.token_logprobs;
  return j;
}

GenerationResult result_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(Errc::malformed_reply, "reply must be a JSON object");
  if (!j.contains("text") || !j["text"].is_string()) {
    throw Error(Errc::malformed_reply, "reply lacks a string 'text'");
  }
  if (!j.contains("states") || !j["states"].is_object()) {
    throw Error(Errc::malformed_reply, "reply lacks a 'states' object");
  }
  if (!j.contains("h") || !j["h"].is_number_unsigned()) {
    throw Error(Errc::malformed_reply, "reply lacks a non-negative integer 'h'");
  }
  GenerationResult r;
  r.text = j["text"].get<std::string>();
  const auto h = j["h"].get<std::size_t>();
  for (auto p : {Pooling::pre, Pooling::last, Pooling::avg}) {
    const std::string key(to_string(p));
    if (!j["states"].contains(key)) continue;
    auto v = float_array(j["states"][key], key.c_str());
    if (v.size() != h) {
      throw Error(Errc::malformed_reply, "state '" + key + "' has " + std::to_string(v.size()) +
                                             " entries, reply declares h=" + std::to_string(h));
    }
    r.states.get(p) = std::move(v);
  }
  if (j.contains("token_logprobs")) r.token_logprobs = float_array(j["token_logprobs"], "token_logprobs");
  return r;
}

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw Error(Errc::invalid_argument, "http backend needs an endpoint");
}

GenerationResult HttpBackend::generate(const GenerationRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  httplib::Client client(config_.endpoint);
  if (!client.is_valid()) throw Error(Errc::invalid_argument, "invalid endpoint '" + config_.endpoint + "'");
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers headers;
  headers.emplace("Accept", config_.binary_states
                                ? std::string(kBinaryStatesMime) + ", application/json"
                                : std::string("application/json"));
  if (!config_.bearer_token.empty()) headers.emplace("Authorization", "Bearer " + config_.bearer_token);

  auto res = client.Post(kGeneratePath, headers, request_to_json(request).dump(), "application/json");
  if (!res) {
    throw Error(Errc::transport, "POST " + config_.endpoint + kGeneratePath + " failed: " +
                                     httplib::to_string(res.error()));
  }
  if (res->status >= 500) {
    throw Error(Errc::transport, "server error " + std::to_string(res->status) + ": " + res->body);
  }
  if (res->status != 200) {
    throw Error(Errc::invalid_argument, "request rejected with status " + std::to_string(res->status) +
                                            ": " + res->body);
  }

  GenerationResult out;
  if (res->get_header_value("Content-Type").starts_with(kBinaryStatesMime)) {
    out = decode_binary_reply(res->body);
  } else {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::malformed_reply, std::string("reply is not JSON: ") + e.what());
    }
    out = result_from_json(j);
  }
  out.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  return out;
}

struct BackendServer::Impl {
  Backend& backend;
  httplib::Server server;

  explicit Impl(Backend& b) : backend(b) {
    server.Post(kGeneratePath, [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto request = request_from_json(nlohmann::json::parse(req.body));
        const auto result = generate_with_states(backend, request, RetryPolicy{1});
        if (req.get_header_value("Accept").find(kBinaryStatesMime) != std::string::npos) {
          res.set_content(encode_binary_reply(result, result.h()), kBinaryStatesMime);
        } else {
          res.set_content(result_to_json(result).dump(), "application/json");
        }
      } catch (const nlohmann::json::exception& e) {
        res.status = 400;
        res.set_content(e.what(), "text/plain");
      } catch (const Error& e) {
        res.status = e.code() == Errc::invalid_argument ? 400 : e.code() == Errc::transport ? 503 : 500;
        res.set_content(e.what(), "text/plain");
      }
    });
  }
};

BackendServer::BackendServer(Backend& backend) : impl_(std::make_unique<Impl>(backend)) {}

BackendServer::~BackendServer() { stop(); }

int BackendServer::start(const std::string& host) {
  const int port = impl_->server.bind_to_any_port(host);
  if (port < 0) throw Error(Errc::io, "could not bind backend server on " + host);
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

bool BackendServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void BackendServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace kbprobe
