#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kbprobe/error.hpp"
#include "kbprobe/state_store.hpp"

namespace kbprobe {

struct GenerationRequest {
  std::string prompt;
  std::size_t max_tokens = 64;
  bool greedy = true;
  double temperature = 1.0;
  int capture_layer = -1;  // -1 lets the backend pick its mid layer
  std::vector<Pooling> poolings = {Pooling::pre, Pooling::last, Pooling::avg};
  bool want_logprobs = false;
  // Record id, for backends that replay stored generations. Optional.
  std::string key;

  void validate() const;
  bool wants(Pooling p) const noexcept;
};

struct GenerationResult {
  std::string text;
  PooledStates states;  // vectors for poolings not requested are empty
  std::vector<float> token_logprobs;
  std::int64_t latency_ms = 0;

  std::size_t h() const noexcept;
};

// Something that generates text and exposes pooled mid-layer states.
// Implementations must accept concurrent generate() calls.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual GenerationResult generate(const GenerationRequest& request) = 0;
  // Width the backend promises, or 0 when unknown until the first reply.
  virtual std::size_t hidden_width() const = 0;
  virtual std::string name() const = 0;
};

// Transport errors are retryable; malformed replies and width mismatches are not.
bool is_retryable(const Error& e) noexcept;

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{20};
  double multiplier = 2.0;
};

// Validates the request, retries transport failures with exponential
// backoff, drops unrequested poolings and checks the reply width.
GenerationResult generate_with_states(Backend& backend, const GenerationRequest& request,
                                      const RetryPolicy& retry = {});

struct BatchItem {
  std::optional<GenerationResult> result;
  std::optional<Error> error;

  bool ok() const noexcept { return result.has_value(); }
};

// Results come back in request order; failures stay local to their item.
std::vector<BatchItem> batch_generate(Backend& backend, std::span<const GenerationRequest> requests,
                                      unsigned parallelism, const RetryPolicy& retry = {});

// Replays stored generations. Lookup is by request key (record id) first,
// then by prompt for records whose prompt is recorded in `prompts`.
class DumpBackend final : public Backend {
 public:
  DumpBackend() = default;
  explicit DumpBackend(const Dataset& dataset);

  void add(const Dataset& dataset);
  void add_prompt(std::string prompt, std::string record_id);

  GenerationResult generate(const GenerationRequest& request) override;
  std::size_t hidden_width() const override { return h_; }
  std::string name() const override { return "dump"; }

 private:
  std::unordered_map<std::string, HiddenStateRecord> by_id_;
  std::unordered_map<std::string, std::string> prompt_to_id_;
  std::size_t h_ = 0;
};

// Wire helpers for the binary states reply (see README, "HTTP protocol").
inline constexpr const char* kBinaryStatesMime = "application/x-kbprobe-states";
std::string encode_binary_reply(const GenerationResult& result, std::size_t h);
GenerationResult decode_binary_reply(std::string_view body);

}  // namespace kbprobe
