#include "kbprobe/backend.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <sstream>
#include <thread>

#include "kbprobe/detail/binary_io.hpp"

namespace kbprobe {

void GenerationRequest::validate() const {
  if (prompt.empty()) throw Error(Errc::invalid_argument, "prompt must not be empty");
  if (max_tokens < 1) throw Error(Errc::invalid_argument, "max_tokens must be >= 1");
  if (poolings.empty()) throw Error(Errc::invalid_argument, "request must ask for at least one pooling");
}

bool GenerationRequest::wants(Pooling p) const noexcept {
  return std::find(poolings.begin(), poolings.end(), p) != poolings.end();
}

std::size_t GenerationResult::h() const noexcept {
  for (const auto* v : {&states.pre, &states.last, &states.avg}) {
    if (!v->empty()) return v->size();
  }
  return 0;
}

bool is_retryable(const Error& e) noexcept { return e.code() == Errc::transport; }

GenerationResult generate_with_states(Backend& backend, const GenerationRequest& request,
                                      const RetryPolicy& retry) {
  request.validate();
  auto backoff = retry.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      GenerationResult result = backend.generate(request);
      for (auto p : {Pooling::pre, Pooling::last, Pooling::avg}) {
        auto& v = result.states.get(p);
        if (!request.wants(p)) {
          v.clear();
        } else if (v.empty()) {
          throw Error(Errc::malformed_reply, backend.name() + " reply is missing the " +
                                                 std::string(to_string(p)) + " state");
        }
      }
      const std::size_t h = result.h();
      for (auto p : request.poolings) {
        if (result.states.get(p).size() != h) {
          throw Error(Errc::dimension_mismatch, backend.name() + " reply has ragged state widths");
        }
      }
      if (const std::size_t want = backend.hidden_width(); want != 0 && h != want) {
        throw Error(Errc::dimension_mismatch, backend.name() + " reply width " + std::to_string(h) +
                                                  " does not match configured width " +
                                                  std::to_string(want));
      }
      return result;
    } catch (const Error& e) {
      if (!is_retryable(e) || attempt >= retry.max_attempts) throw;
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::chrono::milliseconds(
        static_cast<std::int64_t>(static_cast<double>(backoff.count()) * retry.multiplier));
  }
}

std::vector<BatchItem> batch_generate(Backend& backend, std::span<const GenerationRequest> requests,
                                      unsigned parallelism, const RetryPolicy& retry) {
  if (parallelism < 1) throw Error(Errc::invalid_argument, "parallelism must be >= 1");
  std::vector<BatchItem> items(requests.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        items[i].result = generate_with_states(backend, requests[i], retry);
      } catch (const Error& e) {
        items[i].error = e;
      } catch (const std::exception& e) {
        items[i].error = Error(Errc::transport, e.what());
      }
    }
  };

  const std::size_t n_workers = std::min<std::size_t>(parallelism, requests.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  }
  return items;
}

DumpBackend::DumpBackend(const Dataset& dataset) { add(dataset); }

void DumpBackend::add(const Dataset& dataset) {
  if (dataset.records.empty()) return;
  if (h_ != 0 && dataset.h != h_) {
    throw Error(Errc::width_mismatch, "dump backend: dataset width " + std::to_string(dataset.h) +
                                          " differs from " + std::to_string(h_));
  }
  h_ = dataset.h;
  for (const auto& r : dataset.records) by_id_.insert_or_assign(r.id, r);
}

void DumpBackend::add_prompt(std::string prompt, std::string record_id) {
  prompt_to_id_.insert_or_assign(std::move(prompt), std::move(record_id));
}

GenerationResult DumpBackend::generate(const GenerationRequest& request) {
  auto it = request.key.empty() ? by_id_.end() : by_id_.find(request.key);
  if (it == by_id_.end()) {
    if (auto p = prompt_to_id_.find(request.prompt); p != prompt_to_id_.end()) it = by_id_.find(p->second);
  }
  if (it == by_id_.end()) {
    throw Error(Errc::missing_key, "dump backend has no record for key '" + request.key + "'");
  }
  const auto& r = it->second;
  GenerationResult out;
  out.text = r.response;
  out.states = r.states;
  if (request.want_logprobs) out.token_logprobs = r.token_logprobs;
  return out;
}

std::string encode_binary_reply(const GenerationResult& result, std::size_t h) {
  std::ostringstream out(std::ios::binary);
  using detail::put_le;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  std::uint8_t mask = 0;
  if (!result.states.pre.empty()) mask |= 1;
  if (!result.states.last.empty()) mask |= 2;
  if (!result.states.avg.empty()) mask |= 4;
  put_le<std::uint8_t>(out, mask);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(result.text.size()));
  out.write(result.text.data(), static_cast<std::streamsize>(result.text.size()));
  for (const auto* v : {&result.states.pre, &result.states.last, &result.states.avg}) {
    if (v->empty()) continue;
    if (v->size() != h) throw Error(Errc::dimension_mismatch, "binary reply: state width differs from h");
    detail::put_f32s(out, *v);
  }
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(result.token_logprobs.size()));
  detail::put_f32s(out, result.token_logprobs);
  return std::move(out).str();
}

GenerationResult decode_binary_reply(std::string_view body) {
  std::istringstream in{std::string(body), std::ios::binary};
  using detail::get_le;
  try {
    GenerationResult r;
    const auto h = get_le<std::uint32_t>(in, "h");
    const auto mask = get_le<std::uint8_t>(in, "pooling mask");
    const auto text_len = get_le<std::uint32_t>(in, "text length");
    if (text_len > body.size()) throw Error(Errc::truncated, "text length exceeds body");
    r.text.resize(text_len);
    detail::read_exact(in, r.text.data(), text_len, "text");
    const int n_states = std::popcount(static_cast<unsigned>(mask & 7));
    if (static_cast<std::uint64_t>(h) * 4 * n_states > body.size()) {
      throw Error(Errc::truncated, "state block exceeds body");
    }
    if (mask & 1) r.states.pre = detail::get_f32_vector(in, h, "pre");
    if (mask & 2) r.states.last = detail::get_f32_vector(in, h, "last");
    if (mask & 4) r.states.avg = detail::get_f32_vector(in, h, "avg");
    const auto n_lp = get_le<std::uint32_t>(in, "logprob count");
    if (static_cast<std::uint64_t>(n_lp) * 4 > body.size()) throw Error(Errc::truncated, "logprobs exceed body");
    r.token_logprobs = detail::get_f32_vector(in, n_lp, "logprobs");
    return r;
  } catch (const Error& e) {
    throw Error(Errc::malformed_reply, std::string("malformed binary reply: ") + e.what());
  }
}

}  // namespace kbprobe
