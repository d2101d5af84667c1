#include <doctest.h>

#include <atomic>
#include <chrono>
#include <nlohmann/json.hpp>

#include "kbprobe/backend.hpp"
#include "kbprobe/estimator.hpp"
#include "kbprobe/http_backend.hpp"
#include "kbprobe/metrics.hpp"
#include "kbprobe/mock_backend.hpp"
#include "support.hpp"

using namespace kbprobe;
using kbtest::error_code_of;
using kbtest::same_bits;

namespace {

GenerationRequest vanilla_request(const MockQuestion& q, bool logprobs = true) {
  GenerationRequest r;
  r.prompt = PromptTemplates::builtin().render(PromptStyle::vanilla, q.question);
  r.want_logprobs = logprobs;
  r.key = q.id;
  return r;
}

Dataset generate_dataset(Backend& backend, const std::vector<MockQuestion>& qs) {
  std::vector<GenerationRequest> reqs;
  for (const auto& q : qs) reqs.push_back(vanilla_request(q));
  const auto items = batch_generate(backend, reqs, 8);
  Dataset ds;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    REQUIRE(items[i].ok());
    auto& res = *items[i].result;
    ds.records.push_back(make_record(qs[i].id, qs[i].question, res.text, qs[i].gold_answers, res.states,
                                     PromptStyle::vanilla, res.token_logprobs));
  }
  ds.h = backend.hidden_width();
  return ds;
}

// Test alignment of a single-seed estimator trained on mock states.
double mock_alignment(double separation, double knowable_rate, std::size_t n_train, std::size_t n_test) {
  CorpusSpec spec;
  spec.knowable_rate = knowable_rate;
  spec.n_questions = n_train;
  auto train_q = synthesize_questions(spec, 1, "tr");
  spec.n_questions = n_test;
  auto test_q = synthesize_questions(spec, 2, "te");
  MockProfile profile;
  profile.seed = 5;
  profile.h = 32;
  profile.separation = separation;
  profile.answers = train_q;
  profile.answers.insert(profile.answers.end(), test_q.begin(), test_q.end());
  MockBackend mock(profile);

  const auto train_ds = generate_dataset(mock, train_q);
  const auto test_ds = generate_dataset(mock, test_q);
  TrainConfig cfg;
  cfg.seeds = {0};
  const auto trained = train(train_ds, Pooling::last, cfg);
  std::vector<Outcome> rows;
  for (const auto& r : test_ds.records) {
    rows.push_back({r.label, predict(trained.models, r.states.last).c});
  }
  return compute_metrics(rows).alignment;
}

MockProfile small_profile(std::size_t n = 20) {
  CorpusSpec spec;
  spec.n_questions = n;
  spec.overconfident_rate = 0.5;
  MockProfile p;
  p.seed = 9;
  p.h = 16;
  p.answers = synthesize_questions(spec, 3, "q");
  return p;
}

// Backend that fails a fixed number of times before succeeding.
class FlakyBackend final : public Backend {
 public:
  FlakyBackend(int failures, Errc code) : failures_(failures), code_(code) {}
  GenerationResult generate(const GenerationRequest&) override {
    if (calls_++ < failures_) throw Error(code_, "flaky");
    GenerationResult r;
    r.text = "ok";
    r.states.pre = r.states.last = r.states.avg = {1.0f, 2.0f};
    return r;
  }
  std::size_t hidden_width() const override { return 2; }
  std::string name() const override { return "flaky"; }
  int calls() const { return calls_; }

 private:
  int failures_;
  Errc code_;
  std::atomic<int> calls_{0};
};

// Fails requests whose key is in the list; otherwise delegates.
class SelectiveBackend final : public Backend {
 public:
  SelectiveBackend(Backend& inner, std::string bad_key) : inner_(inner), bad_(std::move(bad_key)) {}
  GenerationResult generate(const GenerationRequest& r) override {
    if (r.key == bad_) throw Error(Errc::malformed_reply, "bad item");
    return inner_.generate(r);
  }
  std::size_t hidden_width() const override { return inner_.hidden_width(); }
  std::string name() const override { return "selective"; }

 private:
  Backend& inner_;
  std::string bad_;
};

bool same_result(const GenerationResult& a, const GenerationResult& b) {
  return a.text == b.text && same_bits(a.states.pre, b.states.pre) && same_bits(a.states.last, b.states.last) &&
         same_bits(a.states.avg, b.states.avg) && same_bits(a.token_logprobs, b.token_logprobs);
}

}  // namespace

TEST_CASE("mock: deterministic per prompt and profile") {
  auto profile = small_profile();
  MockBackend a(profile), b(profile);
  for (const auto& q : profile.answers) {
    const auto req = vanilla_request(q);
    CHECK(same_result(a.generate(req), b.generate(req)));
  }
  profile.seed = 10;
  MockBackend c(profile);
  const auto req = vanilla_request(profile.answers[0]);
  CHECK_FALSE(same_bits(a.generate(req).states.last, c.generate(req).states.last));
}

TEST_CASE("mock: answers follow the question kind") {
  const auto profile = small_profile(60);
  MockBackend mock(profile);
  for (const auto& q : profile.answers) {
    const auto res = mock.generate(vanilla_request(q));
    CHECK(contains_answer(res.text, q.gold_answers) == (q.kind == KnowledgeKind::knowable));
    CHECK(res.h() == 16);
    CHECK(res.token_logprobs.size() >= 1);
    GenerationRequest cand;
    cand.prompt = PromptTemplates::builtin().render(PromptStyle::candidates, q.question);
    CHECK(mock.generate(cand).text == q.candidates_raw);
  }
}

TEST_CASE("mock: pooled vectors equal re-pooling the synthesized token states") {
  const auto profile = small_profile();
  MockBackend mock(profile);
  for (const auto& q : profile.answers) {
    const auto req = vanilla_request(q);
    const auto gen = mock.synthesize(req);
    const auto res = mock.generate(req);
    const std::size_t m = gen.token_states.size() - 1;
    std::vector<double> avg(profile.h, 0.0);
    for (std::size_t t = 1; t <= m; ++t) {
      for (std::size_t i = 0; i < profile.h; ++i) avg[i] += gen.token_states[t][i];
    }
    for (std::size_t i = 0; i < profile.h; ++i) {
      CHECK(res.states.avg[i] == doctest::Approx(avg[i] / static_cast<double>(m)).epsilon(1e-6));
    }
    CHECK(same_bits(res.states.pre, gen.token_states.front()));
    CHECK(same_bits(res.states.last, gen.token_states.back()));
  }
}

TEST_CASE("mock: multiple-choice answers and overconfident flips") {
  const auto profile = small_profile(80);
  MockBackend mock(profile);
  for (const auto& q : profile.answers) {
    const auto cands = parse_candidates(q.candidates_raw);
    const auto mc = build_mc(cands, 4, q.question, q.gold_answers);
    GenerationRequest req;
    req.prompt = mc.rendered_prompt;
    const auto gen = mock.synthesize(req);
    const bool expect_conf = q.kind == KnowledgeKind::knowable ||
                             (q.kind == KnowledgeKind::overconfident && q.mc_consistent);
    CHECK(gen.confident_cluster == expect_conf);
    CHECK(gen.text.size() >= 1);
    CHECK(gen.text[0] >= 'A');
    CHECK(gen.text[0] <= 'D');
  }
}

TEST_CASE("mock: error rate 1.0 fails every request") {
  auto profile = small_profile();
  profile.error_rate = 1.0;
  MockBackend mock(profile);
  std::vector<GenerationRequest> reqs;
  for (const auto& q : profile.answers) reqs.push_back(vanilla_request(q));
  const auto items = batch_generate(mock, reqs, 4, RetryPolicy{2, std::chrono::milliseconds(0), 1.0});
  for (const auto& item : items) {
    CHECK_FALSE(item.ok());
    REQUIRE(item.error.has_value());
    CHECK(item.error->code() == Errc::transport);
  }
}

TEST_CASE("mock: well separated clusters give near-perfect alignment") {
  const double align = mock_alignment(4.0, 0.5, 800, 400);
  MESSAGE("alignment at 4 sigma: " << align);
  CHECK(align >= 0.99);
}

TEST_CASE("mock: zero separation leaves the estimator at the class prior") {
  const double prior = 0.7;
  const double align = mock_alignment(0.0, prior, 1400, 2000);
  MESSAGE("alignment at 0 sigma: " << align);
  CHECK(std::abs(align - prior) <= 0.03);
}

TEST_CASE("dump backend: replays records bit-exactly") {
  const auto profile = small_profile(30);
  MockBackend mock(profile);
  const auto ds = generate_dataset(mock, profile.answers);
  DumpBackend replay(ds);
  CHECK(replay.hidden_width() == 16);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto req = vanilla_request(profile.answers[i]);
    const auto a = generate_with_states(replay, req);
    CHECK(a.text == ds.records[i].response);
    CHECK(same_bits(a.states.last, ds.records[i].states.last));
    CHECK(same_bits(a.states.avg, ds.records[i].states.avg));
    CHECK(same_bits(a.token_logprobs, ds.records[i].token_logprobs));
  }
  GenerationRequest by_prompt;
  by_prompt.prompt = "custom prompt";
  replay.add_prompt("custom prompt", ds.records[3].id);
  CHECK(replay.generate(by_prompt).text == ds.records[3].response);
  GenerationRequest unknown;
  unknown.prompt = "never seen";
  unknown.key = "nope";
  CHECK(error_code_of([&] { replay.generate(unknown); }) == Errc::missing_key);
}

TEST_CASE("generate_with_states: drops unrequested poolings and validates requests") {
  const auto profile = small_profile();
  MockBackend mock(profile);
  auto req = vanilla_request(profile.answers[0], false);
  req.poolings = {Pooling::avg};
  const auto res = generate_with_states(mock, req);
  CHECK(res.states.pre.empty());
  CHECK(res.states.last.empty());
  CHECK(res.states.avg.size() == 16);
  CHECK(res.token_logprobs.empty());
  req.prompt.clear();
  CHECK(error_code_of([&] { generate_with_states(mock, req); }) == Errc::invalid_argument);
  req = vanilla_request(profile.answers[0]);
  req.max_tokens = 0;
  CHECK(error_code_of([&] { generate_with_states(mock, req); }) == Errc::invalid_argument);
}

TEST_CASE("retry: transport errors are retried, others are not") {
  const RetryPolicy fast{3, std::chrono::milliseconds(0), 1.0};
  GenerationRequest req;
  req.prompt = "x";
  FlakyBackend transient(2, Errc::transport);
  CHECK(generate_with_states(transient, req, fast).text == "ok");
  CHECK(transient.calls() == 3);
  FlakyBackend exhausted(3, Errc::transport);
  CHECK(error_code_of([&] { generate_with_states(exhausted, req, fast); }) == Errc::transport);
  CHECK(exhausted.calls() == 3);
  FlakyBackend fatal(1, Errc::malformed_reply);
  CHECK(error_code_of([&] { generate_with_states(fatal, req, fast); }) == Errc::malformed_reply);
  CHECK(fatal.calls() == 1);
  CHECK(is_retryable(Error(Errc::transport, "")));
  CHECK_FALSE(is_retryable(Error(Errc::width_mismatch, "")));
}

TEST_CASE("batch: parallelism does not change results or order") {
  const auto profile = small_profile(50);
  MockBackend mock(profile);
  std::vector<GenerationRequest> reqs;
  for (const auto& q : profile.answers) reqs.push_back(vanilla_request(q));
  const auto serial = batch_generate(mock, reqs, 1);
  const auto parallel = batch_generate(mock, reqs, 8);
  REQUIRE(serial.size() == reqs.size());
  REQUIRE(parallel.size() == reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    REQUIRE(serial[i].ok());
    REQUIRE(parallel[i].ok());
    CHECK(same_result(*serial[i].result, *parallel[i].result));
    CHECK(same_result(*serial[i].result, mock.generate(reqs[i])));
  }
}

TEST_CASE("batch: a single failure stays at its index") {
  const auto profile = small_profile(10);
  MockBackend mock(profile);
  SelectiveBackend backend(mock, profile.answers[6].id);
  std::vector<GenerationRequest> reqs;
  for (const auto& q : profile.answers) reqs.push_back(vanilla_request(q));
  const auto items = batch_generate(backend, reqs, 4);
  for (std::size_t i = 0; i < items.size(); ++i) CHECK(items[i].ok() == (i != 6));
  REQUIRE(items[6].error.has_value());
  CHECK(items[6].error->code() == Errc::malformed_reply);
}

TEST_CASE("batch: parallel requests overlap latency") {
  auto profile = small_profile(100);
  profile.latency = std::chrono::milliseconds(10);
  MockBackend mock(profile);
  std::vector<GenerationRequest> reqs;
  for (const auto& q : profile.answers) reqs.push_back(vanilla_request(q));
  const auto time = [&](unsigned par) {
    const auto t0 = std::chrono::steady_clock::now();
    batch_generate(mock, reqs, par);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  const double serial = time(1);
  const double parallel = time(8);
  MESSAGE("serial " << serial << " s, parallel " << parallel << " s");
  CHECK(serial >= 1.0);
  CHECK(parallel < serial / 2);
}

TEST_CASE("http: request and reply JSON round trip") {
  GenerationRequest req;
  req.prompt = "p";
  req.max_tokens = 12;
  req.capture_layer = 7;
  req.poolings = {Pooling::pre, Pooling::avg};
  req.want_logprobs = true;
  req.key = "k1";
  const auto back = request_from_json(request_to_json(req));
  CHECK(back.prompt == "p");
  CHECK(back.max_tokens == 12);
  CHECK(back.capture_layer == 7);
  CHECK(back.poolings == req.poolings);
  CHECK(back.want_logprobs);
  CHECK(back.key == "k1");

  GenerationResult res;
  res.text = "t";
  res.states.pre = {1.5f, -2.0f};
  res.states.avg = {0.25f, 3.0f};
  res.token_logprobs = {-0.5f};
  const auto j = result_to_json(res);
  CHECK(j.at("h") == 2);
  CHECK_FALSE(j.at("states").contains("last"));
  const auto parsed = result_from_json(j);
  CHECK(same_result(parsed, res));

  auto bad = j;
  bad["states"]["pre"] = nlohmann::json::array({1.0});
  CHECK(error_code_of([&] { result_from_json(bad); }) == Errc::malformed_reply);
  CHECK(error_code_of([&] { result_from_json(nlohmann::json::array()); }) == Errc::malformed_reply);
  bad = j;
  bad.erase("text");
  CHECK(error_code_of([&] { result_from_json(bad); }) == Errc::malformed_reply);
}

TEST_CASE("http: binary reply codec") {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng.below(40);
    GenerationResult res;
    res.text = "answer " + std::to_string(trial);
    res.states.pre = kbtest::random_vector(rng, h, 3.0);
    if (rng.below(2)) res.states.last = kbtest::random_vector(rng, h, 3.0);
    res.states.avg = kbtest::random_vector(rng, h, 3.0);
    for (std::size_t t = 0; t < rng.below(5); ++t) res.token_logprobs.push_back(-static_cast<float>(rng.uniform()));
    const auto decoded = decode_binary_reply(encode_binary_reply(res, h));
    CHECK(same_result(decoded, res));
  }
  CHECK(error_code_of([] { decode_binary_reply("xx"); }) == Errc::malformed_reply);
}

TEST_CASE("http: client against a served mock in JSON and binary modes") {
  const auto profile = small_profile(12);
  MockBackend mock(profile);
  BackendServer server(mock);
  const int port = server.start();
  for (bool binary : {false, true}) {
    HttpBackendConfig cfg;
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
    cfg.binary_states = binary;
    cfg.timeout = std::chrono::milliseconds(5000);
    HttpBackend client(cfg);
    std::vector<GenerationRequest> reqs;
    for (const auto& q : profile.answers) reqs.push_back(vanilla_request(q));
    const auto items = batch_generate(client, reqs, 4);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      REQUIRE(items[i].ok());
      CHECK(same_result(*items[i].result, mock.generate(reqs[i])));
    }
    auto only_pre = reqs[0];
    only_pre.poolings = {Pooling::pre};
    const auto res = generate_with_states(client, only_pre);
    CHECK(res.states.pre.size() == 16);
    CHECK(res.states.last.empty());
  }
  server.stop();
}

TEST_CASE("http: status codes map to error kinds") {
  auto profile = small_profile(4);
  profile.error_rate = 1.0;
  MockBackend failing(profile);
  BackendServer server(failing);
  const int port = server.start();
  HttpBackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  HttpBackend client(cfg);
  // 503 from the server's transport failure is a transport error on the client.
  CHECK(error_code_of([&] { client.generate(vanilla_request(profile.answers[0])); }) == Errc::transport);
  // An invalid request is a 400, which is not retryable.
  GenerationRequest bad;
  bad.prompt = "";
  CHECK(error_code_of([&] { client.generate(bad); }) == Errc::invalid_argument);
  server.stop();

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.timeout = std::chrono::milliseconds(300);
  HttpBackend gone(cfg);
  CHECK(error_code_of([&] { gone.generate(vanilla_request(profile.answers[0])); }) == Errc::transport);
  CHECK(error_code_of([] { HttpBackend(HttpBackendConfig{}); }) == Errc::invalid_argument);
}
