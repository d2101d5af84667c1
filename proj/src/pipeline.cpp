#include "kbprobe/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kbprobe/http_backend.hpp"
#include "kbprobe/metrics.hpp"
#include "kbprobe/mock_backend.hpp"
#include "kbprobe/rng.hpp"

namespace kbprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSplitSalt[] = {0x452821E638D01377ULL, 0xBE5466CF34E90C6CULL,
                                        0xC0AC29B7C97C50DDULL};

constexpr std::array<SplitTag, 3> kSplits = {SplitTag::train, SplitTag::dev, SplitTag::test};

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void save_dump(const Dataset& ds, const fs::path& path) {
  ensure_parent(path);
  write_dump(ds, path);
}

void write_text(const fs::path& path, std::string_view text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(Errc::io, "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) {
    text += r.dump();
    text.push_back('\n');
  }
  write_text(path, text);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_argument,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void require(const fs::path& path, std::string_view producer) {
  if (!fs::exists(path)) {
    throw Error(Errc::missing_artifact, path.string() + " not found; run `kbprobe " +
                                            std::string(producer) + "` first");
  }
}

void append_timing(const RunLayout& layout, std::string_view command, double seconds) {
  ensure_parent(layout.timings());
  std::ofstream out(layout.timings(), std::ios::app);
  out << json{{"command", command}, {"seconds", seconds}}.dump() << '\n';
}

// Logs the wall-clock of one command; kept out of the deterministic artifacts.
class PhaseTimer {
 public:
  PhaseTimer(const RunLayout& layout, std::string command)
      : layout_(layout), command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}
  ~PhaseTimer() {
    const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start_;
    try {
      append_timing(layout_, command_, d.count());
    } catch (...) {
    }
  }

 private:
  const RunLayout& layout_;
  std::string command_;
  std::chrono::steady_clock::time_point start_;
};

const PromptTemplates& templates_for(const RunConfig& cfg, std::optional<PromptTemplates>& holder) {
  if (cfg.templates.empty()) return PromptTemplates::builtin();
  holder = PromptTemplates::load(cfg.templates);
  return *holder;
}

GenerationRequest base_request(const RunConfig& cfg) {
  GenerationRequest r;
  r.max_tokens = cfg.max_tokens;
  r.capture_layer = cfg.capture_layer;
  r.want_logprobs = cfg.want_logprobs;
  return r;
}

RetryPolicy retry_for(const RunConfig& cfg) {
  RetryPolicy p;
  if (cfg.backend.kind == BackendKind::mock) p.initial_backoff = std::chrono::milliseconds(1);
  return p;
}

json error_row(std::string_view id, std::string_view stage, const Error& e) {
  return {{"id", id}, {"stage", stage}, {"code", errc_name(e.code())}, {"message", e.what()}};
}

// ---- JSON for pipeline-local types ----

json candidates_to_json(const CandidateSet& c) {
  return {{"question_id", c.question_id}, {"raw", c.raw}, {"answers", c.answers}, {"alpha", c.alpha}};
}

CandidateSet candidates_from_json(const json& j) {
  CandidateSet c;
  c.question_id = j.at("question_id").get<std::string>();
  c.raw = j.at("raw").get<std::string>();
  c.answers = j.at("answers").get<std::vector<std::string>>();
  c.alpha = j.value("alpha", std::size_t{10});
  return c;
}

json mock_question_to_json(const MockQuestion& q) {
  return {{"id", q.id},
          {"question", q.question},
          {"gold_answers", q.gold_answers},
          {"freeform_answer", q.freeform_answer},
          {"candidates_raw", q.candidates_raw},
          {"kind", to_string(q.kind)},
          {"mc_consistent", q.mc_consistent}};
}

MockQuestion mock_question_from_json(const json& j) {
  MockQuestion q;
  q.id = j.at("id").get<std::string>();
  q.question = j.at("question").get<std::string>();
  q.gold_answers = j.at("gold_answers").get<std::vector<std::string>>();
  q.freeform_answer = j.at("freeform_answer").get<std::string>();
  q.candidates_raw = j.at("candidates_raw").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "knowable") q.kind = KnowledgeKind::knowable;
  else if (kind == "overconfident") q.kind = KnowledgeKind::overconfident;
  else if (kind == "unknowable") q.kind = KnowledgeKind::unknowable;
  else throw Error(Errc::invalid_argument, "unknown mock question kind '" + kind + "'");
  q.mc_consistent = j.at("mc_consistent").get<bool>();
  return q;
}

json metrics_to_json(const MetricsReport& r) {
  json j = {{"n", r.n},
            {"acc", r.acc},
            {"conf", r.conf_ratio},
            {"alignment", r.alignment},
            {"overconfidence", r.overconfidence},
            {"conservativeness", r.conservativeness},
            {"upr", r.upr ? json(*r.upr) : json(nullptr)},
            {"counts",
             {{"correct", r.counts.correct},
              {"confident", r.counts.confident},
              {"overconfident", r.counts.overconfident},
              {"conservative", r.counts.conservative},
              {"unknown_flagged", r.counts.unknown_flagged}}}};
  return j;
}

json deltas_to_json(const std::vector<MetricDelta>& deltas) {
  json out = json::array();
  for (const auto& d : deltas) {
    out.push_back({{"metric", d.name},
                   {"before", d.before ? json(*d.before) : json(nullptr)},
                   {"after", d.after ? json(*d.after) : json(nullptr)},
                   {"delta", d.delta ? json(*d.delta) : json(nullptr)},
                   {"improved_or_equal", d.improved_or_equal()}});
  }
  return out;
}

json seed_report_to_json(const SeedReport& s) {
  json j = {{"seed", s.seed}, {"epoch_loss", s.epoch_loss}, {"train_accuracy", s.train_accuracy}};
  if (s.dev) j["dev"] = metrics_to_json(*s.dev);
  return j;
}

// ---- verdict streams ----

std::vector<ConfidenceVerdict> read_verdicts(const fs::path& path) {
  std::vector<ConfidenceVerdict> out;
  for (const auto& j : read_jsonl(path)) out.push_back(j.get<ConfidenceVerdict>());
  return out;
}

void write_verdicts(const fs::path& path, const std::vector<ConfidenceVerdict>& verdicts) {
  std::vector<json> rows;
  rows.reserve(verdicts.size());
  for (const auto& v : verdicts) rows.emplace_back(v);
  write_jsonl(path, rows);
}

std::string seed_stream(std::uint64_t seed) { return "seed" + std::to_string(seed); }

std::vector<std::string> verdict_streams(const RunConfig& cfg, const RunLayout& layout) {
  std::vector<std::string> streams = {"ensemble"};
  for (auto s : cfg.train.seeds) streams.push_back(seed_stream(s));
  if (fs::exists(layout.verdicts("prob"))) streams.push_back("prob");
  return streams;
}

std::string mc_family(const RunConfig& cfg, int k) {
  switch (cfg.mc_estimator) {
    case McEstimatorMode::per_k: return "mc" + std::to_string(k);
    case McEstimatorMode::joint: return "mc_joint";
    case McEstimatorMode::freeform: return "free";
  }
  return "free";
}

Dataset filter_k(const Dataset& ds, std::optional<int> k) {
  Dataset out;
  out.h = ds.h;
  out.split_tag = ds.split_tag;
  for (const auto& r : ds.records) {
    if (!k || r.k == *k) out.records.push_back(r);
  }
  return out;
}

// ---- ingest / reformulate internals ----

struct GeneratedSplit {
  Dataset dataset;
  std::vector<QuestionRow> kept;
  std::vector<json> errors;
};

GeneratedSplit generate_freeform(const RunConfig& cfg, Backend& backend, const PromptTemplates& templates,
                                 const std::vector<QuestionRow>& questions, SplitTag split) {
  std::vector<GenerationRequest> requests;
  requests.reserve(questions.size());
  for (const auto& q : questions) {
    auto r = base_request(cfg);
    r.prompt = templates.render(cfg.prompt_style, q.question);
    r.key = q.id;
    requests.push_back(std::move(r));
  }
  auto items = batch_generate(backend, requests, cfg.backend.parallelism, retry_for(cfg));

  GeneratedSplit out;
  out.dataset.split_tag = split;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto& q = questions[i];
    if (!items[i].ok()) {
      out.errors.push_back(error_row(q.id, "generate", *items[i].error));
      continue;
    }
    auto& res = *items[i].result;
    try {
      auto rec = make_record(q.id, q.question, std::move(res.text), q.gold_answers, std::move(res.states),
                             cfg.prompt_style, std::move(res.token_logprobs), cfg.containment);
      rec.layer = cfg.capture_layer;
      if (out.dataset.h == 0) out.dataset.h = rec.states.h();
      if (rec.states.h() != out.dataset.h) {
        throw Error(Errc::width_mismatch, "state width " + std::to_string(rec.states.h()) +
                                              " differs from " + std::to_string(out.dataset.h));
      }
      out.dataset.records.push_back(std::move(rec));
      out.kept.push_back(q);
    } catch (const Error& e) {
      out.errors.push_back(error_row(q.id, "record", e));
    }
  }
  return out;
}

// Candidate lists plus the raw generations, kept as a dump so a dump
// backend can replay the whole run.
std::vector<CandidateSet> generate_candidates(const RunConfig& cfg, Backend& backend,
                                              const PromptTemplates& templates,
                                              const std::vector<QuestionRow>& questions,
                                              Dataset& generations, std::vector<json>& errors) {
  std::vector<GenerationRequest> requests;
  for (const auto& q : questions) {
    auto r = base_request(cfg);
    r.prompt = templates.render(PromptStyle::candidates, q.question);
    r.key = q.id + "#cand";
    requests.push_back(std::move(r));
  }
  auto items = batch_generate(backend, requests, cfg.backend.parallelism, retry_for(cfg));
  std::vector<CandidateSet> out;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (!items[i].ok()) {
      errors.push_back(error_row(questions[i].id, "candidates", *items[i].error));
      continue;
    }
    auto& res = *items[i].result;
    try {
      out.push_back(parse_candidates(res.text, cfg.alpha, cfg.dedupe, questions[i].id));
      auto rec = make_record(requests[i].key, questions[i].question, std::move(res.text), questions[i].gold_answers,
                             std::move(res.states), PromptStyle::candidates, std::move(res.token_logprobs),
                             cfg.containment);
      rec.layer = cfg.capture_layer;
      if (generations.h == 0) generations.h = rec.states.h();
      generations.records.push_back(std::move(rec));
    } catch (const Error& e) {
      errors.push_back(error_row(questions[i].id, "candidates", e));
    }
  }
  return out;
}

void write_errors(const fs::path& path, const std::vector<json>& errors) {
  if (errors.empty()) {
    std::error_code ec;
    fs::remove(path, ec);
    return;
  }
  write_jsonl(path, errors);
}

fs::path errors_path(const RunLayout& layout, std::string_view name) {
  return layout.root / "errors" / (std::string(name) + ".jsonl");
}

CommandResult reformulate_split(const RunConfig& cfg, const RunLayout& layout, Backend& backend,
                                const PromptTemplates& templates, SplitTag split) {
  CommandResult result;
  std::map<std::string, QuestionRow> by_id;
  for (auto& q : read_questions(layout.questions(split))) by_id.emplace(q.id, std::move(q));

  std::vector<json> errors;
  std::vector<McQuestion> mcs;
  std::vector<json> mc_rows;
  for (const auto& j : read_jsonl(layout.candidates(split))) {
    const auto cands = candidates_from_json(j);
    auto it = by_id.find(cands.question_id);
    if (it == by_id.end()) {
      errors.push_back({{"id", cands.question_id}, {"stage", "reformulate"}, {"code", "missing_key"},
                        {"message", "candidate set has no matching question"}});
      continue;
    }
    for (int k : cfg.calibration.k_set) {
      auto mc = build_mc(cands, static_cast<std::size_t>(k), it->second.question, it->second.gold_answers,
                         cfg.mc_style, templates, cfg.containment);
      mc_rows.emplace_back(mc);
      mcs.push_back(std::move(mc));
    }
  }
  write_jsonl(layout.mc_questions(split), mc_rows);

  std::vector<GenerationRequest> requests;
  requests.reserve(mcs.size());
  for (const auto& mc : mcs) {
    auto r = base_request(cfg);
    r.prompt = mc.rendered_prompt;
    r.key = mc.question_id + "#mc" + std::to_string(mc.k_requested);
    requests.push_back(std::move(r));
  }
  auto items = batch_generate(backend, requests, cfg.backend.parallelism, retry_for(cfg));

  Dataset ds;
  ds.split_tag = split;
  for (std::size_t i = 0; i < mcs.size(); ++i) {
    const auto& mc = mcs[i];
    const auto& q = by_id.at(mc.question_id);
    if (!items[i].ok()) {
      errors.push_back(error_row(requests[i].key, "generate_mc", *items[i].error));
      continue;
    }
    auto& res = *items[i].result;
    try {
      auto rec = make_record(requests[i].key, q.question, std::move(res.text), q.gold_answers,
                             std::move(res.states), cfg.mc_style, std::move(res.token_logprobs),
                             cfg.containment);
      rec.layer = cfg.capture_layer;
      rec.k = static_cast<int>(mc.k_requested);
      if (ds.h == 0) ds.h = rec.states.h();
      ds.records.push_back(std::move(rec));
    } catch (const Error& e) {
      errors.push_back(error_row(requests[i].key, "record_mc", e));
    }
  }
  ds.validate();
  save_dump(ds, layout.mc_dump(split));
  write_errors(errors_path(layout, std::string("reformulate_") + std::string(to_string(split))), errors);
  result.item_errors = errors.size();
  result.notes.push_back(std::string(to_string(split)) + ": " + std::to_string(ds.records.size()) +
                         " multiple-choice records");
  return result;
}

std::vector<MockQuestion> read_mock_answers(const fs::path& path) {
  std::vector<MockQuestion> out;
  for (const auto& j : read_jsonl(path)) out.push_back(mock_question_from_json(j));
  return out;
}

MockProfile mock_profile(const RunConfig& cfg) {
  MockProfile p;
  p.seed = cfg.seed;
  p.h = cfg.synth.h;
  p.separation = cfg.synth.separation;
  p.noise_sigma = cfg.synth.noise_sigma;
  p.error_rate = cfg.synth.error_rate;
  p.latency = cfg.synth.latency;
  p.layer = cfg.capture_layer;
  return p;
}

// ---- report internals ----

struct ScoredStream {
  MetricsReport original;
  MetricsReport calibrated;
};

std::map<std::string, std::uint8_t> verdict_map(const std::vector<ConfidenceVerdict>& vs) {
  std::map<std::string, std::uint8_t> m;
  for (const auto& v : vs) {
    if (v.k == 0) m[v.question_id] = v.c;
  }
  return m;
}

struct StreamVerdicts {
  std::map<std::string, std::uint8_t> original;
  std::map<std::string, std::uint8_t> calibrated;
};

StreamVerdicts load_stream(const RunLayout& layout, const std::string& stream) {
  require(layout.verdicts(stream), "predict");
  require(layout.calibrated(stream), "calibrate");
  return {verdict_map(read_verdicts(layout.verdicts(stream))),
          verdict_map(read_verdicts(layout.calibrated(stream)))};
}

// Scores the test records in `ids`; every one must have a verdict.
MetricsReport score(const Dataset& test, const std::set<std::string>& ids,
                    const std::map<std::string, std::uint8_t>& verdicts) {
  std::vector<Outcome> rows;
  rows.reserve(ids.size());
  for (const auto& r : test.records) {
    if (ids.contains(r.id)) rows.push_back({r.label, verdicts.at(r.id)});
  }
  return compute_metrics(rows);
}

ScoredStream score_stream(const Dataset& test, const std::set<std::string>& ids, const StreamVerdicts& v) {
  return {score(test, ids, v.original), score(test, ids, v.calibrated)};
}

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

std::string fmt_sci(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1e", x);
  return buf;
}

}  // namespace

// ---- enums ----

std::string_view to_string(BackendKind k) noexcept {
  switch (k) {
    case BackendKind::mock: return "mock";
    case BackendKind::http: return "http";
    case BackendKind::dump: return "dump";
  }
  return "?";
}

std::string_view to_string(McEstimatorMode m) noexcept {
  switch (m) {
    case McEstimatorMode::per_k: return "per_k";
    case McEstimatorMode::joint: return "joint";
    case McEstimatorMode::freeform: return "freeform";
  }
  return "?";
}

namespace {

BackendKind parse_backend_kind(std::string_view s) {
  if (s == "mock") return BackendKind::mock;
  if (s == "http") return BackendKind::http;
  if (s == "dump") return BackendKind::dump;
  throw Error(Errc::invalid_argument, "unknown backend '" + std::string(s) + "' (mock, http, dump)");
}

McEstimatorMode parse_mc_mode(std::string_view s) {
  if (s == "per_k") return McEstimatorMode::per_k;
  if (s == "joint") return McEstimatorMode::joint;
  if (s == "freeform") return McEstimatorMode::freeform;
  throw Error(Errc::invalid_argument, "unknown mc_estimator '" + std::string(s) + "' (per_k, joint, freeform)");
}

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(Errc::invalid_argument, "unknown config key '" + std::string(where) + "." + key + "'");
    }
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    check_keys(j, "config",
               {"seed", "pooling", "prompt_style", "mc_style", "train", "calibration", "mc_estimator",
                "backend", "synth", "alpha", "max_tokens", "capture_layer", "want_logprobs",
                "containment", "dedupe", "templates"});
    get_if(j, "seed", c.seed);
    if (j.contains("pooling")) c.pooling = parse_pooling(j["pooling"].get<std::string>());
    if (j.contains("prompt_style")) c.prompt_style = parse_prompt_style(j["prompt_style"].get<std::string>());
    if (j.contains("mc_style")) c.mc_style = parse_prompt_style(j["mc_style"].get<std::string>());
    if (j.contains("mc_estimator")) c.mc_estimator = parse_mc_mode(j["mc_estimator"].get<std::string>());
    get_if(j, "alpha", c.alpha);
    get_if(j, "max_tokens", c.max_tokens);
    get_if(j, "capture_layer", c.capture_layer);
    get_if(j, "want_logprobs", c.want_logprobs);
    if (j.contains("templates")) c.templates = j["templates"].get<std::string>();

    if (j.contains("train")) {
      const auto& t = j["train"];
      check_keys(t, "train", {"learning_rate", "epochs", "seeds", "batch_size", "adam_beta1", "adam_beta2",
                              "adam_eps", "hidden", "threads"});
      get_if(t, "learning_rate", c.train.learning_rate);
      get_if(t, "epochs", c.train.epochs);
      get_if(t, "seeds", c.train.seeds);
      get_if(t, "batch_size", c.train.batch_size);
      get_if(t, "adam_beta1", c.train.adam_beta1);
      get_if(t, "adam_beta2", c.train.adam_beta2);
      get_if(t, "adam_eps", c.train.adam_eps);
      get_if(t, "hidden", c.train.hidden);
      get_if(t, "threads", c.train.threads);
    }
    if (j.contains("calibration")) {
      const auto& k = j["calibration"];
      check_keys(k, "calibration", {"k_set", "beta"});
      get_if(k, "k_set", c.calibration.k_set);
      get_if(k, "beta", c.calibration.beta);
    }
    if (j.contains("backend")) {
      const auto& b = j["backend"];
      check_keys(b, "backend", {"kind", "endpoint", "timeout_ms", "bearer_token", "binary_states",
                                "parallelism", "dumps"});
      if (b.contains("kind")) c.backend.kind = parse_backend_kind(b["kind"].get<std::string>());
      get_if(b, "endpoint", c.backend.endpoint);
      if (b.contains("timeout_ms")) c.backend.timeout = std::chrono::milliseconds(b["timeout_ms"].get<long>());
      get_if(b, "bearer_token", c.backend.bearer_token);
      get_if(b, "binary_states", c.backend.binary_states);
      get_if(b, "parallelism", c.backend.parallelism);
      if (b.contains("dumps")) {
        c.backend.dumps.clear();
        for (const auto& p : b["dumps"]) c.backend.dumps.emplace_back(p.get<std::string>());
      }
    }
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      check_keys(s, "synth", {"h", "separation", "noise_sigma", "knowable_rate", "overconfident_rate",
                              "mc_flip_rate", "n_train_per_class", "n_dev", "n_test", "error_rate",
                              "latency_ms"});
      get_if(s, "h", c.synth.h);
      get_if(s, "separation", c.synth.separation);
      get_if(s, "noise_sigma", c.synth.noise_sigma);
      get_if(s, "knowable_rate", c.synth.knowable_rate);
      get_if(s, "overconfident_rate", c.synth.overconfident_rate);
      get_if(s, "mc_flip_rate", c.synth.mc_flip_rate);
      get_if(s, "n_train_per_class", c.synth.n_train_per_class);
      get_if(s, "n_dev", c.synth.n_dev);
      get_if(s, "n_test", c.synth.n_test);
      get_if(s, "error_rate", c.synth.error_rate);
      if (s.contains("latency_ms")) c.synth.latency = std::chrono::milliseconds(s["latency_ms"].get<long>());
    }
    if (j.contains("containment")) {
      const auto& n = j["containment"];
      check_keys(n, "containment", {"strip_articles", "strip_punctuation"});
      get_if(n, "strip_articles", c.containment.strip_articles);
      get_if(n, "strip_punctuation", c.containment.strip_punctuation);
    }
    if (j.contains("dedupe")) {
      const auto& d = j["dedupe"];
      check_keys(d, "dedupe", {"strip_trailing_period", "strip_articles"});
      get_if(d, "strip_trailing_period", c.dedupe.strip_trailing_period);
      get_if(d, "strip_articles", c.dedupe.strip_articles);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("bad config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json dumps = json::array();
  for (const auto& p : backend.dumps) dumps.push_back(p.string());
  return {{"seed", seed},
          {"pooling", kbprobe::to_string(pooling)},
          {"prompt_style", kbprobe::to_string(prompt_style)},
          {"mc_style", kbprobe::to_string(mc_style)},
          {"mc_estimator", kbprobe::to_string(mc_estimator)},
          {"alpha", alpha},
          {"max_tokens", max_tokens},
          {"capture_layer", capture_layer},
          {"want_logprobs", want_logprobs},
          {"templates", templates.string()},
          {"train",
           {{"learning_rate", train.learning_rate},
            {"epochs", train.epochs},
            {"seeds", train.seeds},
            {"batch_size", train.batch_size},
            {"adam_beta1", train.adam_beta1},
            {"adam_beta2", train.adam_beta2},
            {"adam_eps", train.adam_eps},
            {"hidden", train.hidden},
            {"threads", train.threads}}},
          {"calibration", {{"k_set", calibration.k_set}, {"beta", calibration.beta}}},
          {"backend",
           {{"kind", kbprobe::to_string(backend.kind)},
            {"endpoint", backend.endpoint},
            {"timeout_ms", backend.timeout.count()},
            {"bearer_token", backend.bearer_token},
            {"binary_states", backend.binary_states},
            {"parallelism", backend.parallelism},
            {"dumps", std::move(dumps)}}},
          {"synth",
           {{"h", synth.h},
            {"separation", synth.separation},
            {"noise_sigma", synth.noise_sigma},
            {"knowable_rate", synth.knowable_rate},
            {"overconfident_rate", synth.overconfident_rate},
            {"mc_flip_rate", synth.mc_flip_rate},
            {"n_train_per_class", synth.n_train_per_class},
            {"n_dev", synth.n_dev},
            {"n_test", synth.n_test},
            {"error_rate", synth.error_rate},
            {"latency_ms", synth.latency.count()}}},
          {"containment",
           {{"strip_articles", containment.strip_articles},
            {"strip_punctuation", containment.strip_punctuation}}},
          {"dedupe",
           {{"strip_trailing_period", dedupe.strip_trailing_period},
            {"strip_articles", dedupe.strip_articles}}}};
}

void RunConfig::validate() const {
  train.validate();
  calibration.validate();
  for (int k : calibration.k_set) {
    if (static_cast<std::size_t>(k) > kMaxOptions) {
      throw Error(Errc::invalid_argument, "k=" + std::to_string(k) + " exceeds " + std::to_string(kMaxOptions) +
                                              " options");
    }
  }
  if (!is_multiple_choice(mc_style)) {
    throw Error(Errc::invalid_argument, "mc_style must be mc_vanilla or mc_cot");
  }
  if (is_multiple_choice(prompt_style) || prompt_style == PromptStyle::candidates) {
    throw Error(Errc::invalid_argument, "prompt_style must be vanilla or cot");
  }
  if (alpha == 0) throw Error(Errc::invalid_argument, "alpha must be positive");
  if (max_tokens == 0) throw Error(Errc::invalid_argument, "max_tokens must be positive");
  if (backend.parallelism == 0) throw Error(Errc::invalid_argument, "backend.parallelism must be positive");
  const auto rate = [](double x, const char* name) {
    if (!(x >= 0.0 && x <= 1.0)) throw Error(Errc::invalid_argument, std::string(name) + " must lie in [0, 1]");
  };
  rate(synth.knowable_rate, "synth.knowable_rate");
  rate(synth.overconfident_rate, "synth.overconfident_rate");
  rate(synth.mc_flip_rate, "synth.mc_flip_rate");
  rate(synth.error_rate, "synth.error_rate");
  if (synth.h == 0) throw Error(Errc::invalid_argument, "synth.h must be positive");
  if (!(synth.noise_sigma > 0.0)) throw Error(Errc::invalid_argument, "synth.noise_sigma must be positive");
  if (synth.n_train_per_class == 0) throw Error(Errc::invalid_argument, "synth.n_train_per_class must be positive");
  if (synth.knowable_rate == 0.0 || synth.knowable_rate == 1.0) {
    throw Error(Errc::invalid_argument, "synth.knowable_rate must leave both classes non-empty");
  }
}

// ---- layout ----

fs::path RunLayout::questions(SplitTag s) const {
  return root / "data" / (std::string(to_string(s)) + "_questions.jsonl");
}
fs::path RunLayout::dump(SplitTag s) const { return root / "data" / (std::string(to_string(s)) + ".kbhs"); }
fs::path RunLayout::mc_dump(SplitTag s) const {
  return root / "data" / (std::string(to_string(s)) + "_mc.kbhs");
}
fs::path RunLayout::candidates_dump(SplitTag s) const {
  return root / "data" / (std::string(to_string(s)) + "_cand.kbhs");
}
fs::path RunLayout::candidates(SplitTag s) const {
  return root / "data" / (std::string(to_string(s)) + "_candidates.jsonl");
}
fs::path RunLayout::mc_questions(SplitTag s) const {
  return root / "mc" / (std::string(to_string(s)) + "_mc_questions.jsonl");
}
fs::path RunLayout::model(std::string_view family, std::uint64_t seed) const {
  return models() / (std::string(family) + "_seed" + std::to_string(seed) + ".kbmlp");
}
fs::path RunLayout::verdicts(std::string_view stream) const {
  return root / "verdicts" / (std::string(stream) + ".jsonl");
}
fs::path RunLayout::calibrated(std::string_view stream) const {
  return root / "calibrated" / (std::string(stream) + ".jsonl");
}
fs::path RunLayout::flips(std::string_view stream) const {
  return root / "calibrated" / (std::string(stream) + "_flips.jsonl");
}

std::vector<QuestionRow> read_questions(const fs::path& path) {
  std::vector<QuestionRow> out;
  std::set<std::string> seen;
  for (const auto& j : read_jsonl(path)) {
    QuestionRow q;
    try {
      q.id = j.at("id").get<std::string>();
      q.question = j.at("question").get<std::string>();
      q.gold_answers = j.at("gold_answers").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_argument, path.string() + ": question row: " + e.what());
    }
    if (!seen.insert(q.id).second) throw Error(Errc::duplicate_id, path.string() + ": duplicate id '" + q.id + "'");
    out.push_back(std::move(q));
  }
  return out;
}

void write_questions(const fs::path& path, const std::vector<QuestionRow>& rows) {
  std::vector<json> out;
  out.reserve(rows.size());
  for (const auto& q : rows) out.push_back({{"id", q.id}, {"question", q.question}, {"gold_answers", q.gold_answers}});
  write_jsonl(path, out);
}

fs::path make_run_dir(const fs::path& out) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "run-%Y%m%d-%H%M%S", &tm);
  fs::path dir = out / buf;
  // Two runs in the same second get a numeric suffix.
  for (int i = 2; fs::exists(dir); ++i) dir = out / (std::string(buf) + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

std::unique_ptr<Backend> make_backend(const RunConfig& cfg, const RunLayout& layout) {
  switch (cfg.backend.kind) {
    case BackendKind::mock: {
      auto profile = mock_profile(cfg);
      if (fs::exists(layout.mock_answers())) profile.answers = read_mock_answers(layout.mock_answers());
      return std::make_unique<MockBackend>(std::move(profile));
    }
    case BackendKind::http: {
      HttpBackendConfig hc;
      if (!cfg.backend.endpoint.empty()) {
        hc.endpoint = cfg.backend.endpoint;
      } else {
        hc = HttpBackendConfig::from_env();
      }
      hc.timeout = cfg.backend.timeout;
      hc.bearer_token = cfg.backend.bearer_token;
      hc.binary_states = cfg.backend.binary_states;
      return std::make_unique<HttpBackend>(std::move(hc));
    }
    case BackendKind::dump: {
      if (cfg.backend.dumps.empty()) throw Error(Errc::invalid_argument, "dump backend needs backend.dumps");
      auto b = std::make_unique<DumpBackend>();
      for (const auto& p : cfg.backend.dumps) {
        if (!fs::exists(p)) throw Error(Errc::missing_artifact, "dump " + p.string() + " not found");
        b->add(read_dump(p));
      }
      return b;
    }
  }
  throw Error(Errc::invalid_argument, "unknown backend kind");
}

// ---- commands ----

CommandResult cmd_ingest(const RunConfig& cfg, const RunLayout& layout, Backend& backend,
                         const fs::path& questions_path, SplitTag split,
                         std::optional<std::size_t> balance_per_class) {
  PhaseTimer timer(layout, "ingest:" + std::string(to_string(split)));
  if (!fs::exists(questions_path)) {
    throw Error(Errc::missing_artifact, "question file " + questions_path.string() + " not found");
  }
  std::optional<PromptTemplates> holder;
  const auto& templates = templates_for(cfg, holder);
  const auto questions = read_questions(questions_path);

  auto gen = generate_freeform(cfg, backend, templates, questions, split);
  Dataset ds = std::move(gen.dataset);
  std::vector<QuestionRow> kept = std::move(gen.kept);
  if (balance_per_class) {
    ds = balance(ds, *balance_per_class, cfg.seed);
    std::map<std::string, const QuestionRow*> by_id;
    for (const auto& q : kept) by_id.emplace(q.id, &q);
    std::vector<QuestionRow> selected;
    selected.reserve(ds.records.size());
    for (const auto& r : ds.records) selected.push_back(*by_id.at(r.id));
    kept = std::move(selected);
  }
  ds.validate();

  Dataset cand_ds;
  cand_ds.split_tag = split;
  auto cands = generate_candidates(cfg, backend, templates, kept, cand_ds, gen.errors);
  cand_ds.validate();
  std::vector<json> cand_rows;
  cand_rows.reserve(cands.size());
  for (const auto& c : cands) cand_rows.push_back(candidates_to_json(c));

  save_dump(ds, layout.dump(split));
  save_dump(cand_ds, layout.candidates_dump(split));
  write_questions(layout.questions(split), kept);
  write_jsonl(layout.candidates(split), cand_rows);
  write_errors(errors_path(layout, std::string("ingest_") + std::string(to_string(split))), gen.errors);

  CommandResult result;
  result.item_errors = gen.errors.size();
  result.notes.push_back(std::string(to_string(split)) + ": " + std::to_string(ds.records.size()) + " records (" +
                         std::to_string(ds.count_label(1)) + " correct), " + std::to_string(cands.size()) +
                         " candidate sets");
  return result;
}

CommandResult cmd_reformulate(const RunConfig& cfg, const RunLayout& layout, Backend& backend) {
  PhaseTimer timer(layout, "reformulate");
  std::optional<PromptTemplates> holder;
  const auto& templates = templates_for(cfg, holder);
  CommandResult result;
  bool any = false;
  for (auto split : kSplits) {
    if (!fs::exists(layout.candidates(split))) continue;
    require(layout.questions(split), "ingest");
    any = true;
    auto r = reformulate_split(cfg, layout, backend, templates, split);
    result.item_errors += r.item_errors;
    for (auto& n : r.notes) result.notes.push_back(std::move(n));
  }
  if (!any) require(layout.candidates(SplitTag::test), "ingest");
  return result;
}

CommandResult cmd_synth(const RunConfig& cfg, const RunLayout& layout) {
  PhaseTimer timer(layout, "synth");
  const auto& s = cfg.synth;
  CorpusSpec spec;
  spec.knowable_rate = s.knowable_rate;
  spec.overconfident_rate = s.overconfident_rate;
  spec.mc_flip_rate = s.mc_flip_rate;
  spec.alpha = cfg.alpha;
  spec.duplicates = cfg.alpha > 1 ? 1 : 0;

  const auto pool_has = [&](const std::vector<MockQuestion>& qs) {
    std::size_t pos = 0;
    for (const auto& q : qs) pos += q.kind == KnowledgeKind::knowable;
    return std::min(pos, qs.size() - pos) >= s.n_train_per_class;
  };

  // Train pool: just large enough that both classes reach n_train_per_class.
  const double minority = std::min(s.knowable_rate, 1.0 - s.knowable_rate);
  spec.n_questions = static_cast<std::size_t>(static_cast<double>(s.n_train_per_class) / minority * 1.1) + 32;
  std::vector<MockQuestion> train_pool;
  for (;;) {
    train_pool = synthesize_questions(spec, SplitMix64::mix(cfg.seed ^ kSplitSalt[0]), "train-");
    if (pool_has(train_pool)) break;
    spec.n_questions *= 2;
  }
  spec.n_questions = s.n_dev;
  auto dev = synthesize_questions(spec, SplitMix64::mix(cfg.seed ^ kSplitSalt[1]), "dev-");
  spec.n_questions = s.n_test;
  auto test = synthesize_questions(spec, SplitMix64::mix(cfg.seed ^ kSplitSalt[2]), "test-");

  std::vector<json> table;
  for (const auto* part : {&train_pool, &dev, &test}) {
    for (const auto& q : *part) table.push_back(mock_question_to_json(q));
  }
  write_jsonl(layout.mock_answers(), table);

  const auto to_rows = [](const std::vector<MockQuestion>& qs) {
    std::vector<QuestionRow> rows;
    rows.reserve(qs.size());
    for (const auto& q : qs) rows.push_back({q.id, q.question, q.gold_answers});
    return rows;
  };
  const auto pool_path = layout.root / "data" / "source" / "train_pool_questions.jsonl";
  write_questions(pool_path, to_rows(train_pool));
  write_questions(layout.root / "data" / "source" / "dev_questions.jsonl", to_rows(dev));
  write_questions(layout.root / "data" / "source" / "test_questions.jsonl", to_rows(test));

  RunConfig mock_cfg = cfg;
  mock_cfg.backend.kind = BackendKind::mock;
  auto backend = make_backend(mock_cfg, layout);

  CommandResult result;
  const auto merge = [&](CommandResult r) {
    result.item_errors += r.item_errors;
    for (auto& n : r.notes) result.notes.push_back(std::move(n));
  };
  merge(cmd_ingest(mock_cfg, layout, *backend, pool_path, SplitTag::train, s.n_train_per_class));
  if (s.n_dev > 0) {
    merge(cmd_ingest(mock_cfg, layout, *backend, layout.root / "data" / "source" / "dev_questions.jsonl",
                     SplitTag::dev));
  }
  merge(cmd_ingest(mock_cfg, layout, *backend, layout.root / "data" / "source" / "test_questions.jsonl",
                   SplitTag::test));
  merge(cmd_reformulate(mock_cfg, layout, *backend));
  return result;
}

CommandResult cmd_train(const RunConfig& cfg, const RunLayout& layout) {
  PhaseTimer timer(layout, "train");
  require(layout.dump(SplitTag::train), "synth` or `kbprobe ingest");
  const Dataset train_ds = read_dump(layout.dump(SplitTag::train), SplitTag::train);
  std::optional<Dataset> dev_ds;
  if (fs::exists(layout.dump(SplitTag::dev))) dev_ds = read_dump(layout.dump(SplitTag::dev), SplitTag::dev);

  std::vector<std::pair<std::string, std::optional<int>>> families = {{"free", std::nullopt}};
  std::optional<Dataset> train_mc;
  std::optional<Dataset> dev_mc;
  if (cfg.mc_estimator != McEstimatorMode::freeform) {
    require(layout.mc_dump(SplitTag::train), "reformulate");
    train_mc = read_dump(layout.mc_dump(SplitTag::train), SplitTag::train);
    if (fs::exists(layout.mc_dump(SplitTag::dev))) dev_mc = read_dump(layout.mc_dump(SplitTag::dev), SplitTag::dev);
    if (cfg.mc_estimator == McEstimatorMode::per_k) {
      for (int k : cfg.calibration.k_set) families.emplace_back("mc" + std::to_string(k), k);
    } else {
      families.emplace_back("mc_joint", std::nullopt);
    }
  }

  fs::create_directories(layout.models());
  json report = {{"pooling", to_string(cfg.pooling)}, {"families", json::object()}};
  CommandResult result;
  for (const auto& [family, k] : families) {
    const bool is_free = family == "free";
    Dataset fam_train = is_free ? train_ds : filter_k(*train_mc, k);
    std::optional<Dataset> fam_dev;
    if (is_free && dev_ds) fam_dev = *dev_ds;
    if (!is_free && dev_mc) fam_dev = filter_k(*dev_mc, k);
    if (fam_train.records.empty()) {
      throw Error(Errc::insufficient_records, "no training records for estimator family '" + family + "'");
    }
    auto trained = train(fam_train, cfg.pooling, cfg.train, fam_dev ? &*fam_dev : nullptr);
    for (const auto& m : trained.models) save_model(m, layout.model(family, m.seed));

    json fam = {{"n_train", fam_train.records.size()}, {"seeds", json::array()}};
    for (const auto& s : trained.report.seeds) fam["seeds"].push_back(seed_report_to_json(s));
    if (trained.report.dev_mean) fam["dev_mean"] = metrics_to_json(*trained.report.dev_mean);
    report["families"][family] = std::move(fam);

    double worst = 1.0;
    for (const auto& s : trained.report.seeds) worst = std::min(worst, s.train_accuracy);
    result.notes.push_back(family + ": " + std::to_string(trained.models.size()) + " seeds, min train acc " +
                           fmt(worst));
  }
  write_text(layout.train_report(), report.dump(2) + "\n");
  return result;
}

CommandResult cmd_predict(const RunConfig& cfg, const RunLayout& layout) {
  PhaseTimer timer(layout, "predict");
  require(layout.dump(SplitTag::test), "synth` or `kbprobe ingest");
  const Dataset test = read_dump(layout.dump(SplitTag::test), SplitTag::test);
  std::optional<Dataset> test_mc;
  if (fs::exists(layout.mc_dump(SplitTag::test))) test_mc = read_dump(layout.mc_dump(SplitTag::test), SplitTag::test);

  std::map<std::string, std::vector<EstimatorModel>> models;
  const auto load_family = [&](const std::string& family) -> const std::vector<EstimatorModel>& {
    auto it = models.find(family);
    if (it != models.end()) return it->second;
    std::vector<EstimatorModel> ms;
    for (auto seed : cfg.train.seeds) {
      require(layout.model(family, seed), "train");
      ms.push_back(load_model(layout.model(family, seed)));
      if (ms.back().h() != test.h) {
        throw Error(Errc::dimension_mismatch, "model " + layout.model(family, seed).string() + " expects h=" +
                                                  std::to_string(ms.back().h()) + ", test data has h=" +
                                                  std::to_string(test.h));
      }
    }
    return models.emplace(family, std::move(ms)).first->second;
  };

  const std::size_t n_seeds = cfg.train.seeds.size();
  std::vector<ConfidenceVerdict> ensemble;
  std::vector<std::vector<ConfidenceVerdict>> per_seed(n_seeds);
  const auto emit = [&](const HiddenStateRecord& r, std::string question_id, int k,
                        const std::vector<EstimatorModel>& ms) {
    const auto pred = predict(ms, r.states.get(cfg.pooling));
    ensemble.push_back({question_id, k, pred.c, VerdictSource::estimator});
    for (std::size_t s = 0; s < n_seeds; ++s) per_seed[s].push_back({question_id, k, pred.votes[s], VerdictSource::estimator});
  };

  const auto& free = load_family("free");
  for (const auto& r : test.records) emit(r, r.id, 0, free);
  std::set<int> ks(cfg.calibration.k_set.begin(), cfg.calibration.k_set.end());
  if (test_mc) {
    for (const auto& r : test_mc->records) {
      if (!ks.contains(r.k)) continue;
      const auto hash = r.id.rfind("#mc");
      const std::string qid = hash == std::string::npos ? r.id : r.id.substr(0, hash);
      emit(r, qid, r.k, load_family(mc_family(cfg, r.k)));
    }
  }

  write_verdicts(layout.verdicts("ensemble"), ensemble);
  for (std::size_t s = 0; s < n_seeds; ++s) write_verdicts(layout.verdicts(seed_stream(cfg.train.seeds[s])), per_seed[s]);

  CommandResult result;
  result.notes.push_back("test: " + std::to_string(test.records.size()) + " original and " +
                         std::to_string(ensemble.size() - test.records.size()) + " multiple-choice verdicts");

  // Token-probability baseline, threshold fitted per format on train + dev.
  const auto has_logprobs = [](const Dataset& d) {
    return std::all_of(d.records.begin(), d.records.end(), [](const auto& r) { return !r.token_logprobs.empty(); });
  };
  if (has_logprobs(test) && (!test_mc || has_logprobs(*test_mc)) && fs::exists(layout.dump(SplitTag::train))) {
    std::map<int, std::vector<ProbRow>> fit_rows;
    const auto add_rows = [&](const fs::path& p, SplitTag split) {
      if (!fs::exists(p)) return;
      for (const auto& r : read_dump(p, split).records) {
        if (r.token_logprobs.empty()) continue;
        fit_rows[r.k].push_back({mean_token_prob(r.token_logprobs), r.label});
      }
    };
    add_rows(layout.dump(SplitTag::train), SplitTag::train);
    add_rows(layout.dump(SplitTag::dev), SplitTag::dev);
    add_rows(layout.mc_dump(SplitTag::train), SplitTag::train);
    add_rows(layout.mc_dump(SplitTag::dev), SplitTag::dev);
    std::map<int, double> thresholds;
    for (const auto& [k, rows] : fit_rows) thresholds[k] = fit_threshold(rows).threshold;

    std::vector<ConfidenceVerdict> prob;
    bool complete = thresholds.contains(0);
    for (const auto& r : test.records) {
      if (!complete) break;
      prob.push_back({r.id, 0, static_cast<std::uint8_t>(prob_confidence(r.token_logprobs, thresholds[0])),
                      VerdictSource::prob_baseline});
    }
    if (complete && test_mc) {
      for (const auto& r : test_mc->records) {
        if (!ks.contains(r.k)) continue;
        if (!thresholds.contains(r.k)) {
          complete = false;
          break;
        }
        const std::string qid = r.id.substr(0, r.id.rfind("#mc"));
        prob.push_back({qid, r.k, static_cast<std::uint8_t>(prob_confidence(r.token_logprobs, thresholds[r.k])),
                        VerdictSource::prob_baseline});
      }
    }
    if (complete) {
      write_verdicts(layout.verdicts("prob"), prob);
      json th = json::object();
      for (const auto& [k, t] : thresholds) th[k == 0 ? "original" : "mc_" + std::to_string(k)] = t;
      write_text(layout.root / "verdicts" / "prob_thresholds.json", th.dump(2) + "\n");
    } else {
      result.notes.push_back("probability baseline skipped: no fitting data for some format");
    }
  } else {
    result.notes.push_back("probability baseline skipped: token logprobs absent");
  }
  return result;
}

CommandResult cmd_calibrate(const RunConfig& cfg, const RunLayout& layout) {
  PhaseTimer timer(layout, "calibrate");
  require(layout.verdicts("ensemble"), "predict");
  CommandResult result;
  for (const auto& stream : verdict_streams(cfg, layout)) {
    require(layout.verdicts(stream), "predict");
    const auto all = read_verdicts(layout.verdicts(stream));
    std::vector<ConfidenceVerdict> originals, mc;
    for (const auto& v : all) (v.k == 0 ? originals : mc).push_back(v);
    const auto run = calibrate_run(originals, mc, cfg.calibration);

    write_verdicts(layout.calibrated(stream), run.calibrated);
    std::vector<json> flips;
    for (const auto& f : run.flips) flips.emplace_back(f);
    write_jsonl(layout.flips(stream), flips);
    std::vector<json> errors;
    for (const auto& e : run.errors) {
      errors.push_back({{"id", e.question_id}, {"stage", "calibrate"}, {"code", "missing_key"}, {"message", e.message}});
    }
    write_errors(errors_path(layout, "calibrate_" + stream), errors);
    result.item_errors += errors.size();
    result.notes.push_back(stream + ": " + std::to_string(run.flips.size()) + " of " +
                           std::to_string(originals.size()) + " verdicts revoked");
  }
  return result;
}

CommandResult cmd_report(const RunConfig& cfg, const RunLayout& layout) {
  PhaseTimer timer(layout, "report");
  require(layout.calibrated("ensemble"), "calibrate");
  require(layout.dump(SplitTag::test), "synth` or `kbprobe ingest");
  const Dataset test = read_dump(layout.dump(SplitTag::test), SplitTag::test);

  // Every row is scored on the same questions: those with an original and a
  // calibrated verdict in every stream. Per-item errors upstream shrink it.
  std::map<std::string, StreamVerdicts> streams;
  streams.emplace("ensemble", load_stream(layout, "ensemble"));
  for (auto seed : cfg.train.seeds) streams.emplace(seed_stream(seed), load_stream(layout, seed_stream(seed)));
  if (fs::exists(layout.verdicts("prob"))) streams.emplace("prob", load_stream(layout, "prob"));
  std::set<std::string> ids;
  for (const auto& r : test.records) {
    const bool everywhere = std::all_of(streams.begin(), streams.end(), [&](const auto& kv) {
      return kv.second.original.contains(r.id) && kv.second.calibrated.contains(r.id);
    });
    if (everywhere) ids.insert(r.id);
  }
  if (ids.empty()) throw Error(Errc::missing_key, "no test question has a verdict in every stream");

  std::vector<NamedReport> rows;
  json jrows = json::array();
  std::vector<std::pair<std::string, std::vector<MetricDelta>>> comparisons;

  const auto ens = score_stream(test, ids, streams.at("ensemble"));
  rows.emplace_back("Vanilla", ens.original);
  rows.emplace_back("C3", ens.calibrated);
  comparisons.emplace_back("Vanilla vs C3 (seed ensemble)", compare_runs(ens.original, ens.calibrated));

  std::vector<MetricsReport> seed_orig, seed_cal;
  json per_seed = json::array();
  for (auto seed : cfg.train.seeds) {
    const auto sc = score_stream(test, ids, streams.at(seed_stream(seed)));
    seed_orig.push_back(sc.original);
    seed_cal.push_back(sc.calibrated);
    per_seed.push_back({{"seed", seed}, {"vanilla", metrics_to_json(sc.original)}, {"c3", metrics_to_json(sc.calibrated)}});
  }
  const auto mean_orig = average_reports(seed_orig);
  const auto mean_cal = average_reports(seed_cal);
  rows.emplace_back("Vanilla (seed mean)", mean_orig);
  rows.emplace_back("C3 (seed mean)", mean_cal);
  comparisons.emplace_back("Vanilla vs C3 (seed mean)", compare_runs(mean_orig, mean_cal));

  if (streams.contains("prob")) {
    const auto prob = score_stream(test, ids, streams.at("prob"));
    rows.emplace_back("Prob.", prob.original);
    rows.emplace_back("Prob. + C3", prob.calibrated);
    comparisons.emplace_back("Prob. vs Prob. + C3", compare_runs(prob.original, prob.calibrated));
  }

  // Identity panel. Mean rows are averages of per-seed fractions and still
  // satisfy the linear identities; UPR's form is nonlinear there.
  std::string panel = "| Row | align + overcon + conserv - 1 | max residual | status |\n|---|---|---|---|\n";
  json jident = json::array();
  for (const auto& [name, r] : rows) {
    const auto res = check_identities(r);
    const bool is_mean = name.find("seed mean") != std::string::npos;
    const double worst = is_mean ? std::max({std::abs(res.partition), std::abs(res.alignment_form),
                                             std::abs(res.conservative_form)})
                                 : res.max_abs();
    if (!(worst <= 1e-9)) {
      throw Error(Errc::identity_violation, "metric identities fail for row '" + name + "' (residual " +
                                                fmt_sci(worst) + "); refusing to write the report");
    }
    panel += "| " + name + " | " + fmt_sci(res.partition) + " | " + fmt_sci(worst) + " | OK |\n";
    jident.push_back({{"row", name}, {"partition", res.partition}, {"max_abs", worst}, {"ok", true}});
    jrows.push_back({{"name", name}, {"metrics", metrics_to_json(r)}});
  }

  // Candidate-set statistics on the test split.
  std::vector<CandidateSet> cands;
  std::vector<std::vector<std::string>> gold;
  if (fs::exists(layout.candidates(SplitTag::test)) && fs::exists(layout.questions(SplitTag::test))) {
    std::map<std::string, std::vector<std::string>> gold_by_id;
    for (auto& q : read_questions(layout.questions(SplitTag::test))) gold_by_id.emplace(q.id, std::move(q.gold_answers));
    for (const auto& j : read_jsonl(layout.candidates(SplitTag::test))) {
      auto c = candidates_from_json(j);
      auto it = gold_by_id.find(c.question_id);
      if (it == gold_by_id.end()) continue;
      gold.push_back(it->second);
      cands.push_back(std::move(c));
    }
  }

  std::string md;
  md += "# kbprobe report\n\n";
  md += "- test questions scored: " + std::to_string(ids.size()) + " of " + std::to_string(test.records.size()) +
        "\n";
  md += "- pooling: " + std::string(to_string(cfg.pooling)) + "\n";
  md += "- prompt style: " + std::string(to_string(cfg.prompt_style)) + ", multiple-choice style: " +
        std::string(to_string(cfg.mc_style)) + "\n";
  md += "- multiple-choice estimator: " + std::string(to_string(cfg.mc_estimator)) + "\n";
  std::string kset;
  for (std::size_t i = 0; i < cfg.calibration.k_set.size(); ++i) {
    kset += (i ? "," : "") + std::to_string(cfg.calibration.k_set[i]);
  }
  md += "- K = {" + kset + "}, beta = " + std::to_string(cfg.calibration.beta) + "\n";
  std::string seeds;
  for (std::size_t i = 0; i < cfg.train.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(cfg.train.seeds[i]);
  md += "- estimator seeds: " + seeds + "\n\n";
  md += "## Confidence metrics (%)\n\n" + render_markdown_table(rows) + "\n";
  json jcmp = json::array();
  for (const auto& [title, deltas] : comparisons) {
    md += "## " + title + "\n\n" + render_delta_markdown(deltas) + "\n";
    jcmp.push_back({{"title", title}, {"deltas", deltas_to_json(deltas)}});
  }
  md += "## Identity checks\n\n" + panel + "\n";

  json jcov = json::object();
  if (!cands.empty()) {
    std::size_t k_max = 1;
    for (const auto& c : cands) k_max = std::max(k_max, c.answers.size());
    const auto curve = topk_gold_coverage(cands, gold, k_max, cfg.containment);
    const double mean_unique = mean_unique_candidates(cands);
    md += "## Candidate sets\n\n";
    md += "- mean unique candidates: " + fmt(mean_unique, 2) + " (alpha = " + std::to_string(cfg.alpha) + ")\n\n";
    md += "| k | gold coverage (%) |\n|---|---|\n";
    for (std::size_t k = 1; k <= curve.size(); ++k) md += "| " + std::to_string(k) + " | " + fmt(100.0 * curve[k - 1], 2) + " |\n";
    md += "\n";
    jcov = {{"mean_unique_candidates", mean_unique}, {"topk_gold_coverage", curve}};
  }
  const auto budget = inference_call_budget(cfg.calibration);
  md += "## Inference cost\n\n- extra calls per question for C3: " + std::to_string(budget) +
        " (one candidate generation, " + std::to_string(cfg.calibration.k_set.size()) + " multiple-choice)\n";

  if (fs::exists(layout.train_report())) {
    const auto tr = json::parse(read_text(layout.train_report()));
    md += "\n## Training\n\n| Estimator | seed | train acc (%) | final loss |\n|---|---|---|---|\n";
    for (const auto& [family, fam] : tr["families"].items()) {
      for (const auto& s : fam["seeds"]) {
        const auto& losses = s["epoch_loss"];
        md += "| " + family + " | " + std::to_string(s["seed"].get<std::uint64_t>()) + " | " +
              fmt(100.0 * s["train_accuracy"].get<double>(), 2) + " | " +
              fmt(losses.empty() ? 0.0 : losses.back().get<double>()) + " |\n";
      }
    }
  }

  json jreport = {{"n_test", test.records.size()},
                  {"n_scored", ids.size()},
                  {"rows", jrows},
                  {"per_seed", per_seed},
                  {"comparisons", jcmp},
                  {"identities", jident},
                  {"candidates", jcov},
                  {"inference_call_budget", budget},
                  {"config", cfg.to_json()}};

  write_text(layout.report_dir() / "report.md", md);
  write_text(layout.report_dir() / "report.csv", render_csv(rows));
  write_text(layout.report_dir() / "report.json", jreport.dump(2) + "\n");

  CommandResult result;
  if (ids.size() < test.records.size()) {
    result.notes.push_back("scored " + std::to_string(ids.size()) + " of " + std::to_string(test.records.size()) +
                           " test questions; the rest lack verdicts after per-item errors");
  }
  const auto& headline = comparisons.front().second;
  for (const auto& d : headline) {
    if (d.name.starts_with("UPR") || d.name.starts_with("Overcon") || d.name.starts_with("Align")) {
      result.notes.push_back(d.name + " " + format_percent(d.before) + " -> " + format_percent(d.after));
    }
  }
  return result;
}

CommandResult run_synthetic_study(const RunConfig& cfg, const RunLayout& layout) {
  CommandResult total;
  const auto merge = [&](CommandResult r) {
    total.item_errors += r.item_errors;
    for (auto& n : r.notes) total.notes.push_back(std::move(n));
  };
  merge(cmd_synth(cfg, layout));
  merge(cmd_train(cfg, layout));
  merge(cmd_predict(cfg, layout));
  merge(cmd_calibrate(cfg, layout));
  merge(cmd_report(cfg, layout));
  return total;
}

}  // namespace kbprobe
