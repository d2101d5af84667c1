#include "kbprobe/mock_backend.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <thread>
#include <unordered_set>

#include "kbprobe/rng.hpp"

namespace kbprobe {

namespace {

constexpr std::array<std::string_view, 48> kVocab = {
    "amber",  "basalt", "cobalt", "delta",  "ember",   "fjord",  "garnet", "harbor",
    "indigo", "juniper", "kestrel", "lagoon", "meadow", "nickel", "onyx",  "pewter",
    "quartz", "russet", "saffron", "tundra", "umber",  "violet", "walnut", "xenon",
    "yarrow", "zephyr", "alder",  "bramble", "cedar",  "dune",   "egret",  "falcon",
    "glacier", "heron",  "iris",   "jasper", "kelp",    "linden", "marsh",  "nettle",
    "oriole", "prairie", "quill",  "raven",  "sorrel",  "thistle", "upland", "vesper"};

constexpr std::uint64_t kDirectionSalt = 0x243F6A8885A308D3ULL;
constexpr std::uint64_t kErrorSalt = 0x13198A2E03707344ULL;

std::string two_words(SplitMix64& rng) {
  const auto a = rng.below(kVocab.size());
  auto b = rng.below(kVocab.size() - 1);
  if (b >= a) ++b;
  std::string s(kVocab[a]);
  s.push_back(' ');
  s += kVocab[b];
  return s;
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// Answers that neither collide with each other nor contain the gold answer.
std::string fresh_answer(SplitMix64& rng, const std::vector<std::string>& gold,
                         const std::vector<std::string>& taken) {
  for (;;) {
    std::string cand = capitalize(two_words(rng));
    if (contains_answer(cand, gold)) continue;
    const auto key = dedupe_key(cand);
    bool clash = false;
    for (const auto& t : taken) clash = clash || dedupe_key(t) == key;
    if (!clash) return cand;
  }
}

std::string join_candidates(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += "; ";
    out += items[i];
  }
  return out;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\n' || c == '\t';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

}  // namespace

std::string_view to_string(KnowledgeKind k) noexcept {
  switch (k) {
    case KnowledgeKind::knowable: return "knowable";
    case KnowledgeKind::unknowable: return "unknowable";
    case KnowledgeKind::overconfident: return "overconfident";
  }
  return "?";
}

std::vector<MockQuestion> synthesize_questions(const CorpusSpec& spec, std::uint64_t seed,
                                               std::string_view id_prefix) {
  if (spec.alpha == 0 || spec.duplicates >= spec.alpha) {
    throw Error(Errc::invalid_argument, "corpus spec needs alpha > duplicates");
  }
  SplitMix64 rng(seed);
  std::vector<MockQuestion> out;
  out.reserve(spec.n_questions);
  const std::size_t unique = spec.alpha - spec.duplicates;
  for (std::size_t i = 0; i < spec.n_questions; ++i) {
    MockQuestion q;
    q.id = std::string(id_prefix) + std::to_string(i);
    q.question = "Which codename was assigned to project " + q.id + "?";
    q.gold_answers = {capitalize(two_words(rng))};

    if (rng.uniform() < spec.knowable_rate) {
      q.kind = KnowledgeKind::knowable;
    } else {
      q.kind = rng.uniform() < spec.overconfident_rate ? KnowledgeKind::overconfident
                                                        : KnowledgeKind::unknowable;
      if (q.kind == KnowledgeKind::overconfident) q.mc_consistent = rng.uniform() >= spec.mc_flip_rate;
    }

    std::vector<std::string> cands;
    if (q.kind == KnowledgeKind::knowable) {
      cands.push_back(q.gold_answers.front());
      q.freeform_answer = q.gold_answers.front();
    } else {
      q.freeform_answer = fresh_answer(rng, q.gold_answers, cands);
      cands.push_back(q.freeform_answer);
    }
    while (cands.size() < unique) cands.push_back(fresh_answer(rng, q.gold_answers, cands));
    if (q.kind != KnowledgeKind::knowable && unique > 1 && rng.uniform() < spec.gold_in_candidates_rate) {
      cands[1 + rng.below(unique - 1)] = q.gold_answers.front();
    }
    // Case/period variants of earlier entries, placed after their original.
    for (std::size_t d = 0; d < spec.duplicates; ++d) {
      const std::size_t src = rng.below(cands.size());
      std::string dup = cands[src];
      std::transform(dup.begin(), dup.end(), dup.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      dup.push_back('.');
      const std::size_t pos = src + 1 + rng.below(cands.size() - src);
      cands.insert(cands.begin() + static_cast<std::ptrdiff_t>(pos), std::move(dup));
    }
    q.candidates_raw = join_candidates(cands);
    out.push_back(std::move(q));
  }
  return out;
}

ParsedPrompt parse_prompt(std::string_view prompt, const PromptTemplates& templates) {
  ParsedPrompt parsed;
  std::size_t best = 0;
  for (auto style : {PromptStyle::vanilla, PromptStyle::cot, PromptStyle::mc_vanilla,
                     PromptStyle::mc_cot, PromptStyle::candidates}) {
    const auto& t = templates.get(style);
    const auto prefix = std::string_view(t).substr(0, t.find('{'));
    if (prefix.size() > best && prompt.starts_with(prefix)) {
      best = prefix.size();
      parsed.style = style;
    }
  }

  constexpr std::string_view kQuestion = "Question: ";
  const auto qpos = prompt.find(kQuestion);
  if (qpos == std::string_view::npos) return parsed;
  auto rest = prompt.substr(qpos + kQuestion.size());
  auto eol = rest.find('\n');
  parsed.question = std::string(rest.substr(0, eol));
  while (eol != std::string_view::npos) {
    rest = rest.substr(eol + 1);
    eol = rest.find('\n');
    const auto line = rest.substr(0, eol);
    if (line.size() >= 3 && line[0] >= 'A' && line[0] <= 'Z' && line[1] == '.' && line[2] == ' ') {
      parsed.options.push_back({line[0], std::string(line.substr(3))});
    } else {
      break;
    }
  }
  return parsed;
}

MockBackend::MockBackend(MockProfile profile) : profile_(std::move(profile)) {
  if (profile_.h == 0) throw Error(Errc::invalid_argument, "mock profile needs h > 0");
  SplitMix64 rng(profile_.seed ^ kDirectionSalt);
  std::vector<double> d(profile_.h);
  double norm = 0.0;
  for (auto& x : d) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  direction_.resize(profile_.h);
  for (std::size_t i = 0; i < profile_.h; ++i) direction_[i] = static_cast<float>(d[i] / norm);
  for (std::size_t i = 0; i < profile_.answers.size(); ++i) {
    by_question_.emplace(profile_.answers[i].question, i);
  }
}

const MockQuestion* MockBackend::lookup(std::string_view question) const {
  auto it = by_question_.find(std::string(question));
  return it == by_question_.end() ? nullptr : &profile_.answers[it->second];
}

MockGeneration MockBackend::synthesize(const GenerationRequest& request) const {
  const auto parsed = parse_prompt(request.prompt);
  const std::uint64_t prompt_seed = SplitMix64::mix(profile_.seed ^ fnv1a64(request.prompt));
  SplitMix64 rng(prompt_seed);

  MockQuestion fallback;
  const MockQuestion* q = lookup(parsed.question);
  if (q == nullptr) {
    // Unknown question: answer with a hash-derived wrong guess.
    fallback.question = parsed.question;
    fallback.gold_answers = {"\x01"};
    fallback.freeform_answer = capitalize(two_words(rng));
    fallback.candidates_raw = fallback.freeform_answer;
    q = &fallback;
  }

  MockGeneration gen;
  const bool mc = is_multiple_choice(parsed.style);
  switch (q->kind) {
    case KnowledgeKind::knowable: gen.confident_cluster = true; break;
    case KnowledgeKind::unknowable: gen.confident_cluster = false; break;
    case KnowledgeKind::overconfident: gen.confident_cluster = !mc || q->mc_consistent; break;
  }

  if (parsed.style == PromptStyle::candidates) {
    gen.text = q->candidates_raw;
  } else if (mc) {
    // Knowable questions pick the gold option; the rest pick the first wrong one.
    const McOption* pick = parsed.options.empty() ? nullptr : &parsed.options.front();
    for (const auto& o : parsed.options) {
      const bool gold = contains_answer(o.text, q->gold_answers);
      if (gold == (q->kind == KnowledgeKind::knowable)) {
        pick = &o;
        break;
      }
    }
    gen.text = pick ? std::string(1, pick->letter) + ". " + pick->text : std::string("A");
    if (parsed.style == PromptStyle::mc_cot) gen.text = "So, the correct answer is " + gen.text;
  } else if (parsed.style == PromptStyle::cot) {
    gen.text = "Recalling the project records, the codename is " + q->freeform_answer + ".";
  } else {
    gen.text = q->freeform_answer;
  }

  const std::size_t m = std::clamp<std::size_t>(count_words(gen.text), 1, request.max_tokens);
  const double sign = gen.confident_cluster ? 1.0 : -1.0;
  const double shift = sign * profile_.separation * profile_.noise_sigma;
  gen.token_states.resize(m + 1);
  for (auto& state : gen.token_states) {
    state.resize(profile_.h);
    for (std::size_t i = 0; i < profile_.h; ++i) {
      state[i] = static_cast<float>(shift * direction_[i] + profile_.noise_sigma * rng.normal());
    }
  }
  if (request.want_logprobs) {
    const double lo = gen.confident_cluster ? 0.55 : 0.15;
    const double hi = gen.confident_cluster ? 0.99 : 0.85;
    for (std::size_t t = 0; t < m; ++t) {
      gen.token_logprobs.push_back(static_cast<float>(std::log(rng.uniform(lo, hi))));
    }
  }
  return gen;
}

GenerationResult MockBackend::generate(const GenerationRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  if (profile_.error_rate > 0.0) {
    SplitMix64 err(SplitMix64::mix(profile_.seed ^ fnv1a64(request.prompt) ^ kErrorSalt));
    if (err.uniform() < profile_.error_rate) throw Error(Errc::transport, "mock: injected transport failure");
  }
  if (profile_.latency.count() > 0) std::this_thread::sleep_for(profile_.latency);

  auto gen = synthesize(request);
  GenerationResult out;
  out.text = std::move(gen.text);
  out.states = pool_states(gen.token_states, 1);
  out.token_logprobs = std::move(gen.token_logprobs);
  for (auto p : {Pooling::pre, Pooling::last, Pooling::avg}) {
    if (!request.wants(p)) out.states.get(p).clear();
  }
  out.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  return out;
}

}  // namespace kbprobe
