#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kbprobe/backend.hpp"
#include "kbprobe/reformulate.hpp"

namespace kbprobe {

// How the simulated model relates to one question.
enum class KnowledgeKind : std::uint8_t {
  knowable,       // answers correctly, confident states
  unknowable,     // answers wrongly, unconfident states
  overconfident,  // answers wrongly, confident states
};

std::string_view to_string(KnowledgeKind k) noexcept;

struct MockQuestion {
  std::string id;
  std::string question;
  std::vector<std::string> gold_answers;
  std::string freeform_answer;
  std::string candidates_raw;
  KnowledgeKind kind = KnowledgeKind::unknowable;
  // Overconfident questions only: true when the confident states persist
  // under multiple-choice reformulation.
  bool mc_consistent = true;
};

struct CorpusSpec {
  std::size_t n_questions = 0;
  double knowable_rate = 0.5;
  // Share of wrongly answered questions that still emit confident states.
  double overconfident_rate = 0.0;
  // Share of overconfident questions whose multiple-choice states turn unconfident.
  double mc_flip_rate = 0.5;
  std::size_t alpha = 10;
  std::size_t duplicates = 1;  // per candidate list
  // Chance that a wrongly answered question still lists its gold answer among the candidates.
  double gold_in_candidates_rate = 0.8;
};

std::vector<MockQuestion> synthesize_questions(const CorpusSpec& spec, std::uint64_t seed,
                                               std::string_view id_prefix);

struct MockProfile {
  std::uint64_t seed = 0;
  std::size_t h = 64;
  // Class means sit at +/- separation * noise_sigma along a fixed unit direction.
  double separation = 4.0;
  double noise_sigma = 1.0;
  double error_rate = 0.0;
  std::chrono::milliseconds latency{0};
  int layer = 16;
  std::vector<MockQuestion> answers;
};

// What the mock produced for one prompt before pooling.
struct MockGeneration {
  std::string text;
  std::vector<std::vector<float>> token_states;  // question-final token, then one per answer token
  std::vector<float> token_logprobs;
  bool confident_cluster = false;
};

// Deterministic test double: every output is a pure function of
// (profile, prompt, max_tokens).
class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockProfile profile);

  GenerationResult generate(const GenerationRequest& request) override;
  std::size_t hidden_width() const override { return profile_.h; }
  std::string name() const override { return "mock"; }

  MockGeneration synthesize(const GenerationRequest& request) const;
  const MockProfile& profile() const noexcept { return profile_; }
  const std::vector<float>& direction() const noexcept { return direction_; }

 private:
  const MockQuestion* lookup(std::string_view question) const;

  MockProfile profile_;
  std::vector<float> direction_;
  std::unordered_map<std::string, std::size_t> by_question_;
};

// Pieces of a rendered prompt the mock needs to answer it.
struct ParsedPrompt {
  PromptStyle style = PromptStyle::vanilla;
  std::string question;
  std::vector<McOption> options;
};

ParsedPrompt parse_prompt(std::string_view prompt,
                          const PromptTemplates& templates = PromptTemplates::builtin());

}  // namespace kbprobe
