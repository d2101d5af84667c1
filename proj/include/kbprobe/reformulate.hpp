#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kbprobe/state_store.hpp"

namespace kbprobe {

// Named prompt templates with {question}, {options} and {subject}
// placeholders. The built-in set is compiled from assets/prompt_templates.txt.
class PromptTemplates {
 public:
  static const PromptTemplates& builtin();
  static PromptTemplates parse(std::string_view text);
  static PromptTemplates load(const std::filesystem::path& path);

  const std::string& get(PromptStyle style) const;
  std::string render(PromptStyle style, std::string_view question,
                     std::string_view options_block = {}, std::string_view subject = {}) const;

 private:
  std::map<std::string, std::string, std::less<>> by_name_;
};

struct DedupeOptions {
  bool strip_trailing_period = true;
  bool strip_articles = false;
};

std::string dedupe_key(std::string_view answer, const DedupeOptions& opts = {});

struct CandidateSet {
  std::string question_id;
  std::string raw;
  std::vector<std::string> answers;  // trimmed, first occurrence kept
  std::size_t alpha = 10;
};

// Split on ';', trim, drop empties, keep the first `alpha`, then drop
// duplicates under dedupe_key. Throws Errc::no_candidates when nothing is left.
CandidateSet parse_candidates(std::string_view raw, std::size_t alpha = 10,
                              const DedupeOptions& opts = {}, std::string question_id = {});

struct McOption {
  char letter = 'A';
  std::string text;
  bool operator==(const McOption&) const = default;
};

struct McQuestion {
  std::string question_id;
  std::size_t k_requested = 0;
  std::vector<McOption> options;
  std::string rendered_prompt;
  std::optional<char> gold_letter;
};

inline constexpr std::size_t kMaxOptions = 26;

// Options are the first min(k, |answers|) candidates, lettered from 'A' and
// listed one per line as "A. text".
McQuestion build_mc(const CandidateSet& candidates, std::size_t k, std::string_view question,
                    std::span<const std::string> gold_answers,
                    PromptStyle style = PromptStyle::mc_vanilla,
                    const PromptTemplates& templates = PromptTemplates::builtin(),
                    const NormalizeOptions& containment = {});

std::string render_options(std::span<const McOption> options);

// coverage[k - 1] = fraction of questions whose first k unique candidates
// contain a gold answer, for k = 1..k_max.
std::vector<double> topk_gold_coverage(std::span<const CandidateSet> candidate_sets,
                                       std::span<const std::vector<std::string>> gold,
                                       std::size_t k_max,
                                       const NormalizeOptions& containment = {});

double mean_unique_candidates(std::span<const CandidateSet> candidate_sets);

void to_json(nlohmann::json& j, const McQuestion& q);
void from_json(const nlohmann::json& j, McQuestion& q);

}  // namespace kbprobe
