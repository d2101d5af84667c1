#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kbprobe {

enum class Pooling : std::uint8_t { pre = 0, last = 1, avg = 2 };

enum class PromptStyle : std::uint8_t {
  vanilla = 0,
  cot = 1,
  mc_vanilla = 2,
  mc_cot = 3,
  candidates = 4,
};

enum class SplitTag : std::uint8_t { train, dev, test };

std::string_view to_string(Pooling p) noexcept;
std::string_view to_string(PromptStyle s) noexcept;
std::string_view to_string(SplitTag s) noexcept;
Pooling parse_pooling(std::string_view text);
PromptStyle parse_prompt_style(std::string_view text);
SplitTag parse_split(std::string_view text);

inline bool is_multiple_choice(PromptStyle s) noexcept {
  return s == PromptStyle::mc_vanilla || s == PromptStyle::mc_cot;
}

// Mid-layer hidden states pooled three ways for one generation.
struct PooledStates {
  std::vector<float> pre;   // last question token
  std::vector<float> last;  // last generated token
  std::vector<float> avg;   // mean over generated tokens

  std::size_t h() const noexcept { return pre.size(); }
  const std::vector<float>& get(Pooling p) const noexcept;
  std::vector<float>& get(Pooling p) noexcept;

  // Throws unless all three vectors have the same non-zero length and are finite.
  void validate() const;

  bool operator==(const PooledStates&) const = default;
};

struct HiddenStateRecord {
  std::string id;
  std::string question;
  std::string response;
  std::vector<std::string> gold_answers;
  std::uint8_t label = 0;
  PooledStates states;
  PromptStyle prompt_style = PromptStyle::vanilla;
  std::vector<float> token_logprobs;  // empty when absent
  int layer = -1;                     // capture layer, sidecar metadata only
  int k = 0;                          // option count for multiple-choice records

  bool operator==(const HiddenStateRecord&) const = default;
};

struct Dataset {
  std::vector<HiddenStateRecord> records;
  std::size_t h = 0;
  SplitTag split_tag = SplitTag::train;

  std::size_t count_label(std::uint8_t label) const noexcept;
  // Shared width, unique ids, binary labels, finite states, non-positive logprobs.
  void validate() const;
};

// Pools per-token mid-layer states. `token_states` covers the prompt tokens
// q_1..q_n followed by the generated tokens a_1..a_m; `question_len` is n.
PooledStates pool_states(std::span<const std::vector<float>> token_states,
                         std::size_t question_len = 1);

struct NormalizeOptions {
  bool strip_articles = false;
  bool strip_punctuation = false;
};

// Lowercase (ASCII), collapse whitespace runs to one space, trim.
std::string normalize_text(std::string_view text, const NormalizeOptions& opts = {});

bool contains_answer(std::string_view response, std::span<const std::string> gold_answers,
                     const NormalizeOptions& opts = {});

// Builds a record and enforces the containment labelling rule.
HiddenStateRecord make_record(std::string id, std::string question, std::string response,
                              std::vector<std::string> gold_answers, PooledStates states,
                              PromptStyle style, std::vector<float> token_logprobs = {},
                              const NormalizeOptions& opts = {});

Dataset balance(const Dataset& dataset, std::size_t n_per_class, std::uint64_t seed);

// Binary dump. The path variants also write/read the JSONL text sidecar
// next to the dump (same stem, ".jsonl").
void write_dump(const Dataset& dataset, std::ostream& out);
Dataset read_dump(std::istream& in, SplitTag split = SplitTag::train);
void write_dump(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dump(const std::filesystem::path& path, SplitTag split = SplitTag::train);

std::filesystem::path sidecar_path(const std::filesystem::path& dump_path);

}  // namespace kbprobe
