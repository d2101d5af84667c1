#include "kbprobe/reformulate.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "kbprobe/error.hpp"
#include "kbprobe/templates_data.hpp"

namespace kbprobe {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(first, last - first + 1);
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace

PromptTemplates PromptTemplates::parse(std::string_view text) {
  PromptTemplates t;
  std::string current;
  std::vector<std::string> lines;
  auto flush = [&] {
    if (current.empty()) return;
    parse_prompt_style(current);  // rejects unknown section names
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    std::string body;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i > 0) body.push_back('\n');
      body += lines[i];
    }
    t.by_name_[current] = std::move(body);
    lines.clear();
  };

  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() > 2 && line.front() == '[' && line.back() == ']') {
      flush();
      current = line.substr(1, line.size() - 2);
      continue;
    }
    if (current.empty()) continue;  // preamble comments
    lines.push_back(line);
  }
  flush();
  return t;
}

const PromptTemplates& PromptTemplates::builtin() {
  static const PromptTemplates templates = parse(detail::kBuiltinTemplates);
  return templates;
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open template file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const std::string& PromptTemplates::get(PromptStyle style) const {
  auto it = by_name_.find(to_string(style));
  if (it == by_name_.end()) {
    throw Error(Errc::missing_key, "no prompt template named '" + std::string(to_string(style)) + "'");
  }
  return it->second;
}

std::string PromptTemplates::render(PromptStyle style, std::string_view question,
                                    std::string_view options_block, std::string_view subject) const {
  std::string out = get(style);
  // Substitute {options} and {subject} before {question} so that braces in
  // the question text are never re-expanded.
  replace_all(out, "{options}", options_block);
  replace_all(out, "{subject}", subject);
  replace_all(out, "{question}", question);
  return out;
}

std::string dedupe_key(std::string_view answer, const DedupeOptions& opts) {
  std::string key = normalize_text(answer, NormalizeOptions{opts.strip_articles, false});
  if (opts.strip_trailing_period && !key.empty() && key.back() == '.') {
    key.pop_back();
    while (!key.empty() && key.back() == ' ') key.pop_back();
  }
  return key;
}

CandidateSet parse_candidates(std::string_view raw, std::size_t alpha, const DedupeOptions& opts,
                              std::string question_id) {
  CandidateSet set;
  set.question_id = std::move(question_id);
  set.raw = std::string(raw);
  set.alpha = alpha;

  std::vector<std::string_view> pieces;
  std::size_t start = 0;
  while (start <= raw.size() && pieces.size() < alpha) {
    const auto semi = raw.find(';', start);
    const auto piece = trim(raw.substr(start, semi == std::string_view::npos ? raw.size() - start : semi - start));
    if (!piece.empty()) pieces.push_back(piece);
    if (semi == std::string_view::npos) break;
    start = semi + 1;
  }

  std::unordered_set<std::string> seen;
  for (auto piece : pieces) {
    auto key = dedupe_key(piece, opts);
    if (key.empty()) continue;
    if (seen.insert(std::move(key)).second) set.answers.emplace_back(piece);
  }
  if (set.answers.empty()) throw Error(Errc::no_candidates, "no candidates");
  return set;
}

std::string render_options(std::span<const McOption> options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out.push_back(options[i].letter);
    out += ". ";
    out += options[i].text;
  }
  return out;
}

McQuestion build_mc(const CandidateSet& candidates, std::size_t k, std::string_view question,
                    std::span<const std::string> gold_answers, PromptStyle style,
                    const PromptTemplates& templates, const NormalizeOptions& containment) {
  if (candidates.answers.empty()) throw Error(Errc::no_candidates, "build_mc: candidate set is empty");
  if (k == 0 || k > kMaxOptions) {
    throw Error(Errc::invalid_argument, "build_mc: k must be in [1, 26], got " + std::to_string(k));
  }
  if (!is_multiple_choice(style)) {
    throw Error(Errc::invalid_argument, "build_mc: style must be mc_vanilla or mc_cot");
  }

  McQuestion q;
  q.question_id = candidates.question_id;
  q.k_requested = k;
  const std::size_t n = std::min(k, candidates.answers.size());
  for (std::size_t i = 0; i < n; ++i) {
    q.options.push_back({static_cast<char>('A' + i), candidates.answers[i]});
    if (!q.gold_letter && !gold_answers.empty() &&
        contains_answer(candidates.answers[i], gold_answers, containment)) {
      q.gold_letter = q.options.back().letter;
    }
  }
  q.rendered_prompt = templates.render(style, question, render_options(q.options));
  return q;
}

std::vector<double> topk_gold_coverage(std::span<const CandidateSet> candidate_sets,
                                       std::span<const std::vector<std::string>> gold,
                                       std::size_t k_max, const NormalizeOptions& containment) {
  if (gold.size() != candidate_sets.size()) {
    throw Error(Errc::invalid_argument, "topk_gold_coverage: gold list size does not match candidates");
  }
  if (k_max == 0) throw Error(Errc::invalid_argument, "topk_gold_coverage: k_max must be at least 1");
  std::vector<double> curve(k_max, 0.0);
  if (candidate_sets.empty()) return curve;

  // First rank (1-based) holding a gold answer; questions without one never count.
  std::vector<std::size_t> hits_at(k_max + 1, 0);
  for (std::size_t q = 0; q < candidate_sets.size(); ++q) {
    const auto& answers = candidate_sets[q].answers;
    for (std::size_t i = 0; i < answers.size() && i < k_max; ++i) {
      if (contains_answer(answers[i], gold[q], containment)) {
        ++hits_at[i + 1];
        break;
      }
    }
  }
  std::size_t covered = 0;
  for (std::size_t k = 1; k <= k_max; ++k) {
    covered += hits_at[k];
    curve[k - 1] = static_cast<double>(covered) / static_cast<double>(candidate_sets.size());
  }
  return curve;
}

double mean_unique_candidates(std::span<const CandidateSet> candidate_sets) {
  if (candidate_sets.empty()) return 0.0;
  std::size_t total = 0;
  for (const auto& c : candidate_sets) total += c.answers.size();
  return static_cast<double>(total) / static_cast<double>(candidate_sets.size());
}

void to_json(nlohmann::json& j, const McQuestion& q) {
  nlohmann::json options = nlohmann::json::array();
  for (const auto& o : q.options) options.push_back({{"letter", std::string(1, o.letter)}, {"text", o.text}});
  j = nlohmann::json{{"question_id", q.question_id},
                     {"k_requested", q.k_requested},
                     {"options", std::move(options)},
                     {"rendered_prompt", q.rendered_prompt},
                     {"gold_letter", q.gold_letter ? nlohmann::json(std::string(1, *q.gold_letter))
                                                   : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, McQuestion& q) {
  q.question_id = j.at("question_id").get<std::string>();
  q.k_requested = j.at("k_requested").get<std::size_t>();
  q.options.clear();
  for (const auto& o : j.at("options")) {
    const auto letter = o.at("letter").get<std::string>();
    if (letter.size() != 1) throw Error(Errc::malformed_reply, "option letter must be one character");
    q.options.push_back({letter[0], o.at("text").get<std::string>()});
  }
  q.rendered_prompt = j.at("rendered_prompt").get<std::string>();
  q.gold_letter.reset();
  if (j.contains("gold_letter") && !j["gold_letter"].is_null()) {
    q.gold_letter = j["gold_letter"].get<std::string>().at(0);
  }
}

}  // namespace kbprobe
