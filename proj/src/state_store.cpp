#include "kbprobe/state_store.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "kbprobe/detail/binary_io.hpp"
#include "kbprobe/error.hpp"
#include "kbprobe/rng.hpp"

namespace kbprobe {

namespace {

constexpr std::array<char, 4> kDumpMagic = {'K', 'B', 'H', 'S'};
constexpr std::uint16_t kDumpVersion = 1;

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

// Bytes left in a seekable stream, or nullopt.
std::optional<std::uint64_t> remaining_bytes(std::istream& in) {
  const auto here = in.tellg();
  if (here < 0) return std::nullopt;
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  if (end < 0 || !in) {
    in.clear();
    return std::nullopt;
  }
  return static_cast<std::uint64_t>(end - here);
}

}  // namespace

std::string_view to_string(Pooling p) noexcept {
  switch (p) {
    case Pooling::pre: return "pre";
    case Pooling::last: return "last";
    case Pooling::avg: return "avg";
  }
  return "?";
}

std::string_view to_string(PromptStyle s) noexcept {
  switch (s) {
    case PromptStyle::vanilla: return "vanilla";
    case PromptStyle::cot: return "cot";
    case PromptStyle::mc_vanilla: return "mc_vanilla";
    case PromptStyle::mc_cot: return "mc_cot";
    case PromptStyle::candidates: return "candidates";
  }
  return "?";
}

std::string_view to_string(SplitTag s) noexcept {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::dev: return "dev";
    case SplitTag::test: return "test";
  }
  return "?";
}

Pooling parse_pooling(std::string_view text) {
  if (text == "pre") return Pooling::pre;
  if (text == "last") return Pooling::last;
  if (text == "avg") return Pooling::avg;
  throw Error(Errc::invalid_argument, "unknown pooling '" + std::string(text) + "' (pre|last|avg)");
}

PromptStyle parse_prompt_style(std::string_view text) {
  for (auto s : {PromptStyle::vanilla, PromptStyle::cot, PromptStyle::mc_vanilla,
                 PromptStyle::mc_cot, PromptStyle::candidates}) {
    if (to_string(s) == text) return s;
  }
  throw Error(Errc::invalid_argument, "unknown prompt style '" + std::string(text) + "'");
}

SplitTag parse_split(std::string_view text) {
  if (text == "train") return SplitTag::train;
  if (text == "dev") return SplitTag::dev;
  if (text == "test") return SplitTag::test;
  throw Error(Errc::invalid_argument, "unknown split '" + std::string(text) + "'");
}

const std::vector<float>& PooledStates::get(Pooling p) const noexcept {
  switch (p) {
    case Pooling::pre: return pre;
    case Pooling::last: return last;
    case Pooling::avg: break;
  }
  return avg;
}

std::vector<float>& PooledStates::get(Pooling p) noexcept {
  return const_cast<std::vector<float>&>(std::as_const(*this).get(p));
}

void PooledStates::validate() const {
  if (pre.empty() || pre.size() != last.size() || pre.size() != avg.size()) {
    throw Error(Errc::dimension_mismatch,
                "pooled states must share a non-zero width (pre=" + std::to_string(pre.size()) +
                    ", last=" + std::to_string(last.size()) + ", avg=" + std::to_string(avg.size()) + ")");
  }
  if (!all_finite(pre) || !all_finite(last) || !all_finite(avg)) {
    throw Error(Errc::non_finite, "pooled states contain NaN or Inf");
  }
}

std::size_t Dataset::count_label(std::uint8_t label) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [label](const auto& r) { return r.label == label; }));
}

void Dataset::validate() const {
  std::unordered_set<std::string_view> ids;
  ids.reserve(records.size());
  for (const auto& r : records) {
    if (!ids.insert(r.id).second) throw Error(Errc::duplicate_id, "duplicate record id '" + r.id + "'");
    if (r.label > 1) throw Error(Errc::invalid_argument, "record '" + r.id + "' has non-binary label");
    r.states.validate();
    if (r.states.h() != h) {
      throw Error(Errc::width_mismatch, "record '" + r.id + "' has width " +
                                            std::to_string(r.states.h()) + ", dataset width is " +
                                            std::to_string(h));
    }
    if (std::any_of(r.token_logprobs.begin(), r.token_logprobs.end(),
                    [](float lp) { return !(lp <= 0.0f); })) {
      throw Error(Errc::invalid_argument, "record '" + r.id + "' has a token logprob > 0 or NaN");
    }
  }
}

PooledStates pool_states(std::span<const std::vector<float>> token_states, std::size_t question_len) {
  if (question_len == 0) throw Error(Errc::invalid_argument, "question_len must be positive");
  if (token_states.size() < question_len + 1) {
    throw Error(Errc::no_generated_tokens, "no generated tokens");
  }
  const std::size_t h = token_states.front().size();
  if (h == 0) throw Error(Errc::dimension_mismatch, "token states have zero width");
  for (const auto& v : token_states) {
    if (v.size() != h) throw Error(Errc::dimension_mismatch, "ragged token state widths");
  }

  const auto answers = token_states.subspan(question_len);
  std::vector<double> sum(h, 0.0);
  for (const auto& v : answers) {
    for (std::size_t i = 0; i < h; ++i) sum[i] += v[i];
  }
  PooledStates out;
  out.pre = token_states[question_len - 1];
  out.last = answers.back();
  out.avg.resize(h);
  const double m = static_cast<double>(answers.size());
  for (std::size_t i = 0; i < h; ++i) out.avg[i] = static_cast<float>(sum[i] / m);
  return out;
}

std::string normalize_text(std::string_view text, const NormalizeOptions& opts) {
  std::string lowered;
  lowered.reserve(text.size());
  for (unsigned char c : text) {
    if (opts.strip_punctuation && c < 0x80 && std::ispunct(c)) {
      lowered.push_back(' ');
      continue;
    }
    lowered.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }

  std::string out;
  out.reserve(lowered.size());
  std::size_t i = 0;
  while (i < lowered.size()) {
    while (i < lowered.size() && is_space(lowered[i])) ++i;
    std::size_t j = i;
    while (j < lowered.size() && !is_space(lowered[j])) ++j;
    if (j > i) {
      std::string_view word(lowered.data() + i, j - i);
      if (!(opts.strip_articles && (word == "a" || word == "an" || word == "the"))) {
        if (!out.empty()) out.push_back(' ');
        out.append(word);
      }
    }
    i = j;
  }
  return out;
}

bool contains_answer(std::string_view response, std::span<const std::string> gold_answers,
                     const NormalizeOptions& opts) {
  const std::string hay = normalize_text(response, opts);
  if (hay.empty()) return false;
  for (const auto& gold : gold_answers) {
    const std::string needle = normalize_text(gold, opts);
    if (!needle.empty() && hay.find(needle) != std::string::npos) return true;
  }
  return false;
}

HiddenStateRecord make_record(std::string id, std::string question, std::string response,
                              std::vector<std::string> gold_answers, PooledStates states,
                              PromptStyle style, std::vector<float> token_logprobs,
                              const NormalizeOptions& opts) {
  if (gold_answers.empty()) {
    throw Error(Errc::invalid_argument, "record '" + id + "' has no gold answers");
  }
  states.validate();
  HiddenStateRecord r;
  r.label = contains_answer(response, gold_answers, opts) ? 1 : 0;
  r.id = std::move(id);
  r.question = std::move(question);
  r.response = std::move(response);
  r.gold_answers = std::move(gold_answers);
  r.states = std::move(states);
  r.prompt_style = style;
  r.token_logprobs = std::move(token_logprobs);
  return r;
}

Dataset balance(const Dataset& dataset, std::size_t n_per_class, std::uint64_t seed) {
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    (dataset.records[i].label == 1 ? pos : neg).push_back(i);
  }
  if (pos.size() < n_per_class || neg.size() < n_per_class) {
    const bool pos_short = pos.size() < n_per_class;
    throw Error(Errc::insufficient_records,
                std::string("cannot balance: class ") + (pos_short ? "1" : "0") + " has " +
                    std::to_string(pos_short ? pos.size() : neg.size()) + " records, need " +
                    std::to_string(n_per_class));
  }

  SplitMix64 rng(seed);
  rng.shuffle(std::span(pos));
  rng.shuffle(std::span(neg));
  std::vector<std::size_t> picked(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_per_class));
  picked.insert(picked.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_per_class));
  rng.shuffle(std::span(picked));

  Dataset out;
  out.h = dataset.h;
  out.split_tag = dataset.split_tag;
  out.records.reserve(picked.size());
  for (std::size_t i : picked) out.records.push_back(dataset.records[i]);
  return out;
}

void write_dump(const Dataset& dataset, std::ostream& out) {
  dataset.validate();
  using detail::put_le;
  out.write(kDumpMagic.data(), kDumpMagic.size());
  put_le<std::uint16_t>(out, kDumpVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.h));
  put_le<std::uint64_t>(out, dataset.records.size());
  for (const auto& r : dataset.records) {
    if (r.id.size() > 0xFFFF) throw Error(Errc::invalid_argument, "record id longer than 65535 bytes");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.id.size()));
    out.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
    put_le<std::uint8_t>(out, r.label);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.prompt_style));
    detail::put_f32s(out, r.states.pre);
    detail::put_f32s(out, r.states.last);
    detail::put_f32s(out, r.states.avg);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.token_logprobs.size()));
    detail::put_f32s(out, r.token_logprobs);
  }
  if (!out) throw Error(Errc::io, "failed writing dump");
}

Dataset read_dump(std::istream& in, SplitTag split) {
  using detail::get_le;
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size())) {
    throw Error(Errc::truncated, "truncated file while reading magic");
  }
  if (magic != kDumpMagic) throw Error(Errc::bad_magic, "bad magic: not a KBHS dump");
  const auto version = get_le<std::uint16_t>(in, "version");
  if (version != kDumpVersion) {
    throw Error(Errc::version_mismatch, "version mismatch: dump version " + std::to_string(version) +
                                            ", expected " + std::to_string(kDumpVersion));
  }
  Dataset ds;
  ds.split_tag = split;
  ds.h = get_le<std::uint32_t>(in, "width");
  const auto count = get_le<std::uint64_t>(in, "record count");
  if (count > 0 && ds.h == 0) throw Error(Errc::width_mismatch, "dump declares records of width 0");

  // Smallest possible record: id length, label, style, 3h floats, logprob count.
  const std::uint64_t min_record = 2 + 1 + 1 + 12ULL * ds.h + 4;
  if (auto left = remaining_bytes(in); left && count > *left / min_record) {
    throw Error(Errc::truncated, "truncated file: header declares " + std::to_string(count) +
                                     " records but only " + std::to_string(*left) + " bytes follow");
  }

  ds.records.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t n = 0; n < count; ++n) {
    HiddenStateRecord r;
    r.id.resize(get_le<std::uint16_t>(in, "id length"));
    detail::read_exact(in, r.id.data(), r.id.size(), "id");
    r.label = get_le<std::uint8_t>(in, "label");
    if (r.label > 1) throw Error(Errc::invalid_argument, "record '" + r.id + "' has non-binary label");
    const auto style = get_le<std::uint8_t>(in, "prompt style");
    if (style > static_cast<std::uint8_t>(PromptStyle::candidates)) {
      throw Error(Errc::invalid_argument, "record '" + r.id + "' has unknown prompt style code");
    }
    r.prompt_style = static_cast<PromptStyle>(style);
    r.states.pre = detail::get_f32_vector(in, ds.h, "pre state");
    r.states.last = detail::get_f32_vector(in, ds.h, "last state");
    r.states.avg = detail::get_f32_vector(in, ds.h, "avg state");
    const auto n_lp = get_le<std::uint32_t>(in, "logprob count");
    if (auto left = remaining_bytes(in); left && n_lp > *left / 4) {
      throw Error(Errc::truncated, "truncated file while reading logprobs");
    }
    r.token_logprobs = detail::get_f32_vector(in, n_lp, "logprobs");
    ds.records.push_back(std::move(r));
  }
  return ds;
}

std::filesystem::path sidecar_path(const std::filesystem::path& dump_path) {
  auto p = dump_path;
  p.replace_extension(".jsonl");
  return p;
}

void write_dump(const Dataset& dataset, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
    write_dump(dataset, out);
  }
  std::ofstream side(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!side) throw Error(Errc::io, "cannot open sidecar for '" + path.string() + "'");
  for (const auto& r : dataset.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["question"] = r.question;
    j["response"] = r.response;
    j["gold_answers"] = r.gold_answers;
    j["prompt_style"] = to_string(r.prompt_style);
    j["layer"] = r.layer;
    if (r.k > 0) j["k"] = r.k;
    side << j.dump() << '\n';
  }
  if (!side) throw Error(Errc::io, "failed writing sidecar for '" + path.string() + "'");
}

Dataset read_dump(const std::filesystem::path& path, SplitTag split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open dump '" + path.string() + "'");
  Dataset ds = read_dump(in, split);

  const auto side_path = sidecar_path(path);
  std::ifstream side(side_path);
  if (!side) return ds;

  std::unordered_map<std::string, std::size_t> index;
  index.reserve(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) index.emplace(ds.records[i].id, i);

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(side, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::io, side_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto id = j.at("id").get<std::string>();
    auto it = index.find(id);
    if (it == index.end()) {
      throw Error(Errc::missing_key, side_path.string() + ": id '" + id + "' not present in dump");
    }
    auto& r = ds.records[it->second];
    r.question = j.value("question", "");
    r.response = j.value("response", "");
    r.gold_answers = j.value("gold_answers", std::vector<std::string>{});
    r.layer = j.value("layer", -1);
    r.k = j.value("k", 0);
  }
  return ds;
}

}  // namespace kbprobe
