#include "kbprobe/calibrate.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "kbprobe/error.hpp"

namespace kbprobe {

std::string_view to_string(VerdictSource s) noexcept {
  switch (s) {
    case VerdictSource::estimator: return "estimator";
    case VerdictSource::prob_baseline: return "prob_baseline";
    case VerdictSource::oracle: return "oracle";
  }
  return "?";
}

VerdictSource parse_verdict_source(std::string_view text) {
  if (text == "estimator") return VerdictSource::estimator;
  if (text == "prob_baseline") return VerdictSource::prob_baseline;
  if (text == "oracle") return VerdictSource::oracle;
  throw Error(Errc::invalid_argument, "unknown verdict source '" + std::string(text) + "'");
}

std::string ConfidenceVerdict::format() const {
  return k == 0 ? std::string("original") : "mc_" + std::to_string(k);
}

int parse_verdict_format(std::string_view text) {
  if (text == "original") return 0;
  if (text.starts_with("mc_")) {
    try {
      const int k = std::stoi(std::string(text.substr(3)));
      if (k > 0) return k;
    } catch (const std::exception&) {
    }
  }
  throw Error(Errc::invalid_argument, "unknown verdict format '" + std::string(text) + "'");
}

void to_json(nlohmann::json& j, const ConfidenceVerdict& v) {
  j = nlohmann::json{{"question_id", v.question_id},
                     {"format", v.format()},
                     {"c", v.c},
                     {"source", to_string(v.source)}};
}

void from_json(const nlohmann::json& j, ConfidenceVerdict& v) {
  v.question_id = j.at("question_id").get<std::string>();
  v.k = parse_verdict_format(j.at("format").get<std::string>());
  const int c = j.at("c").get<int>();
  if (c != 0 && c != 1) throw Error(Errc::invalid_argument, "verdict c must be 0 or 1");
  v.c = static_cast<std::uint8_t>(c);
  v.source = parse_verdict_source(j.value("source", "estimator"));
}

void CalibrationConfig::validate() const {
  if (k_set.empty()) throw Error(Errc::invalid_argument, "calibration K must be non-empty");
  std::set<int> unique(k_set.begin(), k_set.end());
  if (unique.size() != k_set.size() || *unique.begin() <= 0) {
    throw Error(Errc::invalid_argument, "calibration K must hold distinct positive option counts");
  }
  if (beta < 0 || beta > static_cast<int>(k_set.size())) {
    throw Error(Errc::invalid_argument, "beta must lie in [0, |K|]");
  }
}

std::uint8_t c3_calibrate(std::uint8_t c_original, const std::map<int, std::uint8_t>& mc,
                          const CalibrationConfig& cfg) {
  cfg.validate();
  int confident = 0;
  std::string missing;
  for (int k : cfg.k_set) {
    auto it = mc.find(k);
    if (it == mc.end()) {
      missing += (missing.empty() ? "" : ", ") + std::to_string(k);
      continue;
    }
    confident += it->second != 0;
  }
  if (!missing.empty()) throw Error(Errc::missing_key, "missing multiple-choice verdicts for k = " + missing);
  if (c_original == 1 && confident <= cfg.beta) return 0;
  return c_original;
}

CalibrationRun calibrate_run(std::span<const ConfidenceVerdict> originals,
                             std::span<const ConfidenceVerdict> mc_verdicts,
                             const CalibrationConfig& cfg) {
  cfg.validate();
  std::unordered_map<std::string, std::map<int, std::uint8_t>> by_question;
  CalibrationRun run;
  std::set<std::string> duplicated;
  for (const auto& v : mc_verdicts) {
    if (v.k == 0) continue;
    auto [it, inserted] = by_question[v.question_id].emplace(v.k, v.c);
    if (!inserted) duplicated.insert(v.question_id);
  }

  for (const auto& orig : originals) {
    if (orig.k != 0) {
      run.errors.push_back({orig.question_id, "expected an original-format verdict, got " + orig.format()});
      continue;
    }
    if (duplicated.contains(orig.question_id)) {
      run.errors.push_back({orig.question_id, "duplicate multiple-choice verdicts"});
      continue;
    }
    auto it = by_question.find(orig.question_id);
    static const std::map<int, std::uint8_t> kNone;
    const auto& mc = it == by_question.end() ? kNone : it->second;
    std::uint8_t after = 0;
    try {
      after = c3_calibrate(orig.c, mc, cfg);
    } catch (const Error& e) {
      run.errors.push_back({orig.question_id, e.what()});
      continue;
    }
    ConfidenceVerdict out = orig;
    out.c = after;
    run.calibrated.push_back(out);
    if (after != orig.c) {
      FlipRecord flip;
      flip.question_id = orig.question_id;
      for (int k : cfg.k_set) flip.mc_bits.push_back(mc.at(k));
      flip.before = orig.c;
      flip.after = after;
      run.flips.push_back(std::move(flip));
    }
  }

  std::set<std::string> seen;
  for (const auto& orig : originals) seen.insert(orig.question_id);
  std::set<std::string> orphans;
  for (const auto& [id, _] : by_question) {
    if (!seen.contains(id)) orphans.insert(id);
  }
  for (const auto& id : orphans) run.errors.push_back({id, "multiple-choice verdicts without an original verdict"});
  return run;
}

std::size_t inference_call_budget(const CalibrationConfig& cfg) { return cfg.k_set.size() + 1; }

void to_json(nlohmann::json& j, const FlipRecord& f) {
  j = nlohmann::json{{"question_id", f.question_id},
                     {"mc_bits", f.mc_bits},
                     {"before", f.before},
                     {"after", f.after}};
}

}  // namespace kbprobe
