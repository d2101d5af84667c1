#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

namespace kbprobe {

enum class VerdictSource : std::uint8_t { estimator, prob_baseline, oracle };

std::string_view to_string(VerdictSource s) noexcept;
VerdictSource parse_verdict_source(std::string_view text);

// Binary confidence for one question in one format. `k == 0` is the
// original free-form question, otherwise the k-option multiple-choice variant.
struct ConfidenceVerdict {
  std::string question_id;
  int k = 0;
  std::uint8_t c = 0;
  VerdictSource source = VerdictSource::estimator;

  std::string format() const;  // "original" or "mc_<k>"
  bool operator==(const ConfidenceVerdict&) const = default;
};

int parse_verdict_format(std::string_view text);

void to_json(nlohmann::json& j, const ConfidenceVerdict& v);
void from_json(const nlohmann::json& j, ConfidenceVerdict& v);

}  // namespace kbprobe
