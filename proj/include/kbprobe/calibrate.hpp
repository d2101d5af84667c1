#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kbprobe/verdict.hpp"

namespace kbprobe {

struct CalibrationConfig {
  std::vector<int> k_set = {2, 4, 6, 8};
  int beta = 0;

  // K non-empty with distinct positive entries; 0 <= beta <= |K|.
  void validate() const;
};

// Revokes an original confident verdict when at most `beta` of the
// multiple-choice variants are confident. Never raises 0 to 1.
std::uint8_t c3_calibrate(std::uint8_t c_original, const std::map<int, std::uint8_t>& mc,
                          const CalibrationConfig& cfg);

struct FlipRecord {
  std::string question_id;
  std::vector<std::uint8_t> mc_bits;  // in k_set order
  std::uint8_t before = 1;
  std::uint8_t after = 0;
};

struct JoinError {
  std::string question_id;
  std::string message;
};

struct CalibrationRun {
  std::vector<ConfidenceVerdict> calibrated;  // one per joined original, input order
  std::vector<FlipRecord> flips;
  std::vector<JoinError> errors;
};

CalibrationRun calibrate_run(std::span<const ConfidenceVerdict> originals,
                             std::span<const ConfidenceVerdict> mc_verdicts,
                             const CalibrationConfig& cfg);

// One candidate-generation call plus one call per multiple-choice variant.
std::size_t inference_call_budget(const CalibrationConfig& cfg);

void to_json(nlohmann::json& j, const FlipRecord& f);

}  // namespace kbprobe
