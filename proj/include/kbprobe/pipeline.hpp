#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kbprobe/backend.hpp"
#include "kbprobe/calibrate.hpp"
#include "kbprobe/estimator.hpp"
#include "kbprobe/reformulate.hpp"
#include "kbprobe/state_store.hpp"

namespace kbprobe {

enum class BackendKind { mock, http, dump };
// Which estimator scores the multiple-choice variants.
enum class McEstimatorMode { per_k, joint, freeform };

std::string_view to_string(BackendKind k) noexcept;
std::string_view to_string(McEstimatorMode m) noexcept;

struct BackendConfig {
  BackendKind kind = BackendKind::mock;
  std::string endpoint;  // http; falls back to KBPROBE_ENDPOINT
  std::chrono::milliseconds timeout{30000};
  std::string bearer_token;
  bool binary_states = false;
  unsigned parallelism = 4;
  std::vector<std::filesystem::path> dumps;  // dump backend sources
};

// Parameters of the synthetic corpus written by `synth`.
struct SynthConfig {
  std::size_t h = 64;
  double separation = 4.0;
  double noise_sigma = 1.0;
  double knowable_rate = 0.5;
  double overconfident_rate = 0.0;
  double mc_flip_rate = 0.5;
  std::size_t n_train_per_class = 1000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  double error_rate = 0.0;
  std::chrono::milliseconds latency{0};
};

struct RunConfig {
  std::uint64_t seed = 0;
  Pooling pooling = Pooling::last;
  PromptStyle prompt_style = PromptStyle::vanilla;
  PromptStyle mc_style = PromptStyle::mc_vanilla;
  TrainConfig train;
  CalibrationConfig calibration;
  McEstimatorMode mc_estimator = McEstimatorMode::per_k;
  BackendConfig backend;
  SynthConfig synth;
  std::size_t alpha = 10;
  std::size_t max_tokens = 64;
  int capture_layer = 16;
  bool want_logprobs = true;
  NormalizeOptions containment;
  DedupeOptions dedupe;
  std::filesystem::path templates;  // empty: built-in templates

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

// Fixed file layout inside a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path questions(SplitTag s) const;
  std::filesystem::path dump(SplitTag s) const;
  std::filesystem::path mc_dump(SplitTag s) const;
  std::filesystem::path candidates(SplitTag s) const;
  std::filesystem::path candidates_dump(SplitTag s) const;
  std::filesystem::path mc_questions(SplitTag s) const;
  std::filesystem::path mock_answers() const { return root / "data" / "mock_answers.jsonl"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path model(std::string_view family, std::uint64_t seed) const;
  std::filesystem::path train_report() const { return models() / "train_report.json"; }
  std::filesystem::path verdicts(std::string_view stream) const;
  std::filesystem::path calibrated(std::string_view stream) const;
  std::filesystem::path flips(std::string_view stream) const;
  std::filesystem::path report_dir() const { return root / "report"; }
  std::filesystem::path timings() const { return root / "timings.jsonl"; }
};

struct QuestionRow {
  std::string id;
  std::string question;
  std::vector<std::string> gold_answers;
};

std::vector<QuestionRow> read_questions(const std::filesystem::path& path);
void write_questions(const std::filesystem::path& path, const std::vector<QuestionRow>& rows);

struct CommandResult {
  std::size_t item_errors = 0;
  std::vector<std::string> notes;
};

// <out>/run-YYYYmmdd-HHMMSS (UTC), created.
std::filesystem::path make_run_dir(const std::filesystem::path& out);

std::unique_ptr<Backend> make_backend(const RunConfig& cfg, const RunLayout& layout);

// Each command is a thin shell over one module. Missing upstream artifacts
// raise Errc::missing_artifact naming the command that produces them.
CommandResult cmd_synth(const RunConfig& cfg, const RunLayout& layout);
CommandResult cmd_ingest(const RunConfig& cfg, const RunLayout& layout, Backend& backend,
                         const std::filesystem::path& questions, SplitTag split,
                         std::optional<std::size_t> balance_per_class = std::nullopt);
CommandResult cmd_reformulate(const RunConfig& cfg, const RunLayout& layout, Backend& backend);
CommandResult cmd_train(const RunConfig& cfg, const RunLayout& layout);
CommandResult cmd_predict(const RunConfig& cfg, const RunLayout& layout);
CommandResult cmd_calibrate(const RunConfig& cfg, const RunLayout& layout);
CommandResult cmd_report(const RunConfig& cfg, const RunLayout& layout);

// synth -> train -> predict -> calibrate -> report.
CommandResult run_synthetic_study(const RunConfig& cfg, const RunLayout& layout);

}  // namespace kbprobe
