#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kbprobe {

// One evaluated question: was the answer right, did the estimator claim it would be.
struct Outcome {
  std::uint8_t correct = 0;
  std::uint8_t confident = 0;
};

struct ConfusionCounts {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::size_t confident = 0;
  std::size_t overconfident = 0;    // confident, wrong
  std::size_t conservative = 0;     // unconfident, right
  std::size_t unknown_flagged = 0;  // unconfident, wrong
};

// All fractions in [0, 1]. `upr` is empty when no answer is wrong.
struct MetricsReport {
  std::size_t n = 0;
  double acc = 0.0;
  double conf_ratio = 0.0;
  double alignment = 0.0;
  double overconfidence = 0.0;
  double conservativeness = 0.0;
  std::optional<double> upr;
  ConfusionCounts counts;
};

MetricsReport compute_metrics(std::span<const Outcome> rows);

// Mean of each field across per-seed reports. UPR is averaged over the
// reports where it is defined.
MetricsReport average_reports(std::span<const MetricsReport> reports);

// Residuals of the algebraic relations between the report fields.
struct IdentityResiduals {
  double partition = 0.0;        // align + overcon + conserv - 1
  double alignment_form = 0.0;   // align - (1 + conf - acc - 2 overcon)
  double conservative_form = 0.0;  // conserv - (acc - conf + overcon)
  double upr_form = 0.0;         // upr - (1 - overcon / (1 - acc)), 0 when undefined

  double max_abs() const noexcept;
};

IdentityResiduals check_identities(const MetricsReport& report);

enum class Better { higher, lower, neither };

struct MetricDelta {
  std::string name;
  Better better = Better::neither;
  std::optional<double> before;
  std::optional<double> after;
  std::optional<double> delta;  // after - before

  // Moved in the preferred direction (or stayed put).
  bool improved_or_equal() const noexcept;
  const char* arrow() const noexcept;
};

// Conf., UPR (higher is better), Overcon. (lower), Align. (higher), Acc., Conserv.
std::vector<MetricDelta> compare_runs(const MetricsReport& before, const MetricsReport& after);

// Probabilistic-confidence baseline.
double mean_token_prob(std::span<const float> token_logprobs);
bool prob_confidence(std::span<const float> token_logprobs, double threshold);

struct ProbRow {
  double mean_prob = 0.0;
  std::uint8_t correct = 0;
};

struct ThresholdFit {
  double threshold = 0.0;
  double alignment = 0.0;
};

// Candidate thresholds: 0, 1, every distinct mean_prob, and the value just
// above 1 (never confident). Ties go to the larger threshold.
std::vector<double> threshold_candidates(std::span<const ProbRow> rows);
ThresholdFit fit_threshold(std::span<const ProbRow> rows);

// Table rendering; column order Conf., UPR, Overcon., Align., then Acc., Conserv., n.
using NamedReport = std::pair<std::string, MetricsReport>;
std::string format_percent(std::optional<double> fraction);
std::string render_markdown_table(std::span<const NamedReport> rows);
std::string render_csv(std::span<const NamedReport> rows);
std::string render_delta_markdown(std::span<const MetricDelta> deltas);

}  // namespace kbprobe
