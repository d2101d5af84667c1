#include "kbprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "kbprobe/error.hpp"

namespace kbprobe {

MetricsReport compute_metrics(std::span<const Outcome> rows) {
  if (rows.empty()) throw Error(Errc::invalid_argument, "compute_metrics: no rows");
  ConfusionCounts c;
  c.n = rows.size();
  for (const auto& r : rows) {
    const bool right = r.correct != 0;
    const bool conf = r.confident != 0;
    c.correct += right;
    c.confident += conf;
    c.overconfident += conf && !right;
    c.conservative += !conf && right;
    c.unknown_flagged += !conf && !right;
  }

  const double n = static_cast<double>(c.n);
  MetricsReport m;
  m.n = c.n;
  m.counts = c;
  m.acc = static_cast<double>(c.correct) / n;
  m.conf_ratio = static_cast<double>(c.confident) / n;
  m.overconfidence = static_cast<double>(c.overconfident) / n;
  m.conservativeness = static_cast<double>(c.conservative) / n;
  m.alignment = static_cast<double>(c.n - c.overconfident - c.conservative) / n;
  const std::size_t wrong = c.n - c.correct;
  if (wrong > 0) m.upr = static_cast<double>(c.unknown_flagged) / static_cast<double>(wrong);
  return m;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw Error(Errc::invalid_argument, "average_reports: no reports");
  MetricsReport avg;
  avg.n = reports.front().n;
  double upr_sum = 0.0;
  std::size_t upr_count = 0;
  for (const auto& r : reports) {
    avg.acc += r.acc;
    avg.conf_ratio += r.conf_ratio;
    avg.alignment += r.alignment;
    avg.overconfidence += r.overconfidence;
    avg.conservativeness += r.conservativeness;
    if (r.upr) {
      upr_sum += *r.upr;
      ++upr_count;
    }
  }
  const double k = static_cast<double>(reports.size());
  avg.acc /= k;
  avg.conf_ratio /= k;
  avg.alignment /= k;
  avg.overconfidence /= k;
  avg.conservativeness /= k;
  if (upr_count > 0) avg.upr = upr_sum / static_cast<double>(upr_count);
  return avg;
}

double IdentityResiduals::max_abs() const noexcept {
  return std::max({std::abs(partition), std::abs(alignment_form), std::abs(conservative_form),
                   std::abs(upr_form)});
}

IdentityResiduals check_identities(const MetricsReport& r) {
  IdentityResiduals res;
  res.partition = r.alignment + r.overconfidence + r.conservativeness - 1.0;
  res.alignment_form = r.alignment - (1.0 + r.conf_ratio - r.acc - 2.0 * r.overconfidence);
  res.conservative_form = r.conservativeness - (r.acc - r.conf_ratio + r.overconfidence);
  if (r.upr && r.acc < 1.0) res.upr_form = *r.upr - (1.0 - r.overconfidence / (1.0 - r.acc));
  return res;
}

bool MetricDelta::improved_or_equal() const noexcept {
  if (!delta) return true;
  switch (better) {
    case Better::higher: return *delta >= 0.0;
    case Better::lower: return *delta <= 0.0;
    case Better::neither: return true;
  }
  return true;
}

const char* MetricDelta::arrow() const noexcept {
  switch (better) {
    case Better::higher: return "↑";
    case Better::lower: return "↓";
    case Better::neither: return "";
  }
  return "";
}

std::vector<MetricDelta> compare_runs(const MetricsReport& before, const MetricsReport& after) {
  if (before.n != after.n) {
    throw Error(Errc::invalid_argument, "compare_runs: sample counts differ (" +
                                            std::to_string(before.n) + " vs " +
                                            std::to_string(after.n) + ")");
  }
  auto row = [](std::string name, Better better, std::optional<double> b, std::optional<double> a) {
    MetricDelta d{std::move(name), better, b, a, std::nullopt};
    if (b && a) d.delta = *a - *b;
    return d;
  };
  return {
      row("Conf.", Better::neither, before.conf_ratio, after.conf_ratio),
      row("UPR", Better::higher, before.upr, after.upr),
      row("Overcon.", Better::lower, before.overconfidence, after.overconfidence),
      row("Align.", Better::higher, before.alignment, after.alignment),
      row("Acc.", Better::neither, before.acc, after.acc),
      row("Conserv.", Better::neither, before.conservativeness, after.conservativeness),
  };
}

double mean_token_prob(std::span<const float> token_logprobs) {
  if (token_logprobs.empty()) throw Error(Errc::invalid_argument, "prob_confidence: empty logprob list");
  double sum = 0.0;
  for (float lp : token_logprobs) sum += std::exp(static_cast<double>(lp));
  return sum / static_cast<double>(token_logprobs.size());
}

bool prob_confidence(std::span<const float> token_logprobs, double threshold) {
  return mean_token_prob(token_logprobs) >= threshold;
}

std::vector<double> threshold_candidates(std::span<const ProbRow> rows) {
  std::vector<double> cands;
  cands.reserve(rows.size() + 3);
  cands.push_back(0.0);
  cands.push_back(1.0);
  cands.push_back(std::nextafter(1.0, 2.0));
  for (const auto& r : rows) cands.push_back(r.mean_prob);
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  return cands;
}

ThresholdFit fit_threshold(std::span<const ProbRow> rows) {
  if (rows.empty()) throw Error(Errc::invalid_argument, "fit_threshold: no rows");
  std::vector<ProbRow> sorted(rows.begin(), rows.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ProbRow& a, const ProbRow& b) { return a.mean_prob < b.mean_prob; });
  const auto cands = threshold_candidates(rows);

  // Rows with p < t are unconfident. Walk candidates upward, moving rows
  // below the threshold as we go.
  std::size_t total_correct = 0;
  for (const auto& r : sorted) total_correct += r.correct;
  std::size_t below = 0;
  std::size_t wrong_below = 0;
  std::size_t correct_below = 0;
  std::size_t best_hits = 0;
  double best_t = cands.front();
  for (double t : cands) {
    while (below < sorted.size() && sorted[below].mean_prob < t) {
      (sorted[below].correct ? correct_below : wrong_below) += 1;
      ++below;
    }
    const std::size_t hits = (total_correct - correct_below) + wrong_below;
    if (hits >= best_hits) {
      best_hits = hits;
      best_t = t;
    }
  }
  return {best_t, static_cast<double>(best_hits) / static_cast<double>(rows.size())};
}

std::string format_percent(std::optional<double> fraction) {
  if (!fraction) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *fraction);
  return buf;
}

namespace {

std::string format_delta_pp(std::optional<double> delta) {
  if (!delta) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", 100.0 * *delta);
  return buf;
}

}  // namespace

std::string render_markdown_table(std::span<const NamedReport> rows) {
  std::ostringstream out;
  out << "| Method | Conf. | UPR↑ | Overcon.↓ | Align.↑ | Acc. | Conserv. | n |\n";
  out << "|---|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& [name, r] : rows) {
    out << "| " << name << " | " << format_percent(r.conf_ratio) << " | " << format_percent(r.upr)
        << " | " << format_percent(r.overconfidence) << " | " << format_percent(r.alignment)
        << " | " << format_percent(r.acc) << " | " << format_percent(r.conservativeness) << " | "
        << r.n << " |\n";
  }
  return out.str();
}

std::string render_csv(std::span<const NamedReport> rows) {
  std::ostringstream out;
  out << "method,conf,upr,overcon,align,acc,conserv,n\n";
  for (const auto& [name, r] : rows) {
    out << name << ',' << format_percent(r.conf_ratio) << ',' << format_percent(r.upr) << ','
        << format_percent(r.overconfidence) << ',' << format_percent(r.alignment) << ','
        << format_percent(r.acc) << ',' << format_percent(r.conservativeness) << ',' << r.n << '\n';
  }
  return out.str();
}

std::string render_delta_markdown(std::span<const MetricDelta> deltas) {
  std::ostringstream out;
  out << "| Metric | Before | After | Δ (pp) |\n|---|---:|---:|---:|\n";
  for (const auto& d : deltas) {
    out << "| " << d.name << d.arrow() << " | " << format_percent(d.before) << " | "
        << format_percent(d.after) << " | " << format_delta_pp(d.delta) << " |\n";
  }
  return out.str();
}

}  // namespace kbprobe
