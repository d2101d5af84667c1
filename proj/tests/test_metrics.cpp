#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "kbprobe/metrics.hpp"
#include "support.hpp"

using namespace kbprobe;
using kbtest::error_code_of;

namespace {

// Rows with the exact confusion counts: TP, FP (overconfident), FN (conservative), TN.
std::vector<Outcome> rows_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  std::vector<Outcome> rows;
  for (std::size_t i = 0; i < tp; ++i) rows.push_back({1, 1});
  for (std::size_t i = 0; i < fp; ++i) rows.push_back({0, 1});
  for (std::size_t i = 0; i < fn; ++i) rows.push_back({1, 0});
  for (std::size_t i = 0; i < tn; ++i) rows.push_back({0, 0});
  return rows;
}

std::vector<Outcome> random_rows(SplitMix64& rng, std::size_t n) {
  std::vector<Outcome> rows(n);
  for (auto& r : rows) {
    r.correct = static_cast<std::uint8_t>(rng.below(2));
    r.confident = static_cast<std::uint8_t>(rng.below(2));
  }
  return rows;
}

double alignment_at(const std::vector<ProbRow>& rows, double t) {
  std::size_t ok = 0;
  for (const auto& r : rows) ok += (r.mean_prob >= t) == (r.correct == 1);
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

}  // namespace

TEST_CASE("compute_metrics: reference row reconstructs from its three inputs") {
  // acc 26.12%, conf 21.59%, overcon 10.87% at n = 10000.
  const std::size_t n = 10000, correct = 2612, confident = 2159, over = 1087;
  const std::size_t tp = confident - over;
  const auto rows = rows_from_counts(tp, over, correct - tp, n - correct - over);
  const auto r = compute_metrics(rows);
  CHECK(r.acc == doctest::Approx(0.2612));
  CHECK(r.conf_ratio == doctest::Approx(0.2159));
  CHECK(r.overconfidence == doctest::Approx(0.1087));
  CHECK(std::abs(100.0 * r.alignment - 73.73) <= 0.02);
  CHECK(std::abs(100.0 * r.conservativeness - 15.40) <= 0.02);
  REQUIRE(r.upr.has_value());
  CHECK(std::abs(100.0 * *r.upr - 85.29) <= 0.05);
}

TEST_CASE("compute_metrics: all correct and confident") {
  const std::vector<Outcome> rows(25, Outcome{1, 1});
  const auto r = compute_metrics(rows);
  CHECK(r.acc == 1.0);
  CHECK(r.conf_ratio == 1.0);
  CHECK(r.alignment == 1.0);
  CHECK(r.overconfidence == 0.0);
  CHECK(r.conservativeness == 0.0);
  CHECK_FALSE(r.upr.has_value());
  CHECK(format_percent(r.upr) == "undefined");
  CHECK(error_code_of([] { compute_metrics(std::span<const Outcome>{}); }) == Errc::invalid_argument);
}

TEST_CASE("compute_metrics: matches a naive recount on random rows") {
  SplitMix64 rng(1000);
  const auto rows = random_rows(rng, 1000);
  std::size_t correct = 0, confident = 0, agree = 0, over = 0, cons = 0, wrong = 0, flagged = 0;
  for (const auto& r : rows) {
    correct += r.correct;
    confident += r.confident;
    agree += r.correct == r.confident;
    over += r.confident && !r.correct;
    cons += !r.confident && r.correct;
    wrong += !r.correct;
    flagged += !r.correct && !r.confident;
  }
  const auto m = compute_metrics(rows);
  CHECK(m.n == 1000);
  CHECK(m.acc == correct / 1000.0);
  CHECK(m.conf_ratio == confident / 1000.0);
  CHECK(m.alignment == agree / 1000.0);
  CHECK(m.overconfidence == over / 1000.0);
  CHECK(m.conservativeness == cons / 1000.0);
  CHECK(*m.upr == static_cast<double>(flagged) / static_cast<double>(wrong));
  CHECK(m.counts.unknown_flagged == flagged);
}

TEST_CASE("identities hold exactly and metrics are permutation invariant") {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    auto rows = random_rows(rng, 1 + rng.below(300));
    const auto m = compute_metrics(rows);
    CHECK(check_identities(m).max_abs() <= 1e-12);
    rng.shuffle(std::span(rows));
    const auto p = compute_metrics(rows);
    CHECK(p.alignment == m.alignment);
    CHECK(p.upr == m.upr);
    CHECK(p.conservativeness == m.conservativeness);
  }
}

TEST_CASE("compare_runs: reference before/after deltas") {
  MetricsReport before, after;
  before.n = after.n = 100;
  before.upr = 0.8529;
  before.overconfidence = 0.1087;
  after.upr = 0.9124;
  after.overconfidence = 0.0647;
  const auto d = compare_runs(before, after);
  const auto find = [&](std::string_view prefix) {
    return *std::find_if(d.begin(), d.end(), [&](const auto& x) { return x.name.starts_with(prefix); });
  };
  CHECK(100.0 * *find("UPR").delta == doctest::Approx(5.95));
  CHECK(100.0 * *find("Overcon").delta == doctest::Approx(-4.40));
  CHECK(find("UPR").better == Better::higher);
  CHECK(find("Overcon").better == Better::lower);
  CHECK(find("Align").better == Better::higher);
  CHECK(find("UPR").improved_or_equal());
  CHECK(find("Overcon").improved_or_equal());
}

TEST_CASE("compare_runs: identical reports give zero deltas; random pairs subtract field-wise") {
  SplitMix64 rng(3);
  const auto a = compute_metrics(random_rows(rng, 200));
  for (const auto& d : compare_runs(a, a)) {
    if (d.delta) CHECK(*d.delta == 0.0);
  }
  const auto b = compute_metrics(random_rows(rng, 200));
  const auto d = compare_runs(a, b);
  CHECK(d.size() == 6);
  CHECK(*d[0].delta == b.conf_ratio - a.conf_ratio);
  CHECK(*d[3].delta == b.alignment - a.alignment);
  const auto c = compute_metrics(random_rows(rng, 10));
  CHECK(error_code_of([&] { compare_runs(a, c); }) == Errc::invalid_argument);
}

TEST_CASE("average_reports averages fields and skips undefined UPR") {
  const auto a = compute_metrics(rows_from_counts(1, 1, 1, 1));
  const auto b = compute_metrics(std::vector<Outcome>(4, Outcome{1, 1}));
  const std::vector<MetricsReport> both = {a, b};
  const auto m = average_reports(both);
  CHECK(m.acc == doctest::Approx((a.acc + b.acc) / 2));
  CHECK(*m.upr == *a.upr);
  CHECK(check_identities(m).partition == doctest::Approx(0.0));
}

TEST_CASE("prob_confidence and mean_token_prob") {
  const std::vector<float> certain = {0.0f};
  CHECK(mean_token_prob(certain) == 1.0);
  CHECK(prob_confidence(certain, 1.0));
  const std::vector<float> halves = {static_cast<float>(std::log(0.5)), static_cast<float>(std::log(0.5))};
  CHECK(mean_token_prob(halves) == doctest::Approx(0.5));
  CHECK_FALSE(prob_confidence(halves, 0.6));
  CHECK(error_code_of([] { mean_token_prob(std::span<const float>{}); }) == Errc::invalid_argument);

  SplitMix64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> lps(1 + rng.below(20));
    for (auto& x : lps) x = static_cast<float>(-rng.uniform(0.0, 4.0));
    long double s = 0;
    for (float x : lps) s += std::exp(static_cast<long double>(x));
    CHECK(mean_token_prob(lps) == doctest::Approx(static_cast<double>(s / lps.size())).epsilon(1e-12));
  }
}

TEST_CASE("fit_threshold: separated probabilities pick the top of the perfect band") {
  std::vector<ProbRow> rows;
  for (double p : {0.9, 0.95, 0.99}) rows.push_back({p, 1});
  for (double p : {0.02, 0.05, 0.1}) rows.push_back({p, 0});
  const auto fit = fit_threshold(rows);
  CHECK(fit.alignment == 1.0);
  CHECK(fit.threshold == 0.9);
}

TEST_CASE("fit_threshold: all wrong means never confident") {
  const std::vector<ProbRow> rows = {{0.3, 0}, {0.8, 0}, {1.0, 0}};
  const auto fit = fit_threshold(rows);
  CHECK(fit.threshold > 1.0);
  CHECK(fit.alignment == 1.0);
}

TEST_CASE("fit_threshold: equals an exhaustive scan on random rows") {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ProbRow> rows(1 + rng.below(60));
    for (auto& r : rows) {
      r.mean_prob = std::round(rng.uniform() * 20.0) / 20.0;  // force ties
      r.correct = static_cast<std::uint8_t>(rng.below(2));
    }
    std::set<double> cands = {0.0, 1.0, std::nextafter(1.0, 2.0)};
    for (const auto& r : rows) cands.insert(r.mean_prob);
    double best = -1.0, best_t = 0.0;
    for (double t : cands) {
      const double a = alignment_at(rows, t);
      if (a >= best) {
        best = a;
        best_t = t;
      }
    }
    const auto fit = fit_threshold(rows);
    CHECK(fit.alignment == doctest::Approx(best).epsilon(1e-15));
    CHECK(fit.threshold == best_t);
    CHECK(alignment_at(rows, fit.threshold) == doctest::Approx(fit.alignment).epsilon(1e-15));
  }
}

TEST_CASE("rendering: column order and two decimals") {
  const auto r = compute_metrics(rows_from_counts(1072, 1087, 1540, 6301));
  const std::vector<NamedReport> rows = {{"Vanilla", r}};
  const auto md = render_markdown_table(rows);
  const auto header = md.substr(0, md.find('\n'));
  CHECK(header.find("Conf.") < header.find("UPR"));
  CHECK(header.find("UPR") < header.find("Overcon."));
  CHECK(header.find("Overcon.") < header.find("Align."));
  CHECK(md.find("| Vanilla | 21.59 | 85.29 | 10.87 | 73.73 |") != std::string::npos);
  const auto csv = render_csv(rows);
  CHECK(csv.find("Vanilla,21.59,85.29,10.87,73.73") != std::string::npos);
  CHECK(format_percent(0.123456) == "12.35");
}
