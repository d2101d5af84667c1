#include <doctest.h>

#include <nlohmann/json.hpp>

#include "kbprobe/http_backend.hpp"
#include "kbprobe/pipeline.hpp"
#include "support.hpp"

using namespace kbprobe;
using kbtest::error_code_of;
using kbtest::slurp;
using kbtest::TempDir;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.synth.h = 16;
  cfg.synth.n_train_per_class = 120;
  cfg.synth.n_dev = 60;
  cfg.synth.n_test = 200;
  cfg.synth.overconfident_rate = 0.6;
  cfg.train.threads = 3;
  return cfg;
}

// Every regular file under root except timing logs, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).generic_string();
    if (rel == "timings.jsonl" || rel == "config.json") continue;
    out[rel] = slurp(e.path());
  }
  return out;
}

void check_same_files(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b,
                      const std::vector<std::string>& names) {
  for (const auto& n : names) {
    INFO("file " << n);
    REQUIRE(a.count(n) == 1);
    REQUIRE(b.count(n) == 1);
    CHECK(a.at(n) == b.at(n));
  }
}

void downstream(const RunConfig& cfg, const RunLayout& layout) {
  CHECK(cmd_train(cfg, layout).item_errors == 0);
  CHECK(cmd_predict(cfg, layout).item_errors == 0);
  CHECK(cmd_calibrate(cfg, layout).item_errors == 0);
  CHECK(cmd_report(cfg, layout).item_errors == 0);
}

nlohmann::json report_json(const RunLayout& layout) {
  return nlohmann::json::parse(slurp(layout.report_dir() / "report.json"));
}

// Shared fixture: one full study, computed once.
struct Study {
  TempDir dir;
  RunConfig cfg = small_config();
  RunLayout layout{dir.path() / "run"};
  CommandResult result;
  Study() {
    fs::create_directories(layout.root);
    result = run_synthetic_study(cfg, layout);
  }
};

Study& study() {
  static Study s;
  return s;
}

}  // namespace

TEST_CASE("config: JSON round trip, unknown keys and validation") {
  auto cfg = small_config();
  cfg.pooling = Pooling::avg;
  cfg.calibration.beta = 1;
  cfg.calibration.k_set = {2, 4};
  cfg.backend.kind = BackendKind::http;
  cfg.backend.endpoint = "http://localhost:1";
  cfg.mc_estimator = McEstimatorMode::joint;
  const auto j = cfg.to_json();
  CHECK(RunConfig::from_json(j).to_json() == j);

  auto bad = j;
  bad["pooling_mode"] = "avg";
  CHECK(error_code_of([&] { RunConfig::from_json(bad); }) == Errc::invalid_argument);
  bad = j;
  bad["train"]["lr"] = 0.1;
  CHECK(error_code_of([&] { RunConfig::from_json(bad); }) == Errc::invalid_argument);
  bad = j;
  bad["calibration"]["beta"] = 3;
  CHECK(error_code_of([&] { RunConfig::from_json(bad); }) == Errc::invalid_argument);
  bad = j;
  bad["pooling"] = "max";
  CHECK(error_code_of([&] { RunConfig::from_json(bad); }) == Errc::invalid_argument);

  const auto defaults = RunConfig::from_json(nlohmann::json::object());
  CHECK(defaults.calibration.k_set == std::vector<int>{2, 4, 6, 8});
  CHECK(defaults.calibration.beta == 0);
  CHECK(defaults.pooling == Pooling::last);
  CHECK(defaults.train.epochs == 30);
  CHECK(defaults.synth.n_train_per_class == 1000);
  CHECK(defaults.synth.n_dev == 500);
  CHECK(defaults.synth.n_test == 500);
}

TEST_CASE("run dirs are timestamped and never reused") {
  TempDir dir;
  const auto a = make_run_dir(dir.path());
  const auto b = make_run_dir(dir.path());
  CHECK(a != b);
  CHECK(a.filename().string().starts_with("run-"));
  CHECK(fs::is_directory(a));
  CHECK(fs::is_directory(b));
}

TEST_CASE("missing artifacts name the command that produces them") {
  TempDir dir;
  const RunLayout layout{dir.path()};
  const auto cfg = small_config();
  const auto message_of = [](auto&& fn) -> std::string {
    try {
      fn();
    } catch (const Error& e) {
      CHECK(e.code() == Errc::missing_artifact);
      return e.what();
    }
    FAIL("expected missing_artifact");
    return {};
  };
  CHECK(message_of([&] { cmd_calibrate(cfg, layout); }).find("kbprobe predict") != std::string::npos);
  CHECK(message_of([&] { cmd_predict(cfg, layout); }).find("kbprobe synth") != std::string::npos);
  CHECK(message_of([&] { cmd_train(cfg, layout); }).find("kbprobe synth") != std::string::npos);
  CHECK(message_of([&] { cmd_report(cfg, layout); }).find("kbprobe calibrate") != std::string::npos);
  auto mock = make_backend(cfg, layout);
  CHECK(message_of([&] { cmd_reformulate(cfg, layout, *mock); }).find("kbprobe ingest") != std::string::npos);
}

TEST_CASE("questions JSONL round trip") {
  TempDir dir;
  const std::vector<QuestionRow> rows = {{"a", "Who?", {"X", "Y"}}, {"b", "When \"now\"?", {"1969"}}};
  write_questions(dir / "q.jsonl", rows);
  const auto back = read_questions(dir / "q.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[1].question == "When \"now\"?");
  CHECK(back[0].gold_answers == std::vector<std::string>{"X", "Y"});
}

TEST_CASE("synthetic study: artifacts, balance and report") {
  auto& s = study();
  CHECK(s.result.item_errors == 0);
  const auto& L = s.layout;
  const auto train = read_dump(L.dump(SplitTag::train));
  CHECK(train.count_label(0) == 120);
  CHECK(train.count_label(1) == 120);
  CHECK(read_dump(L.dump(SplitTag::dev)).records.size() == 60);
  CHECK(read_dump(L.dump(SplitTag::test)).records.size() == 200);
  const auto mc = read_dump(L.mc_dump(SplitTag::test));
  CHECK(mc.records.size() == 200 * 4);
  for (const auto& r : mc.records) CHECK((r.k == 2 || r.k == 4 || r.k == 6 || r.k == 8));
  for (std::uint64_t seed : {0, 42, 100}) CHECK(fs::exists(L.model("free", seed)));
  CHECK(fs::exists(L.verdicts("ensemble")));
  CHECK(fs::exists(L.calibrated("ensemble")));
  CHECK(fs::exists(L.flips("ensemble")));
  CHECK(fs::exists(L.report_dir() / "report.md"));
  CHECK(fs::exists(L.report_dir() / "report.csv"));
  CHECK_FALSE(fs::exists(L.root / "errors"));

  const auto rep = report_json(L);
  CHECK(rep.at("inference_call_budget") == 5);
  for (const auto& id : rep.at("identities")) {
    CHECK(id.at("ok") == true);
    CHECK(std::abs(id.at("partition").get<double>()) <= 1e-9);
  }
  // Calibration only revokes, so confidence and overconfidence cannot rise.
  const auto& cmp = rep.at("comparisons").at(0);
  CHECK(cmp.at("title") == "Vanilla vs C3 (seed ensemble)");
  for (const auto& d : cmp.at("deltas")) {
    if (d.at("metric") == "Overcon." || d.at("metric") == "Conf.") CHECK(d.at("delta").get<double>() <= 0.0);
    if (d.at("metric") == "UPR") CHECK(d.at("delta").get<double>() >= 0.0);
  }
  const auto md = slurp(L.report_dir() / "report.md");
  CHECK(md.find("| Vanilla |") != std::string::npos);
  CHECK(md.find("| C3 |") != std::string::npos);
}

TEST_CASE("commands are idempotent") {
  auto& s = study();
  const auto before = snapshot(s.layout.root);
  downstream(s.cfg, s.layout);
  const auto after = snapshot(s.layout.root);
  CHECK(before.size() == after.size());
  for (const auto& [name, bytes] : before) {
    INFO("file " << name);
    CHECK(after.at(name) == bytes);
  }
}

TEST_CASE("backend substitutability: http serving the mock reproduces the mock run") {
  auto& s = study();
  auto mock = make_backend(s.cfg, s.layout);
  BackendServer server(*mock);
  const int port = server.start();

  TempDir dir;
  const RunLayout L{dir.path()};
  auto cfg = s.cfg;
  cfg.backend.kind = BackendKind::http;
  cfg.backend.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.backend.binary_states = true;
  auto http = make_backend(cfg, L);
  const auto src = s.layout.root / "data" / "source";
  CHECK(cmd_ingest(cfg, L, *http, src / "train_pool_questions.jsonl", SplitTag::train,
                   cfg.synth.n_train_per_class)
            .item_errors == 0);
  CHECK(cmd_ingest(cfg, L, *http, src / "dev_questions.jsonl", SplitTag::dev).item_errors == 0);
  CHECK(cmd_ingest(cfg, L, *http, src / "test_questions.jsonl", SplitTag::test).item_errors == 0);
  CHECK(cmd_reformulate(cfg, L, *http).item_errors == 0);
  server.stop();
  downstream(cfg, L);

  const auto a = snapshot(s.layout.root);
  const auto b = snapshot(L.root);
  check_same_files(a, b,
                   {"data/train.kbhs", "data/test.kbhs", "data/test_mc.kbhs", "data/test_cand.kbhs",
                    "models/free_seed0.kbmlp", "verdicts/ensemble.jsonl", "calibrated/ensemble.jsonl",
                    "report/report.csv"});
}

TEST_CASE("backend substitutability: dump replay of the mock run") {
  auto& s = study();
  TempDir dir;
  const RunLayout L{dir.path()};
  auto cfg = s.cfg;
  cfg.backend.kind = BackendKind::dump;
  for (auto split : {SplitTag::train, SplitTag::dev, SplitTag::test}) {
    cfg.backend.dumps.push_back(s.layout.dump(split));
    cfg.backend.dumps.push_back(s.layout.candidates_dump(split));
    cfg.backend.dumps.push_back(s.layout.mc_dump(split));
  }
  auto replay = make_backend(cfg, L);
  for (auto split : {SplitTag::train, SplitTag::dev, SplitTag::test}) {
    CHECK(cmd_ingest(cfg, L, *replay, s.layout.questions(split), split).item_errors == 0);
  }
  CHECK(cmd_reformulate(cfg, L, *replay).item_errors == 0);
  downstream(cfg, L);

  const auto a = snapshot(s.layout.root);
  const auto b = snapshot(L.root);
  check_same_files(a, b,
                   {"data/train.kbhs", "data/test.kbhs", "data/test_mc.kbhs", "models/free_seed42.kbmlp",
                    "calibrated/ensemble.jsonl", "report/report.csv"});
}

TEST_CASE("per-item failures are recorded and the rest of the run continues") {
  TempDir dir;
  const RunLayout L{dir.path()};
  auto cfg = small_config();
  cfg.synth.n_train_per_class = 60;
  cfg.synth.n_dev = 0;
  cfg.synth.n_test = 80;
  cfg.synth.error_rate = 0.05;
  cfg.train.epochs = 3;
  const auto res = run_synthetic_study(cfg, L);
  CHECK(res.item_errors > 0);
  REQUIRE(fs::exists(L.root / "errors"));
  std::size_t lines = 0;
  for (const auto& e : fs::directory_iterator(L.root / "errors")) {
    const auto text = slurp(e.path());
    lines += static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    CHECK(first.contains("id"));
    CHECK(first.contains("code"));
  }
  CHECK(lines >= res.item_errors);
  CHECK(fs::exists(L.report_dir() / "report.json"));
  CHECK(read_dump(L.dump(SplitTag::train)).count_label(1) == 60);
}
