// kbprobe: command-line driver for the confidence-probing study.
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kbprobe/http_backend.hpp"
#include "kbprobe/mock_backend.hpp"
#include "kbprobe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kbprobe;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string pooling;
  std::optional<int> beta;
  std::string k_set;
  std::string backend;
  std::string endpoint;
  std::optional<long> timeout_ms;
  std::optional<unsigned> parallelism;
  std::string mc_estimator;
  std::vector<std::string> dumps;
  std::string run_dir;
  std::string out = "runs";
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run config; flags below override it");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--pooling", o.pooling, "Pooled state for the estimator")->check(CLI::IsMember({"pre", "last", "avg"}));
  cmd->add_option("--beta", o.beta, "Consistency threshold");
  cmd->add_option("--k-set", o.k_set, "Option counts for the multiple-choice variants, e.g. 2,4,6,8");
  cmd->add_option("--backend", o.backend, "Generation backend")->check(CLI::IsMember({"mock", "http", "dump"}));
  cmd->add_option("--endpoint", o.endpoint, "HTTP backend base URL (default: $KBPROBE_ENDPOINT)");
  cmd->add_option("--timeout-ms", o.timeout_ms, "HTTP backend timeout");
  cmd->add_option("--parallelism", o.parallelism, "Concurrent backend requests");
  cmd->add_option("--mc-estimator", o.mc_estimator, "Estimator for multiple-choice verdicts")
      ->check(CLI::IsMember({"per_k", "joint", "freeform"}));
  cmd->add_option("--dump", o.dumps, "Dump file served by the dump backend (repeatable)");
  cmd->add_option("--run-dir", o.run_dir, "Existing run directory to work in");
  cmd->add_option("--out", o.out, "Parent directory for a new run-<timestamp> directory");
}

std::vector<int> parse_k_set(const std::string& text) {
  std::vector<int> ks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      ks.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "bad --k-set entry '" + item + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return ks;
}

RunConfig resolve_config(const Overrides& o, const RunLayout* layout) {
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = RunConfig::load(o.config);
  } else if (layout != nullptr && fs::exists(layout->config())) {
    cfg = RunConfig::load(layout->config());
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.pooling.empty()) cfg.pooling = parse_pooling(o.pooling);
  if (o.beta) cfg.calibration.beta = *o.beta;
  if (!o.k_set.empty()) cfg.calibration.k_set = parse_k_set(o.k_set);
  auto j = cfg.to_json();
  if (!o.backend.empty()) j["backend"]["kind"] = o.backend;
  if (!o.mc_estimator.empty()) j["mc_estimator"] = o.mc_estimator;
  if (!o.dumps.empty()) j["backend"]["dumps"] = o.dumps;
  cfg = RunConfig::from_json(j);
  if (!o.endpoint.empty()) cfg.backend.endpoint = o.endpoint;
  if (o.timeout_ms) cfg.backend.timeout = std::chrono::milliseconds(*o.timeout_ms);
  if (o.parallelism) cfg.backend.parallelism = *o.parallelism;
  cfg.validate();
  return cfg;
}

// Commands that start a study create a fresh run directory unless one is given;
// downstream commands need --run-dir.
RunLayout resolve_layout(const Overrides& o, bool may_create) {
  if (!o.run_dir.empty()) {
    fs::create_directories(o.run_dir);
    return RunLayout{o.run_dir};
  }
  if (!may_create) throw Error(Errc::invalid_argument, "--run-dir is required for this command");
  return RunLayout{make_run_dir(o.out)};
}

int finish(const std::string& command, const CommandResult& r) {
  for (const auto& n : r.notes) std::cerr << "[" << command << "] " << n << '\n';
  if (r.item_errors > 0) {
    std::cerr << "[" << command << "] " << r.item_errors << " per-item error(s); see errors/ in the run directory\n";
    return 1;
  }
  return 0;
}

void save_config(const RunConfig& cfg, const RunLayout& layout) {
  fs::create_directories(layout.root);
  std::ofstream(layout.config(), std::ios::trunc) << cfg.to_json().dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kbprobe: probe hidden states for knowledge-boundary confidence and calibrate with C3"};
  app.require_subcommand(1);

  Overrides o;
  std::string questions;
  std::string split = "test";
  std::optional<std::size_t> balance_n;
  std::string host = "127.0.0.1";
  int port = 8765;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with the mock backend");
  auto* ingest = app.add_subcommand("ingest", "Generate answers and states for a question file");
  auto* reformulate = app.add_subcommand("reformulate", "Build multiple-choice variants and query them");
  auto* train = app.add_subcommand("train", "Train the estimator ensembles");
  auto* predict = app.add_subcommand("predict", "Emit confidence verdicts for the test split");
  auto* calibrate = app.add_subcommand("calibrate", "Apply consistency-based calibration to the verdicts");
  auto* report = app.add_subcommand("report", "Write the metric tables");
  auto* run = app.add_subcommand("run", "synth, train, predict, calibrate and report in one go");
  auto* serve = app.add_subcommand("serve", "Serve the mock backend over HTTP");

  for (auto* c : {synth, ingest, reformulate, train, predict, calibrate, report, run, serve}) add_common(c, o);
  ingest->add_option("--questions", questions, "JSONL rows {id, question, gold_answers}")->required();
  ingest->add_option("--split", split, "Split tag")->check(CLI::IsMember({"train", "dev", "test"}));
  ingest->add_option("--balance", balance_n, "Keep this many records per label");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");

  CLI11_PARSE(app, argc, argv);

  auto* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    const bool starts_run = cmd == synth || cmd == ingest || cmd == run;
    if (cmd == serve) {
      std::optional<RunLayout> layout;
      if (!o.run_dir.empty()) layout = RunLayout{o.run_dir};
      auto cfg = resolve_config(o, layout ? &*layout : nullptr);
      cfg.backend.kind = BackendKind::mock;
      auto backend = make_backend(cfg, layout ? *layout : RunLayout{fs::path{}});
      BackendServer server(*backend);
      std::cerr << "[serve] mock backend on http://" << host << ":" << port << '\n';
      return server.listen(host, port) ? 0 : 1;
    }

    const RunLayout layout = resolve_layout(o, starts_run);
    const auto cfg = resolve_config(o, &layout);
    save_config(cfg, layout);
    std::cerr << "[" << name << "] run directory " << layout.root.string() << '\n';

    CommandResult result;
    if (cmd == synth) {
      result = cmd_synth(cfg, layout);
    } else if (cmd == ingest) {
      auto backend = make_backend(cfg, layout);
      result = cmd_ingest(cfg, layout, *backend, questions, parse_split(split), balance_n);
    } else if (cmd == reformulate) {
      auto backend = make_backend(cfg, layout);
      result = cmd_reformulate(cfg, layout, *backend);
    } else if (cmd == train) {
      result = cmd_train(cfg, layout);
    } else if (cmd == predict) {
      result = cmd_predict(cfg, layout);
    } else if (cmd == calibrate) {
      result = cmd_calibrate(cfg, layout);
    } else if (cmd == report) {
      result = cmd_report(cfg, layout);
      std::cerr << "[report] " << (layout.report_dir() / "report.md").string() << '\n';
    } else if (cmd == run) {
      result = run_synthetic_study(cfg, layout);
    }
    return finish(name, result);
  } catch (const Error& e) {
    std::cerr << "kbprobe " << name << ": " << errc_name(e.code()) << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "kbprobe " << name << ": " << e.what() << '\n';
    return 2;
  }
}
