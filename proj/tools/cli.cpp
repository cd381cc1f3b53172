// Copyright 2026 The SoSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sosn/checks.hpp"
#include "sosn/config.hpp"
#include "sosn/episodes.hpp"
#include "sosn/power_norm.hpp"

namespace sosn::cli {

namespace {

namespace fs = std::filesystem;

inline constexpr const char* kTrainConfigFile = "config.json";
inline constexpr const char* kEvalConfigFile = "eval_config.json";
inline constexpr const char* kEvalFile = "eval.json";
inline constexpr const char* kManifestFile = "manifest.json";

// Published accuracies at the full training budget, printed next to eval
// results for comparison only.
const std::map<std::string, std::string>& reference_results() {
  static const std::map<std::string, std::string> refs = {
      {"omniglot-5w1s", "99.8 +- 0.1%"},
      {"miniimagenet-5w1s", "52.96 +- 0.83%"},
      {"miniimagenet-5w5s", "68.63 +- 0.68%"},
  };
  return refs;
}

struct Overrides {
  std::string config;
  std::string checkpoint;
  std::string protocol;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  std::string out;
};

// Flags win over the config file.
RunConfig resolve(const Overrides& o, bool training) {
  RunConfig c = o.config.empty() ? parse_run_config("{}") : load_run_config(o.config);
  if (!o.protocol.empty()) apply_protocol_flag(c.protocol, o.protocol);
  if (o.episodes) (training ? c.protocol.train_episodes : c.protocol.eval_episodes) = *o.episodes;
  if (o.workers) c.workers = *o.workers;
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  sync_model_episode_shape(c, training);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::uint64_t eval_stream(std::uint64_t seed) { return episode_seed(seed, ~std::uint64_t{0}); }

int cmd_train(const Overrides& o, std::ostream& out) {
  const RunConfig c = resolve(o, true);
  DatasetManifest manifest;
  ImageDataset data = load_run_dataset(c, true, &manifest);
  fs::create_directories(c.output_dir);
  const std::string resolved = run_config_to_json(c);
  write_text(fs::path(c.output_dir) / kTrainConfigFile, resolved);
  if (c.dataset.kind == DatasetKind::kFolder) {
    save_manifest((fs::path(c.output_dir) / kManifestFile).string(), manifest);
  }
  if (c.protocol.augmentation == Augmentation::kClassExpansion) data = augment_rotations(data);

  TrainOptions t;
  t.adam = c.optimizer;
  t.episodes = c.protocol.train_episodes;
  t.ways = c.protocol.ways;
  t.shots = c.protocol.shots;
  t.queries = c.protocol.train_queries;
  t.random_rotation = c.protocol.augmentation == Augmentation::kRandom;
  t.seed = c.seed;
  t.log_interval = c.log_interval;
  t.checkpoint_interval = c.checkpoint_interval;
  t.output_dir = c.output_dir;
  t.config_json = resolved;

  TrainState start;
  std::optional<SosnModel> model;
  if (!o.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    model.emplace(restore_model(ck, c.model));
    start = ck.state;
    out << "resuming from episode " << start.episode << '\n';
  } else {
    model.emplace(c.model, c.seed);
  }
  const TrainResult r = train(*model, data, t, start);
  for (const auto& rec : r.log) out << metric_to_json(rec) << '\n';
  out << "trained " << r.state.episode << " episodes; checkpoint "
      << (fs::path(c.output_dir) / kCheckpointFile).string() << '\n';
  return kOk;
}

int cmd_eval(const Overrides& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const RunConfig c = resolve(o, false);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SosnModel model = restore_model(ck, c.model);
  const ImageDataset data = load_run_dataset(c, false);

  EvalOptions e;
  e.ways = c.protocol.ways;
  e.shots = c.protocol.shots;
  e.queries = c.protocol.test_queries;
  e.episodes = c.protocol.eval_episodes;
  e.seed = eval_stream(c.seed);
  e.workers = c.workers;
  const EvalResult r = evaluate(model, data, e);

  const std::string record = eval_to_json(c.protocol.name, r);
  fs::create_directories(c.output_dir);
  write_text(fs::path(c.output_dir) / kEvalConfigFile, run_config_to_json(c));
  write_text(fs::path(c.output_dir) / kEvalFile, record + "\n");
  {
    std::ofstream log(fs::path(c.output_dir) / kMetricsFile, std::ios::app);
    log << record << '\n';
  }
  out << record << '\n';
  out << std::fixed << std::setprecision(2) << "accuracy " << 100.0 * r.mean << " +- "
      << 100.0 * r.ci95 << "% over " << r.episodes << " episodes\n";
  if (auto it = reference_results().find(c.protocol.name); it != reference_results().end()) {
    out << "published reference at full training budget: " << it->second << '\n';
  }
  return kOk;
}

int cmd_check(const std::string& suite, std::ostream& out, std::ostream& err) {
  std::vector<std::string> suites = checks::suite_names();
  if (!suite.empty()) suites = {suite};
  out << std::left << std::setw(10) << "suite" << std::setw(46) << "check" << std::setw(12)
      << "measured" << std::setw(11) << "threshold" << "result\n";
  const checks::CheckRow* failure = nullptr;
  std::string failed_suite;
  std::vector<checks::SuiteReport> reports;
  reports.reserve(suites.size());
  for (const auto& name : suites) {
    reports.push_back(checks::run_suite(name));
    const auto& rep = reports.back();
    for (const auto& row : rep.rows) {
      char measured[32];
      char threshold[32];
      std::snprintf(measured, sizeof measured, "%.3e", row.measured);
      std::snprintf(threshold, sizeof threshold, "%.0e", row.threshold);
      out << std::left << std::setw(10) << rep.suite << std::setw(46) << row.name
          << std::setw(12) << measured << std::setw(11) << threshold
          << (row.passed ? "pass" : "FAIL") << '\n';
    }
    out << std::left << std::setw(10) << rep.suite << (rep.passed() ? "passed" : "FAILED")
        << " in " << std::fixed << std::setprecision(2) << rep.seconds << " s\n";
    out.unsetf(std::ios::floatfield);
    if (failure == nullptr && !rep.passed()) {
      failure = rep.first_failure();
      failed_suite = rep.suite;
    }
  }
  if (failure != nullptr) {
    err << "check failed: " << failed_suite << ": " << failure->name << " (measured "
        << failure->measured << ", threshold " << failure->threshold << ")\n";
    return kCheckFailed;
  }
  return kOk;
}

int cmd_curves(const Overrides& o, std::ostream& out) {
  std::size_t n = 49;
  if (!o.config.empty()) n = load_run_config(o.config).model.spatial_count();
  const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto grid = pn::uniform_grid(-1.0, 1.0, 1001);
  struct File {
    const char* name;
    bool smoothed;
    pn::CurveColumn column;
  };
  for (const File& f : {File{"values.csv", false, pn::CurveColumn::kValue},
                        File{"derivatives.csv", false, pn::CurveColumn::kDerivative},
                        File{"smoothed.csv", true, pn::CurveColumn::kDerivative}}) {
    const fs::path path = dir / f.name;
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    pn::write_curve_table(os, pn::figure_curves(n, f.smoothed), grid, f.column);
    os.flush();
    if (!os) throw DataError("cannot write " + path.string());
    out << "wrote " << path.string() << '\n';
  }
  return kOk;
}

void add_run_flags(CLI::App* cmd, Overrides& o, bool checkpoint_required) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)");
  auto* ck = cmd->add_option("--checkpoint", o.checkpoint,
                             checkpoint_required ? "Checkpoint to evaluate"
                                                 : "Checkpoint to resume from");
  if (checkpoint_required) ck->required();
  cmd->add_option("--protocol", o.protocol, "Built-in protocol name or <L>w<Z>s");
  cmd->add_option("--episodes", o.episodes, "Episode count");
  cmd->add_option("--workers", o.workers, "Evaluation worker threads");
  cmd->add_option("--seed", o.seed, "Seed for all randomness");
  cmd->add_option("--out", o.out, "Output directory");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Second-order similarity network for few-shot learning", "sosn"};
  app.require_subcommand(1);
  Overrides train_o;
  Overrides eval_o;
  Overrides curves_o;
  std::string suite;

  auto* train_cmd = app.add_subcommand("train", "Episodic training");
  add_run_flags(train_cmd, train_o, false);
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_run_flags(eval_cmd, eval_o, true);
  auto* check_cmd = app.add_subcommand("check", "Run the oracle suites");
  check_cmd->add_option("--suite", suite, "Only this suite: prop1, appendix, gradcheck, fit");
  auto* curves_cmd = app.add_subcommand("curves", "Export power-normalization curves");
  curves_cmd->add_option("--out", curves_o.out, "Output directory");
  curves_cmd->add_option("--config", curves_o.config, "Run configuration for N");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_o, out);
    if (eval_cmd->parsed()) return cmd_eval(eval_o, out);
    if (check_cmd->parsed()) return cmd_check(suite, out, err);
    if (curves_cmd->parsed()) return cmd_curves(curves_o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kInternalError;
}

}  // namespace sosn::cli
