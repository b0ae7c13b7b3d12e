// SPDX-License-Identifier: Apache-2.0
// anop: experiment runner for anchor-token prompt learning on a synthetic world.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "anop/app/checkpoint.hpp"
#include "anop/app/config.hpp"
#include "anop/app/runner.hpp"

namespace fs = std::filesystem;
using namespace anop;
using namespace anop::app;

namespace {

enum Exit { kOk = 0, kConfig = 2, kRuntime = 3, kGate = 4 };

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string command;
};

ExperimentConfig resolve(const Options& o) {
  if (o.config_path.empty()) throw ConfigError("--config", 0, "a config file is required");
  ExperimentConfig c = load_config(o.config_path, o.overrides);
  if (const char* env = std::getenv("ANOP_OUT"); env && *env) c.output_dir = env;
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.seeds = {*o.seed};
  return c;
}

// Rows are flushed as they arrive so a failed command leaves what it finished.
class CsvFile {
 public:
  explicit CsvFile(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << csv_header();
  }
  void add(const RunOutcome& r) { out_ << csv_row(r) << std::flush; }

 private:
  std::ofstream out_;
};

std::vector<RunOutcome> run_all(Experiment& ex, const std::vector<RunSpec>& specs, const fs::path& csv) {
  fs::create_directories(ex.config().output_dir);
  CsvFile file(csv);
  std::vector<RunOutcome> out;
  for (const RunSpec& s : specs) {
    out.push_back(ex.run(s));
    file.add(out.back());
  }
  return out;
}

int cmd_pretrain(Experiment& ex) {
  const auto& r = ex.pretrain_report();
  std::cout << "encoder checkpoint: " << ex.encoder_path() << (ex.encoder_from_cache() ? " (cached)" : "") << "\n"
            << "pretrain steps: " << r.steps << "\nheld-out retrieval: " << r.retrieval << "\n"
            << "parameter hash: " << ex.stack().parameter_hash() << "\n";
  return kOk;
}

int cmd_train_anchor(Experiment& ex) {
  for (std::uint64_t seed : ex.config().seeds) {
    const RunSpec spec = ex.spec(train::Method::anchoropt, Paradigm::two_stage, seed);
    train::TrainState state = ex.init_state(spec);
    const auto r = ex.stage1(spec, state);
    const std::string path = (fs::path(ex.run_dir(spec.run_id)) / "stage1.ckpt").string();
    ex.save_state(spec, state, path);
    std::cout << spec.run_id << ": stage I loss " << r.loss_trace.front() << " -> " << r.loss_trace.back() << ", "
              << path << "\n";
  }
  return kOk;
}

int cmd_adapt(Experiment& ex, const std::string& state_path) {
  for (train::Method m : ex.config().methods) {
    for (std::uint64_t seed : ex.config().seeds) {
      const RunSpec spec = ex.spec(m, Paradigm::two_stage, seed);
      const fs::path dir = ex.run_dir(spec.run_id);
      train::TrainState state;
      if (!state_path.empty()) {
        state = ex.load_state(state_path);
      } else if (m == train::Method::anchoropt && fs::exists(dir / "stage1.ckpt")) {
        state = ex.load_state((dir / "stage1.ckpt").string());
      } else {
        state = ex.init_state(spec);
        if (m == train::Method::anchoropt) ex.stage1(spec, state);
      }
      const auto r = ex.stage2(spec, state);
      ex.save_state(spec, state, (dir / "state.ckpt").string());
      std::cout << spec.run_id << ": stage II ce " << r.trace.back().ce << " kd " << r.trace.back().kd << "\n";
    }
  }
  return kOk;
}

int cmd_eval(Experiment& ex, const std::string& state_path) {
  fs::create_directories(ex.config().output_dir);
  CsvFile file(fs::path(ex.config().output_dir) / "eval.csv");
  std::vector<RunOutcome> rows;
  auto one = [&](const RunSpec& spec, const std::string& path) {
    RunOutcome o;
    o.spec = spec;
    o.state = ex.load_state(path);
    o.metrics = ex.evaluate(spec, o.state);
    file.add(o);
    rows.push_back(std::move(o));
  };
  if (!state_path.empty()) {
    train::Method m = train::Method::anchoropt;
    const train::TrainState s = ex.load_state(state_path, &m);
    one(ex.spec(m, ex.config().paradigm, s.seed), state_path);
  } else {
    for (train::Method m : ex.config().methods) {
      for (std::uint64_t seed : ex.config().seeds) {
        const RunSpec spec = ex.spec(m, ex.config().paradigm, seed);
        one(spec, (fs::path(ex.run_dir(spec.run_id)) / "state.ckpt").string());
      }
    }
  }
  std::cout << markdown_table(summarize_by(rows, false));
  return kOk;
}

int cmd_run(Experiment& ex, Paradigm paradigm, const std::vector<train::Method>& methods, const std::string& csv) {
  std::vector<RunSpec> specs;
  for (train::Method m : methods) {
    for (std::uint64_t seed : ex.config().seeds) specs.push_back(ex.spec(m, paradigm, seed));
  }
  const auto runs = run_all(ex, specs, fs::path(ex.config().output_dir) / csv);
  std::cout << markdown_table(summarize_by(runs, false));
  return kOk;
}

int cmd_ablate(Experiment& ex, const std::string& axis) {
  std::vector<RunSpec> specs;
  for (const std::string& value : ablation_values(axis)) {
    for (std::uint64_t seed : ex.config().seeds) {
      RunSpec s = ex.spec(train::Method::anchoropt, ex.config().paradigm, seed);
      apply_ablation(s, axis, value);
      specs.push_back(s);
    }
  }
  const auto runs = run_all(ex, specs, fs::path(ex.config().output_dir) / ("ablate_" + axis + ".csv"));
  std::cout << markdown_table(summarize_by(runs, true), axis);
  return kOk;
}

int cmd_compare(Experiment& ex, bool gate) {
  std::vector<RunSpec> specs;
  for (train::Method m : {train::Method::coop, train::Method::atprompt, train::Method::anchoropt}) {
    for (std::uint64_t seed : ex.config().seeds) specs.push_back(ex.spec(m, Paradigm::two_stage, seed));
  }
  const auto runs = run_all(ex, specs, fs::path(ex.config().output_dir) / "compare.csv");
  const auto rows = summarize_by(runs, false);
  const std::string table = markdown_table(rows);
  std::ofstream(fs::path(ex.config().output_dir) / "compare.md") << table;
  std::cout << table;
  if (!gate) return kOk;
  const MethodSummary* coop = nullptr;
  const MethodSummary* anchored = nullptr;
  for (const auto& r : rows) {
    if (r.name == "coop") coop = &r;
    if (r.name == "anchoropt") anchored = &r;
  }
  const bool novel_ok = anchored->novel.mean > coop->novel.mean;
  const bool hm_ok = anchored->hm.mean >= coop->hm.mean - 0.5;
  std::cout << "gate: novel " << (novel_ok ? "ok" : "FAILED") << ", hm " << (hm_ok ? "ok" : "FAILED") << "\n";
  return novel_ok && hm_ok ? kOk : kGate;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anop: anchor-token prompt learning on a synthetic vision-language world"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "experiment config file");
  app.add_option("--seed", o.seed, "run a single seed instead of experiment.seeds");
  app.add_option("--out", o.out, "output directory (overrides ANOP_OUT and output.dir)");
  app.add_option("--override", o.overrides, "key=value, repeatable");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain or load the frozen encoder");
  auto* train_anchor = app.add_subcommand("train-anchor", "stage I: fit anchor tokens to descriptions");
  auto* adapt = app.add_subcommand("adapt", "stage II: adapt soft tokens and the position matrix");
  auto* one_stage = app.add_subcommand("one-stage", "alternating single-stage training and evaluation");
  auto* eval = app.add_subcommand("eval", "evaluate saved states");
  auto* run = app.add_subcommand("run", "full pipeline for experiment.methods");
  auto* ablate = app.add_subcommand("ablate", "one-axis ablation grid");
  auto* compare = app.add_subcommand("compare", "CoOp / attribute / anchor prompts side by side");
  auto* dump = app.add_subcommand("dump-world", "print the world's classes and attribute mixtures");

  std::string state_path;
  adapt->add_option("--state", state_path, "start from this checkpoint");
  eval->add_option("--state", state_path, "evaluate this checkpoint only");
  std::vector<std::string> axes;
  ablate->add_option("--axis", axes, "axis to vary")->required();
  std::size_t n_seeds = 0;
  bool gate = false;
  compare->add_option("--seeds", n_seeds, "seeds 0..n-1");
  compare->add_flag("--assert", gate, "exit 4 unless anchors beat CoOp on novel classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  for (int i = 1; i < argc; ++i) o.command += (i > 1 ? " " : "") + std::string(argv[i]);

  ExperimentConfig config;
  try {
    config = resolve(o);
    if (*compare && n_seeds > 0) {
      config.seeds.clear();
      for (std::uint64_t s = 0; s < n_seeds; ++s) config.seeds.push_back(s);
    }
    if (*ablate) single_axis(axes);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  if (*dump) {
    std::cout << world::describe_world(world::generate_world(config.world));
    return kOk;
  }

  std::unique_ptr<Experiment> ex;
  try {
    ex = std::make_unique<Experiment>(config, std::cerr);
    int code = kOk;
    if (*pretrain) code = cmd_pretrain(*ex);
    if (*train_anchor) code = cmd_train_anchor(*ex);
    if (*adapt) code = cmd_adapt(*ex, state_path);
    if (*one_stage) code = cmd_run(*ex, Paradigm::one_stage, {train::Method::anchoropt}, "one_stage.csv");
    if (*eval) code = cmd_eval(*ex, state_path);
    if (*run) code = cmd_run(*ex, config.paradigm, config.methods, "metrics.csv");
    if (*ablate) code = cmd_ablate(*ex, axes.front());
    if (*compare) code = cmd_compare(*ex, gate);
    ex->write_manifest(o.command);
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    try {
      if (ex) {
        ex->write_failure(o.command, e.what());
      } else {
        fs::create_directories(config.output_dir);
        const nlohmann::ordered_json m{{"tool", "anop"}, {"command", o.command}, {"status", "failed"},
                                       {"stage", "setup"},   {"error", e.what()}, {"completed_runs", nlohmann::json::array()}};
        std::ofstream(fs::path(config.output_dir) / "failure.json") << m.dump(2) << "\n";
        std::cerr << "failure manifest: " << (fs::path(config.output_dir) / "failure.json").string() << "\n";
      }
    } catch (const std::exception&) {
    }
    return kRuntime;
  }
}
