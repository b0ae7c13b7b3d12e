// SPDX-License-Identifier: Apache-2.0
#include "anop/app/runner.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "anop/app/checkpoint.hpp"
#include "anop/util/rng.hpp"

namespace anop::app {
namespace fs = std::filesystem;
namespace {

constexpr const char* kVersion = "0.1.0";

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

const std::map<std::string, std::vector<std::string>>& axis_grid() {
  static const std::map<std::string, std::vector<std::string>> grid{
      {"preposition", {"of", "with", "at", "sun", "sea", "none"}},
      {"anchor_length", {"1", "2", "3", "4"}},
      {"arrangement", {"matrix", "before_soft", "middle", "after_class"}},
      {"kd", {"on", "off"}},
      {"gumbel_tau", {"0.1", "0.5", "1", "2", "4"}},
      {"ensemble", {"on", "off"}},
      {"paradigm", {"one_stage", "two_stage"}}};
  return grid;
}

nlohmann::ordered_json run_json(const RunSpec& s) {
  const train::TrainConfig& t = s.train;
  const bool matrix = s.method == train::Method::anchoropt && t.arrangement == prompt::Arrangement::matrix;
  return {{"run_id", s.run_id},
          {"method", train::method_name(s.method)},
          {"paradigm", paradigm_name(s.paradigm)},
          {"axis", s.axis},
          {"value", s.value},
          {"seed", s.seed},
          {"soft_length", t.soft_length},
          {"anchor_length", t.anchor_length},
          {"preposition", preposition_name(t.preposition)},
          {"arrangement", prompt::arrangement_name(t.arrangement)},
          {"position_matrix", matrix},
          {"position_forward", prompt::position_forward_name(t.position_forward)},
          {"gumbel_temperature", t.gumbel_temperature},
          {"deep_depth", t.deep_depth},
          {"lambda_ce", t.lambda_ce},
          {"lambda_kd", t.lambda_kd},
          {"kd_direction", train::kd_direction_name(t.kd_direction)},
          {"ensemble", s.ensemble},
          {"stage1_steps", t.stage1_steps},
          {"stage2_steps", t.stage2_steps}};
}

}  // namespace

std::vector<std::string> ablation_axes() {
  return {"preposition", "anchor_length", "arrangement", "kd", "gumbel_tau", "ensemble", "paradigm"};
}

std::vector<std::string> ablation_values(const std::string& axis) {
  const auto it = axis_grid().find(axis);
  if (it == axis_grid().end()) throw ConfigError("--axis", 0, "unknown ablation axis '" + axis + "'");
  return it->second;
}

void apply_ablation(RunSpec& spec, const std::string& axis, const std::string& value) {
  const auto values = ablation_values(axis);
  if (std::find(values.begin(), values.end(), value) == values.end()) {
    throw ConfigError("--axis", 0, "value '" + value + "' is not on the " + axis + " grid");
  }
  train::TrainConfig& t = spec.train;
  if (axis == "preposition") {
    t.preposition = parse_preposition(value);
  } else if (axis == "anchor_length") {
    t.anchor_length = std::stoul(value);
  } else if (axis == "arrangement") {
    t.arrangement = prompt::parse_arrangement(value);
  } else if (axis == "kd") {
    if (value == "off") t.lambda_kd = 0.0;
  } else if (axis == "gumbel_tau") {
    t.gumbel_temperature = std::stod(value);
  } else if (axis == "ensemble") {
    spec.ensemble = value == "on";
  } else if (axis == "paradigm") {
    spec.paradigm = parse_paradigm(value);
    if (spec.paradigm == Paradigm::one_stage) t.lambda_kd = 0.0;
  }
  spec.axis = axis;
  spec.value = value;
  spec.run_id = axis + "-" + value + "_s" + std::to_string(spec.seed);
}

std::string single_axis(const std::vector<std::string>& axes) {
  if (axes.size() != 1) throw ConfigError("--axis", 0, "an ablation grid varies exactly one axis");
  ablation_values(axes.front());
  return axes.front();
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_header() {
  return "run_id,paradigm,axis,value,seed,base_acc,novel_acc,hm,ce_final,kd_final,runtime_seconds\n";
}

std::string csv_row(const RunOutcome& o) {
  const std::vector<std::string> fields{csv_quote(o.spec.run_id),
                                        std::string(paradigm_name(o.spec.paradigm)),
                                        csv_quote(o.spec.axis),
                                        csv_quote(o.spec.value),
                                        std::to_string(o.spec.seed),
                                        fixed(o.metrics.base_acc, 4),
                                        fixed(o.metrics.novel_acc, 4),
                                        fixed(o.metrics.hm, 4),
                                        fixed(o.ce_final, 6),
                                        fixed(o.kd_final, 6),
                                        fixed(o.metrics.runtime_seconds, 3)};
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + fields[i];
  return line + "\n";
}

std::vector<MethodSummary> summarize_by(const std::vector<RunOutcome>& runs, bool by_value) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunOutcome*>> groups;
  for (const RunOutcome& r : runs) {
    const std::string key = by_value ? r.spec.value : std::string(train::method_name(r.spec.method));
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<MethodSummary> out;
  for (const std::string& key : order) {
    std::vector<double> b, n, h;
    for (const RunOutcome* r : groups[key]) {
      b.push_back(r->metrics.base_acc);
      n.push_back(r->metrics.novel_acc);
      h.push_back(r->metrics.hm);
    }
    out.push_back({key, eval::summarize(b), eval::summarize(n), eval::summarize(h)});
  }
  return out;
}

std::string markdown_table(const std::vector<MethodSummary>& rows, const std::string& label) {
  auto cell = [](const eval::Summary& s) { return fixed(s.mean, 2) + " ± " + fixed(s.stddev, 2); };
  std::string out = "| " + label + " | Base | Novel | HM |\n|---|---|---|---|\n";
  for (const MethodSummary& r : rows) {
    out += "| " + r.name + " | " + cell(r.base) + " | " + cell(r.novel) + " | " + cell(r.hm) + " |\n";
  }
  return out;
}

std::string position_dump(const prompt::PositionMatrix& pm) {
  std::string out = "# temperature=" + fixed(pm.temperature, 6) + " mode=" +
                    std::string(prompt::position_forward_name(pm.mode)) + "\n";
  out += "target,source,logit,assigned\n";
  if (pm.logits.empty()) return out;
  const Tensor hard = prompt::hard_assignment(pm.logits);
  for (std::size_t i = 0; i < pm.logits.rows(); ++i) {
    for (std::size_t j = 0; j < pm.logits.cols(); ++j) {
      out += std::to_string(i) + "," + std::to_string(j) + "," + fixed(pm.logits.at(i, j), 9) + "," +
             (hard.at(i, j) == 1.0 ? "1" : "0") + "\n";
    }
  }
  return out;
}

Experiment::Experiment(ExperimentConfig config, std::ostream& log) : config_(std::move(config)), log_(&log) {
  world_ = world::generate_world(config_.world);
  split_ = world::base_novel_split(world_, config_.base_fraction, derive_seed(config_.world.seed, "split"));
  std::size_t longest = 0;
  for (const auto& name : world_.class_name_tokens) longest = std::max(longest, name.size());
  try {
    config_.train.validate(config_.dims(), longest);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", 0, e.what());
  }

  const std::string path = encoder_path();
  if (fs::exists(path)) {
    const CheckpointData data = load_checkpoint(path);
    stack_ = stack_from_checkpoint(data);
    pretrain_.steps = std::stoul(data.meta_value("pretrain.steps"));
    pretrain_.retrieval = std::stod(data.meta_value("pretrain.retrieval"));
    cached_ = true;
    *log_ << "encoder: loaded " << path << "\n";
    return;
  }
  *log_ << "encoder: pretraining on world seed " << config_.world.seed << "\n";
  stack_ = encoder::pretrain_contrastive(world_, config_.pretrain, derive_seed(config_.world.seed, "pretrain"),
                                         &pretrain_);
  *log_ << "encoder: " << pretrain_.steps << " steps, held-out retrieval " << fixed(pretrain_.retrieval, 3) << "\n";
  CheckpointData data = stack_checkpoint(stack_, config_.encoder_digest(), config_.world.seed);
  data.meta.emplace_back("pretrain.steps", std::to_string(pretrain_.steps));
  data.meta.emplace_back("pretrain.retrieval", fixed(pretrain_.retrieval, 6));
  fs::create_directories(fs::path(path).parent_path());
  save_checkpoint(data, path);
}

std::string Experiment::encoder_path() const {
  return (fs::path(config_.output_dir) / "cache" / ("encoder-" + config_.encoder_digest() + ".ckpt")).string();
}

std::string Experiment::run_dir(const std::string& run_id) const {
  return (fs::path(config_.output_dir) / "runs" / run_id).string();
}

RunSpec Experiment::spec(train::Method method, Paradigm paradigm, std::uint64_t seed) const {
  RunSpec s;
  s.method = method;
  s.paradigm = method == train::Method::anchoropt ? paradigm : Paradigm::two_stage;
  s.seed = seed;
  s.train = config_.train;
  s.train.method = method;
  // The alternating schedule has no distillation term.
  if (s.paradigm == Paradigm::one_stage) s.train.lambda_kd = 0.0;
  s.ensemble = config_.ensemble;
  s.axis = "method";
  s.value = std::string(train::method_name(method));
  s.run_id = s.value + "-" + std::string(paradigm_name(s.paradigm)) + "_s" + std::to_string(seed);
  return s;
}

train::TrainState Experiment::init_state(const RunSpec& spec) const {
  train::TrainState s = train::TrainState::initialize(spec.train, stack_.dims(), spec.seed);
  if (spec.method == train::Method::atprompt) {
    s.attribute_tokens = train::select_attribute_tokens(world_, split_.base_classes, spec.train.attribute_count);
  }
  return s;
}

train::Stage1Result Experiment::stage1(const RunSpec& spec, train::TrainState& state) const {
  const auto bank = train::DescriptionBank::build(world_, stack_, split_.base_classes, spec.train.descriptions_per_class,
                                                  spec.train.description_perturbation,
                                                  derive_seed(spec.seed, "descriptions"));
  return train::train_stage1_anchor(state, bank, world_, stack_, spec.train);
}

train::Stage2Result Experiment::stage2(const RunSpec& spec, train::TrainState& state) const {
  const auto images = train::ImageBank::build(
      world::sample_dataset(world_, split_.base_classes, config_.shots, derive_seed(spec.seed, "train-data")), stack_);
  return train::train_stage2_adapt(state, images, split_.base_classes, world_, stack_, spec.train);
}

train::OneStageResult Experiment::one_stage(const RunSpec& spec, train::TrainState& state) const {
  const auto bank = train::DescriptionBank::build(world_, stack_, split_.base_classes, spec.train.descriptions_per_class,
                                                  spec.train.description_perturbation,
                                                  derive_seed(spec.seed, "descriptions"));
  const auto images = train::ImageBank::build(
      world::sample_dataset(world_, split_.base_classes, config_.shots, derive_seed(spec.seed, "train-data")), stack_);
  return train::train_one_stage(state, images, bank, split_.base_classes, world_, stack_, spec.train);
}

eval::MetricsRecord Experiment::evaluate(const RunSpec& spec, const train::TrainState& state) const {
  eval::EvalOptions o;
  o.n_eval = config_.n_eval;
  o.ensemble = spec.ensemble;
  o.seed = spec.seed;
  eval::MetricsRecord rec = eval::evaluate_base_to_novel(state, split_, world_, stack_, spec.train, o);
  rec.config_digest = config_.digest();
  return rec;
}

RunOutcome Experiment::run(const RunSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out;
  out.spec = spec;
  train::TrainState state = init_state(spec);
  if (spec.method == train::Method::anchoropt && spec.paradigm == Paradigm::one_stage) {
    const auto r = one_stage(spec, state);
    out.anchor_trace = r.anchor_trace;
    if (!r.adapt_trace.empty()) {
      out.ce_final = r.adapt_trace.back().ce;
      out.kd_final = r.adapt_trace.back().kd;
    }
  } else {
    if (spec.method == train::Method::anchoropt) out.anchor_trace = stage1(spec, state).loss_trace;
    const auto r = stage2(spec, state);
    if (!r.trace.empty()) {
      out.ce_final = r.trace.back().ce;
      out.kd_final = r.trace.back().kd;
    }
  }
  out.metrics = evaluate(spec, state);
  out.metrics.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path dir = run_dir(spec.run_id);
  fs::create_directories(dir);
  save_state(spec, state, (dir / "state.ckpt").string());
  write_text(dir / "position.csv", position_dump(state.position));
  recorded_.push_back(spec);
  *log_ << spec.run_id << ": base " << fixed(out.metrics.base_acc, 2) << " novel " << fixed(out.metrics.novel_acc, 2)
        << " hm " << fixed(out.metrics.hm, 2) << " (" << fixed(out.metrics.runtime_seconds, 1) << "s)\n";
  out.state = std::move(state);
  return out;
}

void Experiment::save_state(const RunSpec& spec, const train::TrainState& state, const std::string& path) const {
  fs::create_directories(fs::path(path).parent_path());
  save_checkpoint(state_checkpoint(state, spec.method, config_.digest(), config_.world.seed), path);
}

train::TrainState Experiment::load_state(const std::string& path, train::Method* method) const {
  const CheckpointData data = load_checkpoint(path);
  if (data.world_seed != config_.world.seed) {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: trained on world seed " +
                                                             std::to_string(data.world_seed) + ", config uses " +
                                                             std::to_string(config_.world.seed));
  }
  if (method) *method = train::parse_method(data.meta_value("method"));
  return state_from_checkpoint(data);
}

void Experiment::write_manifest(const std::string& command) const {
  nlohmann::ordered_json m;
  m["tool"] = "anop";
  m["version"] = kVersion;
  m["checkpoint_format"] = kCheckpointVersion;
#ifdef __VERSION__
  m["compiler"] = __VERSION__;
#endif
  m["command"] = command;
  m["config_digest"] = config_.digest();
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  std::istringstream echo(config_.echo());
  for (std::string line; std::getline(echo, line);) {
    const auto eq = line.find(" = ");
    cfg[line.substr(0, eq)] = line.substr(eq + 3);
  }
  m["config"] = cfg;
  m["encoder"] = {{"checkpoint", encoder_path()},
                  {"from_cache", cached_},
                  {"pretrain_steps", pretrain_.steps},
                  {"heldout_retrieval", pretrain_.retrieval}};
  m["split"] = {{"base", split_.base_classes}, {"novel", split_.novel_classes}};
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const RunSpec& s : recorded_) runs.push_back(run_json(s));
  m["runs"] = runs;
  write_text(fs::path(config_.output_dir) / "manifest.json", m.dump(2) + "\n");
}

void Experiment::write_failure(const std::string& command, const std::string& error) const {
  nlohmann::ordered_json m;
  m["tool"] = "anop";
  m["version"] = kVersion;
  m["command"] = command;
  m["status"] = "failed";
  m["error"] = error;
  m["config_digest"] = config_.digest();
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const RunSpec& s : recorded_) runs.push_back(s.run_id);
  m["completed_runs"] = runs;
  write_text(fs::path(config_.output_dir) / "failure.json", m.dump(2) + "\n");
}

}  // namespace anop::app
