// SPDX-License-Identifier: Apache-2.0
#include "anop/app/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

#include "anop/util/hash.hpp"

namespace anop::app {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::uint64_t to_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a nonnegative integer");
  return out;
}

double to_double(std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool to_bool(std::string_view v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw std::invalid_argument("expected on/off or true/false");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Preposition words are looked up by name; `none` drops the token.
const std::vector<std::pair<std::string, std::size_t>> kPrepositionWords{{"of", world::vocab::kOf},
                                                                     {"with", world::vocab::kWith},
                                                                     {"at", world::vocab::kAt},
                                                                     {"sun", world::vocab::kSun},
                                                                     {"sea", world::vocab::kSea}};

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <class T>
Field size_field(std::string key, T ExperimentConfig::*outer, std::size_t T::*member) {
  return {key, [=](const ExperimentConfig& c) { return std::to_string(c.*outer.*member); },
          [=](ExperimentConfig& c, std::string_view v) { c.*outer.*member = to_u64(v); }};
}
template <class T>
Field double_field(std::string key, T ExperimentConfig::*outer, double T::*member) {
  return {key, [=](const ExperimentConfig& c) { return fmt_double(c.*outer.*member); },
          [=](ExperimentConfig& c, std::string_view v) { c.*outer.*member = to_double(v); }};
}
Field dims_field(std::string key, std::size_t encoder::EncoderDims::*member) {
  return {key, [=](const ExperimentConfig& c) { return std::to_string(c.pretrain.dims.*member); },
          [=](ExperimentConfig& c, std::string_view v) { c.pretrain.dims.*member = to_u64(v); }};
}

const std::vector<Field>& fields() {
  using EC = ExperimentConfig;
  using WP = world::WorldParams;
  using PC = encoder::PretrainConfig;
  using TC = train::TrainConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"experiment.name", [](const EC& c) { return c.name; },
                 [](EC& c, std::string_view v) {
                   if (v.empty()) throw std::invalid_argument("must not be empty");
                   c.name = std::string(v);
                 }});
    f.push_back({"experiment.seeds",
                 [](const EC& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                   return s;
                 },
                 [](EC& c, std::string_view v) {
                   c.seeds.clear();
                   for (const auto& item : split_list(v)) c.seeds.push_back(to_u64(item));
                   if (c.seeds.empty()) throw std::invalid_argument("needs at least one seed");
                 }});
    f.push_back({"experiment.methods",
                 [](const EC& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.methods.size(); ++i) {
                     s += (i ? "," : "") + std::string(train::method_name(c.methods[i]));
                   }
                   return s;
                 },
                 [](EC& c, std::string_view v) {
                   c.methods.clear();
                   for (const auto& item : split_list(v)) c.methods.push_back(train::parse_method(item));
                   if (c.methods.empty()) throw std::invalid_argument("needs at least one method");
                 }});
    f.push_back({"experiment.paradigm", [](const EC& c) { return std::string(paradigm_name(c.paradigm)); },
                 [](EC& c, std::string_view v) { c.paradigm = parse_paradigm(v); }});
    f.push_back({"output.dir", [](const EC& c) { return c.output_dir; },
                 [](EC& c, std::string_view v) { c.output_dir = std::string(v); }});

    f.push_back({"world.seed", [](const EC& c) { return std::to_string(c.world.seed); },
                 [](EC& c, std::string_view v) { c.world.seed = to_u64(v); }});
    f.push_back(size_field<WP>("world.classes", &EC::world, &WP::classes));
    f.push_back(size_field<WP>("world.attributes", &EC::world, &WP::attributes));
    f.push_back(size_field<WP>("world.latent_dim", &EC::world, &WP::latent_dim));
    f.push_back(double_field<WP>("world.noise_sigma", &EC::world, &WP::noise_sigma));
    f.push_back(double_field<WP>("world.jitter_per_sigma", &EC::world, &WP::jitter_per_sigma));
    f.push_back(double_field<WP>("world.unique_weight", &EC::world, &WP::unique_weight));
    f.push_back(size_field<WP>("world.patches", &EC::world, &WP::patches));
    f.push_back(size_field<WP>("world.patch_dim", &EC::world, &WP::patch_dim));
    f.push_back(size_field<WP>("world.vocab_size", &EC::world, &WP::vocab_size));
    f.push_back({"split.base_fraction", [](const EC& c) { return fmt_double(c.base_fraction); },
                 [](EC& c, std::string_view v) { c.base_fraction = to_double(v); }});

    f.push_back(dims_field("encoder.token_width", &encoder::EncoderDims::token_width));
    f.push_back(dims_field("encoder.embed_dim", &encoder::EncoderDims::embed_dim));
    f.push_back(dims_field("encoder.text_blocks", &encoder::EncoderDims::text_blocks));
    f.push_back(dims_field("encoder.image_blocks", &encoder::EncoderDims::image_blocks));
    f.push_back(dims_field("encoder.heads", &encoder::EncoderDims::heads));
    f.push_back(dims_field("encoder.max_len", &encoder::EncoderDims::max_len));
    f.push_back(dims_field("encoder.mlp_ratio", &encoder::EncoderDims::mlp_ratio));

    f.push_back(size_field<PC>("pretrain.max_steps", &EC::pretrain, &PC::max_steps));
    f.push_back(size_field<PC>("pretrain.min_steps", &EC::pretrain, &PC::min_steps));
    f.push_back(size_field<PC>("pretrain.eval_every", &EC::pretrain, &PC::eval_every));
    f.push_back(double_field<PC>("pretrain.lr", &EC::pretrain, &PC::lr));
    f.push_back(double_field<PC>("pretrain.target", &EC::pretrain, &PC::target));
    f.push_back(size_field<PC>("pretrain.heldout_groups", &EC::pretrain, &PC::heldout_groups));

    f.push_back({"data.shots", [](const EC& c) { return std::to_string(c.shots); },
                 [](EC& c, std::string_view v) { c.shots = to_u64(v); }});

    f.push_back(size_field<TC>("prompt.soft_length", &EC::train, &TC::soft_length));
    f.push_back(size_field<TC>("prompt.anchor_length", &EC::train, &TC::anchor_length));
    f.push_back({"prompt.preposition", [](const EC& c) { return preposition_name(c.train.preposition); },
                 [](EC& c, std::string_view v) { c.train.preposition = parse_preposition(v); }});
    f.push_back({"prompt.arrangement",
                 [](const EC& c) { return std::string(prompt::arrangement_name(c.train.arrangement)); },
                 [](EC& c, std::string_view v) { c.train.arrangement = prompt::parse_arrangement(v); }});
    f.push_back({"prompt.position_forward",
                 [](const EC& c) { return std::string(prompt::position_forward_name(c.train.position_forward)); },
                 [](EC& c, std::string_view v) { c.train.position_forward = prompt::parse_position_forward(v); }});
    f.push_back(double_field<TC>("prompt.gumbel_temperature", &EC::train, &TC::gumbel_temperature));
    f.push_back(size_field<TC>("prompt.deep_depth", &EC::train, &TC::deep_depth));
    f.push_back(size_field<TC>("prompt.attribute_count", &EC::train, &TC::attribute_count));
    f.push_back(size_field<TC>("prompt.attribute_soft", &EC::train, &TC::attribute_soft));

    f.push_back(size_field<TC>("stage1.steps", &EC::train, &TC::stage1_steps));
    f.push_back(double_field<TC>("stage1.lr", &EC::train, &TC::stage1_lr));
    f.push_back(double_field<TC>("stage1.momentum", &EC::train, &TC::stage1_momentum));
    f.push_back(size_field<TC>("stage1.descriptions", &EC::train, &TC::descriptions_per_class));
    f.push_back(double_field<TC>("stage1.perturbation", &EC::train, &TC::description_perturbation));

    f.push_back(size_field<TC>("stage2.steps", &EC::train, &TC::stage2_steps));
    f.push_back(double_field<TC>("stage2.lr", &EC::train, &TC::stage2_lr));
    f.push_back(double_field<TC>("stage2.momentum", &EC::train, &TC::stage2_momentum));
    f.push_back(double_field<TC>("stage2.lambda_ce", &EC::train, &TC::lambda_ce));
    f.push_back(double_field<TC>("stage2.lambda_kd", &EC::train, &TC::lambda_kd));
    f.push_back({"stage2.kd_direction",
                 [](const EC& c) { return std::string(train::kd_direction_name(c.train.kd_direction)); },
                 [](EC& c, std::string_view v) { c.train.kd_direction = train::parse_kd_direction(v); }});
    f.push_back(size_field<TC>("stage2.batch_size", &EC::train, &TC::batch_size));

    f.push_back(size_field<TC>("one_stage.steps", &EC::train, &TC::one_stage_steps));
    f.push_back(size_field<TC>("one_stage.period", &EC::train, &TC::one_stage_period));

    f.push_back({"eval.n_eval", [](const EC& c) { return std::to_string(c.n_eval); },
                 [](EC& c, std::string_view v) { c.n_eval = to_u64(v); }});
    f.push_back({"eval.ensemble", [](const EC& c) { return std::string(c.ensemble ? "on" : "off"); },
                 [](EC& c, std::string_view v) { c.ensemble = to_bool(v); }});
    return f;
  }();
  return table;
}

const Field* find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

// Cross-field checks, reported against the first key involved.
void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(key, 0, what);
  };
  check(c.world.vocab_size == c.dims().vocab, "world.vocab_size", "must equal the encoder vocabulary (128)");
  try {
    c.dims().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("encoder", 0, e.what());
  }
  check(c.world.classes >= 2, "world.classes", "needs at least 2 classes");
  check(c.world.classes <= c.world.vocab_size - world::vocab::kClassNameBase, "world.classes",
        "exceeds the class-name vocabulary");
  check(c.world.attributes >= 1 && c.world.attributes <= world::vocab::kMaxAttributes, "world.attributes",
        "must lie in [1, 8]");
  check(c.world.patches == c.dims().patches && c.world.patch_dim == c.dims().patch_dim, "world.patches",
        "image grid is fixed at 9 x 24 by the encoder");
  check(c.world.noise_sigma >= 0.0, "world.noise_sigma", "must be nonnegative");
  check(c.base_fraction > 0.0 && c.base_fraction < 1.0, "split.base_fraction", "must lie in (0, 1)");
  check(c.shots >= 1, "data.shots", "must be positive");
  check(c.n_eval >= 1, "eval.n_eval", "must be positive");
  check(c.pretrain.eval_every >= 1, "pretrain.eval_every", "must be positive");
  check(c.pretrain.min_steps <= c.pretrain.max_steps, "pretrain.min_steps", "exceeds pretrain.max_steps");
  try {
    c.train.validate(c.dims(), 1);
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    const std::string first = what.substr(0, what.find(' '));
    throw ConfigError(first.find('.') != std::string::npos ? first : "train", 0, what);
  }
}

}  // namespace

std::optional<std::size_t> parse_preposition(std::string_view v) {
  if (v == "none") return std::nullopt;
  for (const auto& [name, id] : kPrepositionWords) {
    if (name == v) return id;
  }
  throw std::invalid_argument("expected one of of, with, at, sun, sea, none");
}

std::string preposition_name(const std::optional<std::size_t>& p) {
  if (!p) return "none";
  for (const auto& [name, id] : kPrepositionWords) {
    if (id == *p) return name;
  }
  return std::to_string(*p);
}

std::string_view paradigm_name(Paradigm p) { return p == Paradigm::two_stage ? "two_stage" : "one_stage"; }

Paradigm parse_paradigm(std::string_view name) {
  if (name == "two_stage") return Paradigm::two_stage;
  if (name == "one_stage") return Paradigm::one_stage;
  throw std::invalid_argument("expected two_stage or one_stage");
}

ConfigError::ConfigError(std::string key, std::size_t line, const std::string& message)
    : std::runtime_error((line ? "line " + std::to_string(line) + ": " : std::string()) + key + ": " + message),
      key_(std::move(key)),
      line_(line) {}

std::string ExperimentConfig::echo() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string ExperimentConfig::digest() const {
  std::string text;
  for (const Field& f : fields()) {
    if (f.key != "output.dir") text += f.key + "=" + f.get(*this) + "\n";
  }
  return hex_digest(text);
}

std::string ExperimentConfig::encoder_digest() const {
  std::string text;
  for (const Field& f : fields()) {
    if (f.key.starts_with("world.") || f.key.starts_with("encoder.") || f.key.starts_with("pretrain.")) {
      text += f.key + "=" + f.get(*this) + "\n";
    }
  }
  return hex_digest(text);
}

void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value, std::size_t line) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError(std::string(key), line, "unknown key");
  try {
    f->set(config, trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string(key), line, "invalid value '" + trim(value) + "': " + e.what());
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides) {
  ExperimentConfig config;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(line, line_no, "malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2)) + ".";
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, line_no, "expected `key = value`");
    const std::string key = section + trim(std::string_view(line).substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError(key, line_no, "duplicate key");
    set_config_value(config, key, std::string_view(line).substr(eq + 1), line_no);
  }
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o, 0, "override must be key=value");
    const std::string key = trim(std::string_view(o).substr(0, eq));
    set_config_value(config, key, std::string_view(o).substr(eq + 1));
    seen.insert(key);
  }
  if (!seen.count("experiment.name")) throw ConfigError("experiment.name", 0, "missing required key");
  validate(config);
  return config;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", 0, "cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

}  // namespace anop::app
