// SPDX-License-Identifier: Apache-2.0
#include "anop/app/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace anop::app {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::format, "checkpoint: truncated record");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

// Shortest round-trip representation.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: bad integer '" + s + "'");
  }
  return v;
}

double to_f64(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: bad number '" + s + "'");
  }
  return v;
}

const std::vector<std::pair<const char*, std::size_t encoder::EncoderDims::*>> kDims{
    {"vocab", &encoder::EncoderDims::vocab},
    {"token_width", &encoder::EncoderDims::token_width},
    {"embed_dim", &encoder::EncoderDims::embed_dim},
    {"text_blocks", &encoder::EncoderDims::text_blocks},
    {"image_blocks", &encoder::EncoderDims::image_blocks},
    {"heads", &encoder::EncoderDims::heads},
    {"max_len", &encoder::EncoderDims::max_len},
    {"patches", &encoder::EncoderDims::patches},
    {"patch_dim", &encoder::EncoderDims::patch_dim},
    {"mlp_ratio", &encoder::EncoderDims::mlp_ratio}};

}  // namespace

const std::string& CheckpointData::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw CheckpointError(CheckpointError::Kind::format, "checkpoint: missing field '" + key + "'");
}

const Tensor* CheckpointData::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  Writer w;
  w.raw("ANOP", 4);
  w.u32(kCheckpointVersion);
  w.str(data.config_digest);
  w.u64(data.world_seed);
  w.str(data.stage);
  w.u32(static_cast<std::uint32_t>(data.meta.size()));
  for (const auto& [k, v] : data.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.u64(t.size());
    for (double v : t.values()) w.f64(v);
  }
  w.u32(crc_of(w.out));
  return std::move(w.out);
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ANOP", 4) != 0) throw CheckpointError(K::magic, "checkpoint: bad magic");
  if (bytes.size() < 8) throw CheckpointError(K::checksum, "checkpoint: checksum mismatch (file truncated)");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::version, "checkpoint: format version " + std::to_string(version) +
                                          " is not supported by this build (expects " +
                                          std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 12) throw CheckpointError(K::checksum, "checkpoint: checksum mismatch (file truncated)");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (crc_of(body) != stored) throw CheckpointError(K::checksum, "checkpoint: checksum mismatch");

  Reader r(body.subspan(8));
  CheckpointData d;
  d.config_digest = r.str();
  d.world_seed = r.u64();
  d.stage = r.str();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    d.meta.emplace_back(std::move(k), r.str());
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    ad::Shape shape(rank);
    std::size_t expect = 1;
    for (auto& s : shape) {
      s = r.u64();
      expect *= s;
    }
    const std::uint64_t count = r.u64();
    if (count != expect) throw CheckpointError(K::format, "checkpoint: tensor '" + name + "' has an inconsistent shape");
    std::vector<double> values(count);
    for (double& v : values) v = r.f64();
    d.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError(K::format, "checkpoint: trailing bytes");
  return d;
}

void save_checkpoint(const CheckpointData& data, const std::string& path) {
  const auto bytes = encode_checkpoint(data);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

CheckpointData stack_checkpoint(const encoder::EncoderStack& stack, const std::string& digest,
                                std::uint64_t world_seed) {
  CheckpointData d;
  d.config_digest = digest;
  d.world_seed = world_seed;
  d.stage = "encoder";
  for (const auto& [name, member] : kDims) d.meta.emplace_back(std::string("dims.") + name, std::to_string(stack.dims().*member));
  d.meta.emplace_back("frozen", stack.frozen() ? "1" : "0");
  for (const auto& [name, t] : stack.named_tensors()) d.tensors.emplace_back(name, *t);
  return d;
}

encoder::EncoderStack stack_from_checkpoint(const CheckpointData& data) {
  if (data.stage != "encoder") throw CheckpointError(CheckpointError::Kind::format, "checkpoint: not an encoder checkpoint");
  encoder::EncoderDims dims;
  for (const auto& [name, member] : kDims) dims.*member = to_u64(data.meta_value(std::string("dims.") + name));
  std::map<std::string, Tensor> tensors(data.tensors.begin(), data.tensors.end());
  try {
    return encoder::EncoderStack::from_tensors(dims, tensors, data.meta_value("frozen") == "1");
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::format, std::string("checkpoint: ") + e.what());
  }
}

CheckpointData state_checkpoint(const train::TrainState& s, train::Method method, const std::string& digest,
                                std::uint64_t world_seed) {
  CheckpointData d;
  d.config_digest = digest;
  d.world_seed = world_seed;
  d.stage = std::string(train::stage_name(s.stage));
  d.meta = {{"method", std::string(train::method_name(method))},
            {"seed", std::to_string(s.seed)},
            {"step", std::to_string(s.step)},
            {"anchors_trained", s.anchors_trained ? "1" : "0"},
            {"adapted", s.adapted ? "1" : "0"},
            {"position.temperature", num(s.position.temperature)},
            {"position.mode", std::string(prompt::position_forward_name(s.position.mode))},
            {"deep_layers", std::to_string(s.deep_soft.size())}};
  std::string attrs;
  for (std::size_t i = 0; i < s.attribute_tokens.size(); ++i) attrs += (i ? "," : "") + std::to_string(s.attribute_tokens[i]);
  d.meta.emplace_back("attribute_tokens", attrs);

  d.tensors.emplace_back("anchors", s.anchors);
  d.tensors.emplace_back("soft", s.soft);
  if (!s.soft_a.empty()) d.tensors.emplace_back("soft_a", s.soft_a);
  d.tensors.emplace_back("position.logits", s.position.logits);
  for (std::size_t i = 0; i < s.deep_soft.size(); ++i) d.tensors.emplace_back("deep." + std::to_string(i), s.deep_soft[i]);
  for (const auto& [name, buf] : s.momentum) {
    d.tensors.emplace_back("momentum." + name, Tensor({buf.size()}, buf));
  }
  return d;
}

train::TrainState state_from_checkpoint(const CheckpointData& data) {
  using K = CheckpointError::Kind;
  train::TrainState s;
  try {
    s.stage = train::parse_stage(data.stage);
  } catch (const std::invalid_argument&) {
    throw CheckpointError(K::format, "checkpoint: not a training-state checkpoint");
  }
  auto need = [&](const std::string& name) {
    const Tensor* t = data.tensor(name);
    if (!t) throw CheckpointError(K::format, "checkpoint: missing tensor '" + name + "'");
    return *t;
  };
  s.seed = to_u64(data.meta_value("seed"));
  s.step = to_u64(data.meta_value("step"));
  s.anchors_trained = data.meta_value("anchors_trained") == "1";
  s.adapted = data.meta_value("adapted") == "1";
  s.position.temperature = to_f64(data.meta_value("position.temperature"));
  s.position.mode = prompt::parse_position_forward(data.meta_value("position.mode"));
  s.anchors = need("anchors");
  s.soft = need("soft");
  if (const Tensor* t = data.tensor("soft_a")) s.soft_a = *t;
  s.position.logits = need("position.logits");
  const std::uint64_t layers = to_u64(data.meta_value("deep_layers"));
  for (std::uint64_t i = 0; i < layers; ++i) s.deep_soft.push_back(need("deep." + std::to_string(i)));
  const std::string& attrs = data.meta_value("attribute_tokens");
  for (std::size_t start = 0; start < attrs.size();) {
    const auto comma = attrs.find(',', start);
    s.attribute_tokens.push_back(to_u64(attrs.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  for (const auto& [name, t] : data.tensors) {
    if (name.starts_with("momentum.")) s.momentum[name.substr(9)] = std::vector<double>(t.values().begin(), t.values().end());
  }
  return s;
}

}  // namespace anop::app
