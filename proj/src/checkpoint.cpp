#include "ampforge/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ampforge/errors.hpp"

namespace ampforge {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xFF));
}

float read_f32(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
                       std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header;
  header["kind"] = ckpt.kind;
  header["config"] = ckpt.config;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    json jt;
    jt["name"] = t.name;
    jt["shape"] = t.shape;
    jt["offset"] = offset;
    jt["count"] = t.values.size();
    tensors.push_back(std::move(jt));
    offset += t.values.size();
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  std::string out;
  out.append(kMagic, 8);
  put_u64(out, header_str.size());
  out += header_str;
  for (const auto& t : ckpt.tensors)
    for (double v : t.values) put_f32(out, static_cast<float>(v));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open checkpoint for write: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  if (data.size() < 16 || std::memcmp(p, kMagic, 8) != 0)
    throw CheckpointError("bad checkpoint magic: " + path.string());
  const std::uint64_t header_len = read_u64(p + 8);
  if (16 + header_len > data.size()) throw CheckpointError("truncated checkpoint header");

  json header;
  try {
    header = json::parse(data.substr(16, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config = header.at("config");
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_floats = (data.size() - payload_start) / 4;
  for (const auto& jt : header.at("tensors")) {
    CheckpointTensor t;
    t.name = jt.at("name").get<std::string>();
    t.shape = jt.at("shape").get<std::vector<std::uint64_t>>();
    const std::uint64_t offset = jt.at("offset").get<std::uint64_t>();
    const std::uint64_t count = jt.at("count").get<std::uint64_t>();
    if (offset + count > payload_floats)
      throw CheckpointError("tensor " + t.name + " overruns checkpoint payload");
    t.values.resize(count);
    const unsigned char* base = p + payload_start + offset * 4;
    for (std::uint64_t i = 0; i < count; ++i) t.values[i] = read_f32(base + i * 4);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

namespace {

json tcn_config_json(const TcnConfig& cfg) {
  return {{"n_blocks", cfg.n_blocks},
          {"layers_per_block", cfg.layers_per_block},
          {"channels", cfg.channels},
          {"kernel", cfg.kernel},
          {"dilation_growth", cfg.dilation_growth},
          {"embed_dim", cfg.embed_dim},
          {"n_devices", cfg.n_devices}};
}

TcnConfig tcn_config_from_json(const json& j) {
  TcnConfig cfg;
  cfg.n_blocks = j.at("n_blocks").get<int>();
  cfg.layers_per_block = j.at("layers_per_block").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.kernel = j.at("kernel").get<int>();
  cfg.dilation_growth = j.at("dilation_growth").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.n_devices = j.at("n_devices").get<int>();
  return cfg;
}

}  // namespace

Checkpoint to_checkpoint(TcnModel& model) {
  Checkpoint ckpt;
  ckpt.kind = "tcn";
  ckpt.config = tcn_config_json(model.config());
  for (const auto& ref : model.param_refs()) {
    CheckpointTensor t;
    t.name = ref.name;
    t.shape = {ref.values->size()};
    t.values = *ref.values;
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

TcnModel tcn_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "tcn" && ckpt.kind != "tcn+enroll")
    throw CheckpointError("checkpoint kind is not tcn: " + ckpt.kind);
  TcnModel model(tcn_config_from_json(ckpt.config), 0);
  for (const auto& ref : model.param_refs()) {
    const CheckpointTensor* t = ckpt.find(ref.name);
    if (t == nullptr) throw CheckpointError("checkpoint missing tensor " + ref.name);
    if (t->values.size() != ref.values->size())
      throw CheckpointError("checkpoint tensor " + ref.name + " has wrong size");
    *ref.values = t->values;
  }
  return model;
}

Checkpoint to_checkpoint(EncoderModel& model) {
  Checkpoint ckpt;
  ckpt.kind = "encoder";
  const EncoderConfig& cfg = model.config();
  ckpt.config = {{"channels", cfg.channels},
                 {"kernel", cfg.kernel},
                 {"stride", cfg.stride},
                 {"output_channels", cfg.output_channels},
                 {"bn_eps", cfg.bn_eps},
                 {"bn_momentum", cfg.bn_momentum}};
  for (const auto& refs : {model.param_refs(), model.state_refs()}) {
    for (const auto& ref : refs) {
      CheckpointTensor t;
      t.name = ref.name;
      t.shape = {ref.values->size()};
      t.values = *ref.values;
      ckpt.tensors.push_back(std::move(t));
    }
  }
  return ckpt;
}

EncoderModel encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "encoder") throw CheckpointError("checkpoint kind is not encoder: " + ckpt.kind);
  EncoderConfig cfg;
  cfg.channels = ckpt.config.at("channels").get<std::vector<int>>();
  cfg.kernel = ckpt.config.at("kernel").get<int>();
  cfg.stride = ckpt.config.at("stride").get<int>();
  cfg.output_channels = ckpt.config.at("output_channels").get<int>();
  cfg.bn_eps = ckpt.config.at("bn_eps").get<double>();
  cfg.bn_momentum = ckpt.config.at("bn_momentum").get<double>();
  EncoderModel model(cfg, 0);
  for (const auto& refs : {model.param_refs(), model.state_refs()}) {
    for (const auto& ref : refs) {
      const CheckpointTensor* t = ckpt.find(ref.name);
      if (t == nullptr) throw CheckpointError("checkpoint missing tensor " + ref.name);
      if (t->values.size() != ref.values->size())
        throw CheckpointError("checkpoint tensor " + ref.name + " has wrong size");
      *ref.values = t->values;
    }
  }
  return model;
}

}  // namespace ampforge
