#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ampforge/effects_encoder.hpp"
#include "ampforge/tcn_film.hpp"

namespace ampforge {

// Versioned container: 8-byte magic, little-endian u64 header length, JSON
// header (kind, config, tensor names/shapes/offsets), then the tensor payload
// as raw little-endian float32. Round-trips bit-exactly.
struct CheckpointTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // widened from the stored float32
};

struct Checkpoint {
  std::string kind;  // "tcn" | "encoder" | "tcn+enroll"
  nlohmann::json config;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// model <-> checkpoint
Checkpoint to_checkpoint(TcnModel& model);
TcnModel tcn_from_checkpoint(const Checkpoint& ckpt);
Checkpoint to_checkpoint(EncoderModel& model);
EncoderModel encoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ampforge
