#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ampforge {

// One crowdsourced LSTM capture. Weight layout follows the capture-file
// convention: rows of weight_ih / weight_hh are the 4H gate pre-activations
// in gate order input, forget, cell, output.
struct DeviceModel {
  std::string name;
  int input_size = 1;  // 1 unconditioned, 2 with a conditioning channel
  int hidden_size = 0;
  std::vector<float> weight_ih;    // [4H x input_size] row-major
  std::vector<float> weight_hh;    // [4H x H] row-major
  std::vector<float> bias_ih;      // [4H]
  std::vector<float> bias_hh;      // [4H]
  std::vector<float> head_weight;  // [H]
  float head_bias = 0.0f;
  bool skip = false;  // add the dry input to the output

  bool conditioned() const { return input_size == 2; }
};

// Parses a capture file (JSON with a "model_data" metadata block and a
// "state_dict" of named weight arrays, flat or nested). `fallback_name` is
// used when the file carries no name, typically the file stem.
DeviceModel parse_model_file(const std::string& raw_bytes,
                             const std::string& fallback_name = "");

std::string serialize_model(const DeviceModel& model);

DeviceModel load_model_file(const std::filesystem::path& path);

// 4H*I + 4H^2 + 8H + H + 1
long lstm_param_count(int hidden_size, int input_size);
long lstm_param_count(const DeviceModel& model);

struct SyntheticDevice {
  int device_id = 0;
  std::shared_ptr<const DeviceModel> model;
  std::optional<float> conditioning_value;  // present iff model->conditioned()

  const std::string& name() const { return model->name; }
};

// The expanded set of synthetic devices: every unconditioned capture is one
// device, every conditioned capture becomes `cond_points` devices with
// conditioning values linearly spaced over [0, 1]. Immutable once built.
class DeviceRegistry {
 public:
  static DeviceRegistry build(const std::filesystem::path& model_dir, int cond_points = 5);

  // Registry over an in-memory model list (same expansion and ordering rules).
  static DeviceRegistry from_models(std::vector<DeviceModel> models, int cond_points = 5);

  int size() const { return static_cast<int>(devices_.size()); }
  const SyntheticDevice& device(int device_id) const;
  const std::vector<SyntheticDevice>& devices() const { return devices_; }

  // Parse failures collected while building (skipped files), one line each.
  const std::vector<std::string>& warnings() const { return warnings_; }

  // One JSON record per device: device_id, model file, conditioning value.
  std::string export_manifest() const;

 private:
  std::vector<SyntheticDevice> devices_;
  std::vector<std::string> warnings_;
};

}  // namespace ampforge
