#include "ampforge/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "ampforge/errors.hpp"

namespace ampforge {

using nlohmann::json;

namespace {

// Accepts both flat arrays and nested row arrays (real capture files store
// weight matrices as lists of rows).
std::vector<float> read_array(const json& j, const std::string& key, std::size_t expected,
                              const std::string& name) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(name + ": missing state_dict key " + key);
  std::vector<float> out;
  out.reserve(expected);
  if (!it->is_array()) throw SchemaError(name + ": " + key + " is not an array");
  for (const auto& e : *it) {
    if (e.is_array()) {
      for (const auto& v : e) {
        if (!v.is_number()) throw SchemaError(name + ": non-numeric entry in " + key);
        out.push_back(v.get<float>());
      }
    } else {
      if (!e.is_number()) throw SchemaError(name + ": non-numeric entry in " + key);
      out.push_back(e.get<float>());
    }
  }
  if (out.size() != expected)
    throw SchemaError(name + ": " + key + " has " + std::to_string(out.size()) +
                      " values, expected " + std::to_string(expected));
  for (float v : out)
    if (!std::isfinite(v)) throw ValueError(name + ": non-finite weight in " + key);
  return out;
}

void validate(const DeviceModel& m) {
  if (m.hidden_size <= 0) throw SchemaError(m.name + ": hidden_size must be positive");
  if (m.input_size != 1 && m.input_size != 2)
    throw SchemaError(m.name + ": input_size must be 1 or 2, got " + std::to_string(m.input_size));
  const std::size_t H = static_cast<std::size_t>(m.hidden_size);
  auto expect = [&](const std::vector<float>& v, std::size_t n, const char* what) {
    if (v.size() != n)
      throw SchemaError(m.name + ": " + what + " has " + std::to_string(v.size()) +
                        " values, expected " + std::to_string(n));
    for (float x : v)
      if (!std::isfinite(x)) throw ValueError(m.name + ": non-finite value in " + what);
  };
  expect(m.weight_ih, 4 * H * static_cast<std::size_t>(m.input_size), "weight_ih");
  expect(m.weight_hh, 4 * H * H, "weight_hh");
  expect(m.bias_ih, 4 * H, "bias_ih");
  expect(m.bias_hh, 4 * H, "bias_hh");
  expect(m.head_weight, H, "head_weight");
  if (!std::isfinite(m.head_bias)) throw ValueError(m.name + ": non-finite head_bias");
}

json rows(const std::vector<float>& flat, std::size_t n_rows, std::size_t n_cols) {
  json out = json::array();
  for (std::size_t r = 0; r < n_rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < n_cols; ++c) row.push_back(flat[r * n_cols + c]);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

DeviceModel parse_model_file(const std::string& raw_bytes, const std::string& fallback_name) {
  json j;
  try {
    j = json::parse(raw_bytes);
  } catch (const json::exception& e) {
    throw ParseError("capture file is not valid JSON (" + fallback_name + "): " + e.what());
  }
  if (!j.is_object() || !j.contains("model_data") || !j.contains("state_dict"))
    throw SchemaError("capture file missing model_data/state_dict (" + fallback_name + ")");

  const json& md = j["model_data"];
  DeviceModel m;
  m.name = md.value("name", fallback_name);
  if (m.name.empty()) throw SchemaError("capture file has no usable name");

  const std::string unit = md.value("unit_type", "LSTM");
  if (unit != "LSTM") throw SchemaError(m.name + ": unsupported unit_type " + unit);
  if (md.value("num_layers", 1) != 1)
    throw SchemaError(m.name + ": only single-layer captures are supported");

  if (!md.contains("hidden_size") || !md["hidden_size"].is_number_integer())
    throw SchemaError(m.name + ": missing integer hidden_size");
  m.hidden_size = md["hidden_size"].get<int>();
  m.input_size = md.value("input_size", 1);
  m.skip = md.value("skip", 0) != 0;
  if (m.hidden_size <= 0) throw SchemaError(m.name + ": hidden_size must be positive");
  if (m.input_size != 1 && m.input_size != 2)
    throw SchemaError(m.name + ": input_size must be 1 or 2");

  const json& sd = j["state_dict"];
  const std::size_t H = static_cast<std::size_t>(m.hidden_size);
  m.weight_ih = read_array(sd, "rec.weight_ih_l0", 4 * H * m.input_size, m.name);
  m.weight_hh = read_array(sd, "rec.weight_hh_l0", 4 * H * H, m.name);
  m.bias_ih = read_array(sd, "rec.bias_ih_l0", 4 * H, m.name);
  m.bias_hh = read_array(sd, "rec.bias_hh_l0", 4 * H, m.name);
  m.head_weight = read_array(sd, "lin.weight", H, m.name);
  auto head_bias = read_array(sd, "lin.bias", 1, m.name);
  m.head_bias = head_bias[0];

  validate(m);
  return m;
}

std::string serialize_model(const DeviceModel& model) {
  validate(model);
  const std::size_t H = static_cast<std::size_t>(model.hidden_size);
  json j;
  j["model_data"] = {
      {"name", model.name},       {"unit_type", "LSTM"},
      {"num_layers", 1},          {"hidden_size", model.hidden_size},
      {"input_size", model.input_size}, {"output_size", 1},
      {"skip", model.skip ? 1 : 0},
  };
  j["state_dict"] = {
      {"rec.weight_ih_l0", rows(model.weight_ih, 4 * H, model.input_size)},
      {"rec.weight_hh_l0", rows(model.weight_hh, 4 * H, H)},
      {"rec.bias_ih_l0", model.bias_ih},
      {"rec.bias_hh_l0", model.bias_hh},
      {"lin.weight", rows(model.head_weight, 1, H)},
      {"lin.bias", std::vector<float>{model.head_bias}},
  };
  return j.dump(2) + "\n";
}

DeviceModel load_model_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open capture file: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_model_file(raw, path.stem().string());
}

long lstm_param_count(int hidden_size, int input_size) {
  const long H = hidden_size;
  return 4 * H * input_size + 4 * H * H + 8 * H + H + 1;
}

long lstm_param_count(const DeviceModel& model) {
  return lstm_param_count(model.hidden_size, model.input_size);
}

DeviceRegistry DeviceRegistry::build(const std::filesystem::path& model_dir, int cond_points) {
  if (!std::filesystem::is_directory(model_dir))
    throw EmptyRegistryError("model directory does not exist: " + model_dir.string());

  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(model_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw EmptyRegistryError("no capture files (*.json) under: " + model_dir.string());

  std::vector<DeviceModel> models;
  std::vector<std::string> warnings;
  for (const auto& f : files) {
    try {
      models.push_back(load_model_file(f));
    } catch (const Error& e) {
      warnings.push_back("skipped " + f.filename().string() + ": " + e.what());
    }
  }
  if (models.empty())
    throw EmptyRegistryError("all " + std::to_string(files.size()) +
                             " capture files failed to parse under: " + model_dir.string());

  DeviceRegistry reg = from_models(std::move(models), cond_points);
  reg.warnings_ = std::move(warnings);
  return reg;
}

DeviceRegistry DeviceRegistry::from_models(std::vector<DeviceModel> models, int cond_points) {
  if (cond_points < 1) throw ValueError("cond_points must be >= 1");
  if (models.empty()) throw EmptyRegistryError("no models given");
  std::sort(models.begin(), models.end(),
            [](const DeviceModel& a, const DeviceModel& b) { return a.name < b.name; });

  DeviceRegistry reg;
  for (auto& m : models) {
    auto shared = std::make_shared<const DeviceModel>(std::move(m));
    if (!shared->conditioned()) {
      reg.devices_.push_back({static_cast<int>(reg.devices_.size()), shared, std::nullopt});
    } else if (cond_points == 1) {
      reg.devices_.push_back({static_cast<int>(reg.devices_.size()), shared, 0.5f});
    } else {
      for (int i = 0; i < cond_points; ++i) {
        float v = static_cast<float>(i) / static_cast<float>(cond_points - 1);
        reg.devices_.push_back({static_cast<int>(reg.devices_.size()), shared, v});
      }
    }
  }
  return reg;
}

const SyntheticDevice& DeviceRegistry::device(int device_id) const {
  if (device_id < 0 || device_id >= size())
    throw DeviceIndexError("device_id " + std::to_string(device_id) + " out of range [0, " +
                           std::to_string(size()) + ")");
  return devices_[static_cast<std::size_t>(device_id)];
}

std::string DeviceRegistry::export_manifest() const {
  std::string out;
  for (const auto& d : devices_) {
    json j;
    j["device_id"] = d.device_id;
    j["model"] = d.model->name;
    if (d.conditioning_value)
      j["conditioning_value"] = *d.conditioning_value;
    else
      j["conditioning_value"] = nullptr;
    out += j.dump();
    out += "\n";
  }
  return out;
}

}  // namespace ampforge
