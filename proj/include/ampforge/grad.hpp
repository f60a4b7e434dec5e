#pragma once

#include <map>
#include <string>
#include <vector>

namespace ampforge {

// Named gradients, one entry per named parameter tensor.
using GradSet = std::map<std::string, std::vector<double>>;

struct ParamRef {
  std::string name;
  std::vector<double>* values;
};
using ParamRefs = std::vector<ParamRef>;

inline void add_grads(GradSet& acc, const GradSet& g) {
  for (const auto& [name, values] : g) {
    auto& dst = acc[name];
    if (dst.empty()) dst.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] += values[i];
  }
}

inline void scale_grads(GradSet& g, double s) {
  for (auto& [name, values] : g)
    for (double& v : values) v *= s;
}

}  // namespace ampforge
