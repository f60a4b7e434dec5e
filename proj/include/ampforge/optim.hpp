#pragma once

#include <cmath>
#include <cstdint>

#include "ampforge/errors.hpp"
#include "ampforge/grad.hpp"

namespace ampforge {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline double global_grad_norm(const GradSet& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g) sq += v * v;
  return std::sqrt(sq);
}

inline void clip_grad_norm(GradSet& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm > max_norm && norm > 0.0) scale_grads(grads, max_norm / norm);
}

// Bias-corrected Adam. Moments are kept per parameter name; a step with a
// non-finite gradient throws before touching any state.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return t_; }

  void step(const ParamRefs& params, const GradSet& grads) {
    for (const auto& [name, g] : grads)
      for (double v : g)
        if (!std::isfinite(v))
          throw NonFiniteGradientError("non-finite gradient in " + name + "; step aborted");

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : params) {
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;  // parameter untouched this step
      const auto& g = it->second;
      if (g.size() != p.values->size())
        throw ShapeError("adam: gradient shape mismatch for " + p.name);
      auto& m = m_[p.name];
      auto& v = v_[p.name];
      if (m.empty()) m.assign(g.size(), 0.0);
      if (v.empty()) v.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        (*p.values)[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  GradSet m_, v_;
};

}  // namespace ampforge
