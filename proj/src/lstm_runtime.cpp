#include "ampforge/lstm_runtime.hpp"

#include <cmath>

#include "ampforge/errors.hpp"

namespace ampforge {

namespace {

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

LstmState init_state(const DeviceModel& model) {
  const auto H = static_cast<std::size_t>(model.hidden_size);
  return {std::vector<float>(H, 0.0f), std::vector<float>(H, 0.0f)};
}

std::vector<float> process_block(const DeviceModel& model, LstmState& state,
                                 std::span<const float> input, std::optional<float> cond) {
  if (cond.has_value() != model.conditioned())
    throw ConditioningError(model.name + ": conditioning value " +
                            (cond ? "given for an unconditioned model"
                                  : "missing for a conditioned model"));
  if (input.empty()) throw ValueError("empty input block");
  const int H = model.hidden_size;
  const std::size_t H4 = static_cast<std::size_t>(4 * H);
  if (state.h.size() != static_cast<std::size_t>(H) || state.c.size() != static_cast<std::size_t>(H))
    throw ShapeError(model.name + ": state dimension does not match hidden size");

  const float* wih = model.weight_ih.data();
  const float* whh = model.weight_hh.data();
  const float* bih = model.bias_ih.data();
  const float* bhh = model.bias_hh.data();
  const float* wh = model.head_weight.data();
  float* h = state.h.data();
  float* c = state.c.data();
  const int I = model.input_size;
  const float cv = cond.value_or(0.0f);

  std::vector<float> pre(H4);
  std::vector<float> out(input.size());

  for (std::size_t t = 0; t < input.size(); ++t) {
    const float x = input[t];
    if (!std::isfinite(x)) throw ValueError("non-finite input sample at index " + std::to_string(t));

    // pre-activations for all 4H gates, vectorizable across j
    if (I == 1) {
      for (std::size_t j = 0; j < H4; ++j) pre[j] = bih[j] + bhh[j] + wih[j] * x;
    } else {
      for (std::size_t j = 0; j < H4; ++j)
        pre[j] = bih[j] + bhh[j] + wih[2 * j] * x + wih[2 * j + 1] * cv;
    }
    for (std::size_t j = 0; j < H4; ++j) {
      const float* row = whh + j * static_cast<std::size_t>(H);
      float acc = 0.0f;
      for (int k = 0; k < H; ++k) acc += row[k] * h[k];
      pre[j] += acc;
    }

    float y = model.head_bias;
    for (int k = 0; k < H; ++k) {
      const float ig = sigmoidf(pre[k]);
      const float fg = sigmoidf(pre[H + k]);
      const float gg = std::tanh(pre[2 * H + k]);
      const float og = sigmoidf(pre[3 * H + k]);
      const float cn = fg * c[k] + ig * gg;
      const float hn = og * std::tanh(cn);
      c[k] = cn;
      h[k] = hn;
      y += wh[k] * hn;
    }
    if (model.skip) y += x;
    out[t] = y;
  }
  return out;
}

AudioClip render(const DeviceModel& model, const AudioClip& clip, std::optional<float> cond,
                 std::size_t warmup_samples) {
  if (clip.samples.empty()) throw EmptyClipError("cannot render an empty clip");
  if (warmup_samples >= clip.samples.size())
    throw ValueError("warmup_samples >= clip length");
  LstmState state = init_state(model);
  std::vector<float> out = process_block(model, state, clip.samples, cond);
  AudioClip rendered;
  rendered.sample_rate = clip.sample_rate;
  if (warmup_samples > 0)
    rendered.samples.assign(out.begin() + static_cast<std::ptrdiff_t>(warmup_samples), out.end());
  else
    rendered.samples = std::move(out);
  return rendered;
}

}  // namespace ampforge
