#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ampforge/model_zoo.hpp"
#include "ampforge/signal_io.hpp"

namespace ampforge {

struct LstmState {
  std::vector<float> h;
  std::vector<float> c;
};

LstmState init_state(const DeviceModel& model);

// Standard LSTM recurrence over one block of samples, gate order i,f,g,o,
// sigmoid on i/f/o and tanh on g and the cell output. State carries across
// blocks, so any block split of the same input is bit-identical.
// 32-bit float math throughout.
std::vector<float> process_block(const DeviceModel& model, LstmState& state,
                                 std::span<const float> input,
                                 std::optional<float> cond = std::nullopt);

// Fresh zero state, whole clip. `warmup_samples` outputs are rendered and
// discarded from the front when nonzero.
AudioClip render(const DeviceModel& model, const AudioClip& clip,
                 std::optional<float> cond = std::nullopt, std::size_t warmup_samples = 0);

}  // namespace ampforge
