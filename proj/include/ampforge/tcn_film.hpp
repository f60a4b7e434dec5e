#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ampforge/grad.hpp"

namespace ampforge {

struct TcnConfig {
  int n_blocks = 2;
  int layers_per_block = 8;
  int channels = 16;
  int kernel = 3;
  int dilation_growth = 2;
  int embed_dim = 16;
  int n_devices = 1;

  int n_layers() const { return n_blocks * layers_per_block; }
  // dilation resets at each block boundary: D^0 .. D^(L-1) per block
  int dilation_of(int layer) const {
    int d = 1;
    for (int i = 0; i < layer % layers_per_block; ++i) d *= dilation_growth;
    return d;
  }
};

// 1 + n_blocks * (K-1) * sum_{l<L} D^l
long receptive_field(const TcnConfig& cfg);

// Per-channel affine over a [C x T] feature map.
std::vector<double> film_apply(std::span<const double> features, int channels, int time,
                               std::span<const double> gamma, std::span<const double> beta);

struct TcnLayer {
  int c_in = 1;
  int c_out = 1;
  int dilation = 1;
  std::vector<double> conv_w;  // [c_out x c_in x K]
  std::vector<double> conv_b;  // [c_out]
  std::vector<double> film_w;  // [2C x E]
  std::vector<double> film_b;  // [2C], gamma half then beta half
  std::vector<double> res_w;   // [c_out x c_in] 1x1 projection, no bias
  std::vector<double> alpha;   // [c_out] rectifier slopes
};

// Train-mode activation cache for one forward pass.
struct TcnCache {
  bool valid = false;
  int T = 0;
  int device_index = -1;  // -1 when conditioned on an external embedding
  std::vector<double> embedding;
  struct LayerCache {
    std::vector<double> x;      // layer input [c_in x T]
    std::vector<double> z;      // post-conv [C x T]
    std::vector<double> f;      // post-FiLM [C x T]
    std::vector<double> gamma;  // [C]
    std::vector<double> beta;   // [C]
  };
  std::vector<LayerCache> layers;
  std::vector<double> last;  // final layer output [C x T]
};

// One-to-many TCN: causal dilated convolutions, FiLM parameters generated per
// layer from a device embedding, residual 1x1 path, C->1 output head. The
// embedding table is shared by all layers.
class TcnModel {
 public:
  TcnModel() = default;
  TcnModel(const TcnConfig& cfg, std::uint64_t seed);

  const TcnConfig& config() const { return cfg_; }

  std::vector<double> forward(std::span<const double> audio, int device_index,
                              TcnCache* cache = nullptr) const;
  std::vector<double> forward_embedding(std::span<const double> audio,
                                        std::span<const double> embedding,
                                        TcnCache* cache = nullptr) const;

  // Exact reverse-mode gradients for every parameter reachable from the cached
  // forward. Emits "embedding.table" when the forward used a device index,
  // "embedding.input" when it was conditioned on an external embedding.
  GradSet backward(const TcnCache& cache, std::span<const double> upstream,
                   std::vector<double>* input_grad = nullptr) const;

  std::vector<double> embedding_lookup(int device_index) const;

  ParamRefs param_refs();
  long param_count() const;

  const std::vector<TcnLayer>& layers() const { return layers_; }
  std::vector<double>& embedding_table() { return embedding_; }
  const std::vector<double>& embedding_table() const { return embedding_; }

 private:
  TcnConfig cfg_;
  std::vector<TcnLayer> layers_;
  std::vector<double> head_w_;  // [C]
  std::vector<double> head_b_;  // [1]
  std::vector<double> embedding_;  // [M x E]
};

// Streamed forward with carried left context; equals the one-shot forward for
// any block split.
class TcnStream {
 public:
  TcnStream(const TcnModel& model, int device_index);
  TcnStream(const TcnModel& model, std::vector<double> embedding);

  std::vector<double> process(std::span<const double> block);

 private:
  const TcnModel& model_;
  std::vector<double> embedding_;
  std::vector<double> history_;  // last receptive_field-1 input samples
};

}  // namespace ampforge
