#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "ampforge/grad.hpp"

namespace ampforge {

struct EncoderConfig {
  std::vector<int> channels = {16, 16, 32, 32, 64, 64};  // per block
  int kernel = 5;
  int stride = 2;  // first conv of each block
  int output_channels = 64;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int n_blocks() const { return static_cast<int>(channels.size()); }
  long total_downsample() const {
    long d = 1;
    for (std::size_t i = 0; i < channels.size(); ++i) d *= stride;
    return d;
  }
};

struct BatchNorm {
  std::vector<double> gamma, beta;              // learnable
  std::vector<double> running_mean, running_var;  // eval-mode statistics
};

struct EncoderBlock {
  int c_in = 1, c_out = 1;
  std::vector<double> conv1_w, conv1_b;  // strided
  BatchNorm bn1;
  std::vector<double> conv2_w, conv2_b;
  BatchNorm bn2;
  std::vector<double> proj_w, proj_b;  // 1x1 strided residual projection
};

using EmbeddingBatch = std::vector<std::vector<double>>;  // B x embed_dim

struct EncoderCache;  // opaque activation cache, defined in the .cpp

// Contrastive effects encoder: conv blocks of two kernel-5 convolutions with
// batch norm, ReLU and a projected residual, stride 2 per block, then a
// 64-channel output convolution averaged over time.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(const EncoderConfig& cfg, std::uint64_t seed);
  ~EncoderModel();
  EncoderModel(EncoderModel&&) noexcept;
  EncoderModel& operator=(EncoderModel&&) noexcept;
  EncoderModel(const EncoderModel&);
  EncoderModel& operator=(const EncoderModel&);

  const EncoderConfig& config() const { return cfg_; }
  int embed_dim() const { return cfg_.output_channels; }

  void set_train(bool train) { train_ = train; }
  bool is_train() const { return train_; }

  // Per-clip embeddings. Train mode normalizes with batch statistics, updates
  // running statistics and (when given) fills the cache; eval mode is a pure
  // function of the inputs. All clips must share one length >= the total
  // downsampling factor.
  EmbeddingBatch forward(const std::vector<std::vector<double>>& clips);
  EmbeddingBatch forward_eval(const std::vector<std::vector<double>>& clips) const;

  GradSet backward(std::span<const std::vector<double>> upstream) const;  // uses last train cache

  ParamRefs param_refs();
  // batch-norm running statistics; saved in checkpoints, not trained
  ParamRefs state_refs();
  long param_count() const;

  const std::vector<EncoderBlock>& blocks() const { return blocks_; }
  std::vector<EncoderBlock>& blocks() { return blocks_; }
  std::vector<double>& output_conv_w() { return out_w_; }
  std::vector<double>& output_conv_b() { return out_b_; }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderBlock> blocks_;
  std::vector<double> out_w_, out_b_;
  bool train_ = false;
  std::unique_ptr<EncoderCache> cache_;
};

// Normalized temperature-scaled cross-entropy over 2N views with a perfect
// pairing; pair_index[i] is view i's partner.
double nt_xent(const EmbeddingBatch& embeddings, const std::vector<int>& pair_index,
               double temperature = 0.5);

// Loss plus gradient w.r.t. the raw (unnormalized) embeddings.
double nt_xent_with_grad(const EmbeddingBatch& embeddings, const std::vector<int>& pair_index,
                         double temperature, EmbeddingBatch* grad);

// Majority vote among the k nearest references by Euclidean distance on
// L2-normalized embeddings; vote ties go to the tied class with the nearest
// single neighbor.
std::vector<int> knn_classify(const EmbeddingBatch& references, const std::vector<int>& labels,
                              const EmbeddingBatch& queries, int k = 5);

struct MlpConfig {
  int hidden = 100;
  int iterations = 400;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

struct MlpModel {
  int in_dim = 0, hidden = 0, n_classes = 0;
  std::vector<double> w1, b1;  // [hidden x in], [hidden]
  std::vector<double> w2, b2;  // [classes x hidden], [classes]

  long param_count() const {
    return static_cast<long>(w1.size() + b1.size() + w2.size() + b2.size());
  }
  ParamRefs param_refs();
};

MlpModel mlp_train(const EmbeddingBatch& embeddings, const std::vector<int>& labels,
                   const MlpConfig& cfg = {});
std::vector<int> mlp_predict(const MlpModel& model, const EmbeddingBatch& embeddings);

// [hidden x in] ReLU MLP softmax cross-entropy; returns mean loss, fills grads.
double mlp_loss_grad(MlpModel& model, const EmbeddingBatch& inputs, const std::vector<int>& labels,
                     GradSet* grads);

// Structured-text rows: clip id followed by the embedding values.
void write_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids,
                      const EmbeddingBatch& embeddings);
std::pair<std::vector<std::string>, EmbeddingBatch> read_embeddings(
    const std::filesystem::path& path);

}  // namespace ampforge
