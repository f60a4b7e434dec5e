#include "ampforge/effects_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ampforge/errors.hpp"
#include "ampforge/optim.hpp"
#include "ampforge/rng.hpp"

namespace ampforge {

namespace {

// 1-D convolution, same padding (K odd), stride s.
// x: [c_in x T], w: [c_out x c_in x K], out: [c_out x T_out]
int conv_out_len(int T, int kernel, int stride) {
  const int pad = (kernel - 1) / 2;
  return (T + 2 * pad - kernel) / stride + 1;
}

void conv1d(const std::vector<double>& x, int c_in, int T, const std::vector<double>& w,
            const std::vector<double>& b, int c_out, int kernel, int stride,
            std::vector<double>& out) {
  const int pad = (kernel - 1) / 2;
  const int T_out = conv_out_len(T, kernel, stride);
  out.assign(static_cast<std::size_t>(c_out) * T_out, 0.0);
  for (int c = 0; c < c_out; ++c) {
    double* orow = out.data() + static_cast<std::size_t>(c) * T_out;
    for (int t = 0; t < T_out; ++t) orow[t] = b[static_cast<std::size_t>(c)];
    for (int ci = 0; ci < c_in; ++ci) {
      const double* xrow = x.data() + static_cast<std::size_t>(ci) * T;
      const double* wrow = w.data() + (static_cast<std::size_t>(c) * c_in + ci) * kernel;
      for (int t = 0; t < T_out; ++t) {
        const int base = t * stride - pad;
        double acc = 0.0;
        for (int k = 0; k < kernel; ++k) {
          const int s = base + k;
          if (s >= 0 && s < T) acc += wrow[k] * xrow[s];
        }
        orow[t] += acc;
      }
    }
  }
}

// accumulates dw, db, dx for the conv above
void conv1d_backward(const std::vector<double>& x, int c_in, int T, const std::vector<double>& w,
                     int c_out, int kernel, int stride, const std::vector<double>& dout,
                     std::vector<double>& dw, std::vector<double>& db, std::vector<double>* dx) {
  const int pad = (kernel - 1) / 2;
  const int T_out = conv_out_len(T, kernel, stride);
  for (int c = 0; c < c_out; ++c) {
    const double* dorow = dout.data() + static_cast<std::size_t>(c) * T_out;
    double acc = 0.0;
    for (int t = 0; t < T_out; ++t) acc += dorow[t];
    db[static_cast<std::size_t>(c)] += acc;
    for (int ci = 0; ci < c_in; ++ci) {
      const double* xrow = x.data() + static_cast<std::size_t>(ci) * T;
      const double* wrow = w.data() + (static_cast<std::size_t>(c) * c_in + ci) * kernel;
      double* dwrow = dw.data() + (static_cast<std::size_t>(c) * c_in + ci) * kernel;
      double* dxrow = dx ? dx->data() + static_cast<std::size_t>(ci) * T : nullptr;
      for (int t = 0; t < T_out; ++t) {
        const int base = t * stride - pad;
        const double g = dorow[t];
        for (int k = 0; k < kernel; ++k) {
          const int s = base + k;
          if (s < 0 || s >= T) continue;
          dwrow[k] += g * xrow[s];
          if (dxrow) dxrow[s] += g * wrow[k];
        }
      }
    }
  }
}

struct BnStats {
  std::vector<double> mean, inv_std;  // per channel
};

}  // namespace

// Everything the backward pass needs from one train-mode forward.
struct EncoderCache {
  int B = 0;
  std::vector<int> T;  // length after each block input stage: T[0] input, T[i+1] after block i
  struct BlockCache {
    std::vector<std::vector<double>> x;        // input [c_in x T_in] per item
    std::vector<std::vector<double>> z1;       // conv1 out
    BnStats s1;
    std::vector<std::vector<double>> h1;       // relu(bn1) out
    std::vector<std::vector<double>> z2;       // conv2 out
    BnStats s2;
    std::vector<std::vector<double>> bn2_out;  // pre-residual
    std::vector<std::vector<double>> pre_relu; // bn2_out + proj
  };
  std::vector<BlockCache> blocks;
  std::vector<std::vector<double>> trunk_out;  // last block output per item
  std::vector<std::vector<double>> out_conv;   // output conv activations per item
  int T_final = 0;
};

EncoderModel::~EncoderModel() = default;
EncoderModel::EncoderModel(EncoderModel&&) noexcept = default;
EncoderModel& EncoderModel::operator=(EncoderModel&&) noexcept = default;

EncoderModel::EncoderModel(const EncoderModel& other)
    : cfg_(other.cfg_), blocks_(other.blocks_), out_w_(other.out_w_), out_b_(other.out_b_),
      train_(other.train_) {}

EncoderModel& EncoderModel::operator=(const EncoderModel& other) {
  cfg_ = other.cfg_;
  blocks_ = other.blocks_;
  out_w_ = other.out_w_;
  out_b_ = other.out_b_;
  train_ = other.train_;
  cache_.reset();
  return *this;
}

EncoderModel::EncoderModel(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.channels.empty()) throw ValueError("encoder needs at least one block");
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0) throw ValueError("encoder kernel must be odd");
  for (std::size_t i = 1; i < cfg.channels.size(); ++i)
    if (cfg.channels[i] < cfg.channels[i - 1])
      throw ValueError("encoder channel schedule must be non-decreasing");

  Rng rng(derive_seed(seed, 0x656e63));
  const int K = cfg.kernel;
  int c_in = 1;
  for (int c_out : cfg.channels) {
    EncoderBlock b;
    b.c_in = c_in;
    b.c_out = c_out;
    auto fill = [&](std::vector<double>& v, std::size_t n, double std) {
      v.resize(n);
      for (double& x : v) x = rng.gaussian() * std;
    };
    fill(b.conv1_w, static_cast<std::size_t>(c_out) * c_in * K, std::sqrt(2.0 / (c_in * K)));
    b.conv1_b.assign(static_cast<std::size_t>(c_out), 0.0);
    fill(b.conv2_w, static_cast<std::size_t>(c_out) * c_out * K, std::sqrt(2.0 / (c_out * K)));
    b.conv2_b.assign(static_cast<std::size_t>(c_out), 0.0);
    fill(b.proj_w, static_cast<std::size_t>(c_out) * c_in, std::sqrt(1.0 / c_in));
    b.proj_b.assign(static_cast<std::size_t>(c_out), 0.0);
    for (BatchNorm* bn : {&b.bn1, &b.bn2}) {
      bn->gamma.assign(static_cast<std::size_t>(c_out), 1.0);
      bn->beta.assign(static_cast<std::size_t>(c_out), 0.0);
      bn->running_mean.assign(static_cast<std::size_t>(c_out), 0.0);
      bn->running_var.assign(static_cast<std::size_t>(c_out), 1.0);
    }
    blocks_.push_back(std::move(b));
    c_in = c_out;
  }
  out_w_.resize(static_cast<std::size_t>(cfg.output_channels) * c_in * K);
  const double out_std = std::sqrt(2.0 / (c_in * K));
  for (double& x : out_w_) x = rng.gaussian() * out_std;
  out_b_.assign(static_cast<std::size_t>(cfg.output_channels), 0.0);
}

namespace {

// batch norm over (batch, time) per channel
void bn_train_forward(std::vector<std::vector<double>>& feats, int C, int T, BatchNorm& bn,
                      double eps, double momentum, BnStats& stats) {
  const int B = static_cast<int>(feats.size());
  const double n = static_cast<double>(B) * T;
  stats.mean.assign(static_cast<std::size_t>(C), 0.0);
  stats.inv_std.assign(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int b = 0; b < B; ++b) {
      const double* row = feats[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) {
        sum += row[t];
        sq += row[t] * row[t];
      }
    }
    const double mean = sum / n;
    const double var = std::max(sq / n - mean * mean, 0.0);  // biased
    stats.mean[static_cast<std::size_t>(c)] = mean;
    stats.inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
    const double unbiased = n > 1.0 ? var * n / (n - 1.0) : var;
    bn.running_mean[static_cast<std::size_t>(c)] =
        (1.0 - momentum) * bn.running_mean[static_cast<std::size_t>(c)] + momentum * mean;
    bn.running_var[static_cast<std::size_t>(c)] =
        (1.0 - momentum) * bn.running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
    const double g = bn.gamma[static_cast<std::size_t>(c)];
    const double be = bn.beta[static_cast<std::size_t>(c)];
    const double is = stats.inv_std[static_cast<std::size_t>(c)];
    for (int b = 0; b < B; ++b) {
      double* row = feats[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) row[t] = g * (row[t] - mean) * is + be;
    }
  }
}

void bn_eval_forward(std::vector<double>& feat, int C, int T, const BatchNorm& bn, double eps) {
  for (int c = 0; c < C; ++c) {
    const double is = 1.0 / std::sqrt(bn.running_var[static_cast<std::size_t>(c)] + eps);
    const double mean = bn.running_mean[static_cast<std::size_t>(c)];
    const double g = bn.gamma[static_cast<std::size_t>(c)];
    const double be = bn.beta[static_cast<std::size_t>(c)];
    double* row = feat.data() + static_cast<std::size_t>(c) * T;
    for (int t = 0; t < T; ++t) row[t] = g * (row[t] - mean) * is + be;
  }
}

// dL/dx for train-mode batch norm, given y = gamma*(x-mean)*inv_std + beta.
// feats_normed holds xhat = (x-mean)*inv_std (recovered from the cached
// pre-activation), dy the upstream gradient.
void bn_train_backward(const std::vector<std::vector<double>>& pre,
                       const std::vector<std::vector<double>>& dy, int C, int T,
                       const BatchNorm& bn, const BnStats& stats, std::vector<double>& dgamma,
                       std::vector<double>& dbeta, std::vector<std::vector<double>>& dx) {
  const int B = static_cast<int>(pre.size());
  const double n = static_cast<double>(B) * T;
  for (int c = 0; c < C; ++c) {
    const double mean = stats.mean[static_cast<std::size_t>(c)];
    const double is = stats.inv_std[static_cast<std::size_t>(c)];
    const double g = bn.gamma[static_cast<std::size_t>(c)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int b = 0; b < B; ++b) {
      const double* prow = pre[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      const double* drow = dy[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) {
        const double xhat = (prow[t] - mean) * is;
        sum_dy += drow[t];
        sum_dy_xhat += drow[t] * xhat;
      }
    }
    dgamma[static_cast<std::size_t>(c)] += sum_dy_xhat;
    dbeta[static_cast<std::size_t>(c)] += sum_dy;
    for (int b = 0; b < B; ++b) {
      const double* prow = pre[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      const double* drow = dy[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      double* dxrow = dx[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) {
        const double xhat = (prow[t] - mean) * is;
        dxrow[t] += (g * is) * (drow[t] - sum_dy / n - xhat * sum_dy_xhat / n);
      }
    }
  }
}

}  // namespace

EmbeddingBatch EncoderModel::forward(const std::vector<std::vector<double>>& clips) {
  if (!train_) return forward_eval(clips);
  if (clips.empty()) throw ShapeError("encoder forward: empty batch");
  const int B = static_cast<int>(clips.size());
  const int T0 = static_cast<int>(clips[0].size());
  for (const auto& c : clips)
    if (static_cast<int>(c.size()) != T0)
      throw ShapeError("encoder forward: clips must share one length");
  if (T0 < cfg_.total_downsample())
    throw ShapeError("encoder forward: clip length " + std::to_string(T0) +
                     " below total downsampling factor " + std::to_string(cfg_.total_downsample()));

  cache_ = std::make_unique<EncoderCache>();
  EncoderCache& cc = *cache_;
  cc.B = B;
  cc.T.push_back(T0);

  std::vector<std::vector<double>> x(clips.begin(), clips.end());
  int T = T0;
  int c_in = 1;
  const int K = cfg_.kernel;
  for (auto& block : blocks_) {
    EncoderCache::BlockCache bc;
    bc.x = x;
    const int C = block.c_out;
    const int T_out = conv_out_len(T, K, cfg_.stride);

    std::vector<std::vector<double>> z1(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
      conv1d(x[static_cast<std::size_t>(b)], c_in, T, block.conv1_w, block.conv1_b, C, K,
             cfg_.stride, z1[static_cast<std::size_t>(b)]);
    bc.z1 = z1;
    bn_train_forward(z1, C, T_out, block.bn1, cfg_.bn_eps, cfg_.bn_momentum, bc.s1);
    for (auto& item : z1)
      for (double& v : item) v = std::max(v, 0.0);
    bc.h1 = z1;

    std::vector<std::vector<double>> z2(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
      conv1d(z1[static_cast<std::size_t>(b)], C, T_out, block.conv2_w, block.conv2_b, C, K, 1,
             z2[static_cast<std::size_t>(b)]);
    bc.z2 = z2;
    bn_train_forward(z2, C, T_out, block.bn2, cfg_.bn_eps, cfg_.bn_momentum, bc.s2);
    bc.bn2_out = z2;

    std::vector<std::vector<double>> out(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::vector<double> proj;
      conv1d(x[static_cast<std::size_t>(b)], c_in, T, block.proj_w, block.proj_b, C, 1,
             cfg_.stride, proj);
      auto& o = out[static_cast<std::size_t>(b)];
      o = z2[static_cast<std::size_t>(b)];
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += proj[i];
    }
    bc.pre_relu = out;
    for (auto& item : out)
      for (double& v : item) v = std::max(v, 0.0);

    cc.blocks.push_back(std::move(bc));
    x = std::move(out);
    T = T_out;
    c_in = C;
    cc.T.push_back(T);
  }
  cc.trunk_out = x;

  const int C_out = cfg_.output_channels;
  const int T_f = conv_out_len(T, K, 1);
  cc.T_final = T_f;
  EmbeddingBatch emb(static_cast<std::size_t>(B));
  cc.out_conv.resize(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    conv1d(x[static_cast<std::size_t>(b)], c_in, T, out_w_, out_b_, C_out, K, 1,
           cc.out_conv[static_cast<std::size_t>(b)]);
    auto& e = emb[static_cast<std::size_t>(b)];
    e.assign(static_cast<std::size_t>(C_out), 0.0);
    const auto& oc = cc.out_conv[static_cast<std::size_t>(b)];
    for (int c = 0; c < C_out; ++c) {
      double acc = 0.0;
      for (int t = 0; t < T_f; ++t) acc += oc[static_cast<std::size_t>(c) * T_f + t];
      e[static_cast<std::size_t>(c)] = acc / T_f;
    }
  }
  return emb;
}

EmbeddingBatch EncoderModel::forward_eval(const std::vector<std::vector<double>>& clips) const {
  if (clips.empty()) throw ShapeError("encoder forward: empty batch");
  const int K = cfg_.kernel;
  EmbeddingBatch emb(clips.size());
  for (std::size_t b = 0; b < clips.size(); ++b) {
    int T = static_cast<int>(clips[b].size());
    if (T < cfg_.total_downsample())
      throw ShapeError("encoder forward: clip length " + std::to_string(T) +
                       " below total downsampling factor " +
                       std::to_string(cfg_.total_downsample()));
    std::vector<double> x = clips[b];
    int c_in = 1;
    for (const auto& block : blocks_) {
      const int C = block.c_out;
      const int T_out = conv_out_len(T, K, cfg_.stride);
      std::vector<double> z1;
      conv1d(x, c_in, T, block.conv1_w, block.conv1_b, C, K, cfg_.stride, z1);
      bn_eval_forward(z1, C, T_out, block.bn1, cfg_.bn_eps);
      for (double& v : z1) v = std::max(v, 0.0);
      std::vector<double> z2;
      conv1d(z1, C, T_out, block.conv2_w, block.conv2_b, C, K, 1, z2);
      bn_eval_forward(z2, C, T_out, block.bn2, cfg_.bn_eps);
      std::vector<double> proj;
      conv1d(x, c_in, T, block.proj_w, block.proj_b, C, 1, cfg_.stride, proj);
      for (std::size_t i = 0; i < z2.size(); ++i) z2[i] = std::max(z2[i] + proj[i], 0.0);
      x = std::move(z2);
      T = T_out;
      c_in = C;
    }
    const int C_out = cfg_.output_channels;
    const int T_f = conv_out_len(T, K, 1);
    std::vector<double> oc;
    conv1d(x, c_in, T, out_w_, out_b_, C_out, K, 1, oc);
    auto& e = emb[b];
    e.assign(static_cast<std::size_t>(C_out), 0.0);
    for (int c = 0; c < C_out; ++c) {
      double acc = 0.0;
      for (int t = 0; t < T_f; ++t) acc += oc[static_cast<std::size_t>(c) * T_f + t];
      e[static_cast<std::size_t>(c)] = acc / T_f;
    }
  }
  return emb;
}

GradSet EncoderModel::backward(std::span<const std::vector<double>> upstream) const {
  if (!cache_) throw CacheError("encoder backward: no cached train-mode forward");
  const EncoderCache& cc = *cache_;
  if (upstream.size() != static_cast<std::size_t>(cc.B))
    throw ShapeError("encoder backward: upstream batch mismatch");
  const int B = cc.B;
  const int K = cfg_.kernel;
  const int C_out = cfg_.output_channels;
  const int T_f = cc.T_final;
  const int T_trunk = cc.T.back();
  const int c_trunk = blocks_.back().c_out;

  GradSet grads;
  auto& d_out_w = grads["out.weight"];
  d_out_w.assign(out_w_.size(), 0.0);
  auto& d_out_b = grads["out.bias"];
  d_out_b.assign(out_b_.size(), 0.0);

  // mean over time -> output conv
  std::vector<std::vector<double>> dx(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const auto& du = upstream[static_cast<std::size_t>(b)];
    if (du.size() != static_cast<std::size_t>(C_out))
      throw ShapeError("encoder backward: upstream dim mismatch");
    std::vector<double> d_oc(static_cast<std::size_t>(C_out) * T_f);
    for (int c = 0; c < C_out; ++c) {
      const double g = du[static_cast<std::size_t>(c)] / T_f;
      for (int t = 0; t < T_f; ++t) d_oc[static_cast<std::size_t>(c) * T_f + t] = g;
    }
    dx[static_cast<std::size_t>(b)].assign(static_cast<std::size_t>(c_trunk) * T_trunk, 0.0);
    conv1d_backward(cc.trunk_out[static_cast<std::size_t>(b)], c_trunk, T_trunk, out_w_, C_out, K,
                    1, d_oc, d_out_w, d_out_b, &dx[static_cast<std::size_t>(b)]);
  }

  for (int blk = static_cast<int>(blocks_.size()) - 1; blk >= 0; --blk) {
    const EncoderBlock& block = blocks_[static_cast<std::size_t>(blk)];
    const auto& bc = cc.blocks[static_cast<std::size_t>(blk)];
    const int C = block.c_out;
    const int c_in = block.c_in;
    const int T_in = cc.T[static_cast<std::size_t>(blk)];
    const int T_out = cc.T[static_cast<std::size_t>(blk) + 1];
    const std::string p = "block" + std::to_string(blk) + ".";

    auto& d_c1w = grads[p + "conv1.weight"]; d_c1w.assign(block.conv1_w.size(), 0.0);
    auto& d_c1b = grads[p + "conv1.bias"];   d_c1b.assign(block.conv1_b.size(), 0.0);
    auto& d_g1 = grads[p + "bn1.gamma"];     d_g1.assign(static_cast<std::size_t>(C), 0.0);
    auto& d_b1 = grads[p + "bn1.beta"];      d_b1.assign(static_cast<std::size_t>(C), 0.0);
    auto& d_c2w = grads[p + "conv2.weight"]; d_c2w.assign(block.conv2_w.size(), 0.0);
    auto& d_c2b = grads[p + "conv2.bias"];   d_c2b.assign(block.conv2_b.size(), 0.0);
    auto& d_g2 = grads[p + "bn2.gamma"];     d_g2.assign(static_cast<std::size_t>(C), 0.0);
    auto& d_b2 = grads[p + "bn2.beta"];      d_b2.assign(static_cast<std::size_t>(C), 0.0);
    auto& d_pw = grads[p + "proj.weight"];   d_pw.assign(block.proj_w.size(), 0.0);
    auto& d_pb = grads[p + "proj.bias"];     d_pb.assign(block.proj_b.size(), 0.0);

    // through the block output ReLU
    std::vector<std::vector<double>> d_pre(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto& pre = bc.pre_relu[static_cast<std::size_t>(b)];
      auto& d = dx[static_cast<std::size_t>(b)];
      d_pre[static_cast<std::size_t>(b)].resize(d.size());
      for (std::size_t i = 0; i < d.size(); ++i)
        d_pre[static_cast<std::size_t>(b)][i] = pre[i] > 0.0 ? d[i] : 0.0;
    }

    std::vector<std::vector<double>> d_input(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
      d_input[static_cast<std::size_t>(b)].assign(static_cast<std::size_t>(c_in) * T_in, 0.0);

    // residual projection branch
    for (int b = 0; b < B; ++b)
      conv1d_backward(bc.x[static_cast<std::size_t>(b)], c_in, T_in, block.proj_w, C, 1,
                      cfg_.stride, d_pre[static_cast<std::size_t>(b)], d_pw, d_pb,
                      &d_input[static_cast<std::size_t>(b)]);

    // main branch: bn2 <- conv2 <- relu1 <- bn1 <- conv1
    std::vector<std::vector<double>> d_z2(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
      d_z2[static_cast<std::size_t>(b)].assign(static_cast<std::size_t>(C) * T_out, 0.0);
    bn_train_backward(bc.z2, d_pre, C, T_out, block.bn2, bc.s2, d_g2, d_b2, d_z2);

    std::vector<std::vector<double>> d_h1(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      d_h1[static_cast<std::size_t>(b)].assign(static_cast<std::size_t>(C) * T_out, 0.0);
      conv1d_backward(bc.h1[static_cast<std::size_t>(b)], C, T_out, block.conv2_w, C, K, 1,
                      d_z2[static_cast<std::size_t>(b)], d_c2w, d_c2b,
                      &d_h1[static_cast<std::size_t>(b)]);
    }

    // relu after bn1: h1 > 0 exactly where it passed
    for (int b = 0; b < B; ++b) {
      const auto& h1 = bc.h1[static_cast<std::size_t>(b)];
      auto& d = d_h1[static_cast<std::size_t>(b)];
      for (std::size_t i = 0; i < d.size(); ++i)
        if (h1[i] <= 0.0) d[i] = 0.0;
    }

    std::vector<std::vector<double>> d_z1(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
      d_z1[static_cast<std::size_t>(b)].assign(static_cast<std::size_t>(C) * T_out, 0.0);
    bn_train_backward(bc.z1, d_h1, C, T_out, block.bn1, bc.s1, d_g1, d_b1, d_z1);

    for (int b = 0; b < B; ++b)
      conv1d_backward(bc.x[static_cast<std::size_t>(b)], c_in, T_in, block.conv1_w, C, K,
                      cfg_.stride, d_z1[static_cast<std::size_t>(b)], d_c1w, d_c1b,
                      &d_input[static_cast<std::size_t>(b)]);

    dx = std::move(d_input);
  }
  return grads;
}

ParamRefs EncoderModel::param_refs() {
  ParamRefs refs;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    EncoderBlock& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    refs.push_back({p + "conv1.weight", &b.conv1_w});
    refs.push_back({p + "conv1.bias", &b.conv1_b});
    refs.push_back({p + "bn1.gamma", &b.bn1.gamma});
    refs.push_back({p + "bn1.beta", &b.bn1.beta});
    refs.push_back({p + "conv2.weight", &b.conv2_w});
    refs.push_back({p + "conv2.bias", &b.conv2_b});
    refs.push_back({p + "bn2.gamma", &b.bn2.gamma});
    refs.push_back({p + "bn2.beta", &b.bn2.beta});
    refs.push_back({p + "proj.weight", &b.proj_w});
    refs.push_back({p + "proj.bias", &b.proj_b});
  }
  refs.push_back({"out.weight", &out_w_});
  refs.push_back({"out.bias", &out_b_});
  return refs;
}

ParamRefs EncoderModel::state_refs() {
  ParamRefs refs;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    EncoderBlock& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    refs.push_back({p + "bn1.running_mean", &b.bn1.running_mean});
    refs.push_back({p + "bn1.running_var", &b.bn1.running_var});
    refs.push_back({p + "bn2.running_mean", &b.bn2.running_mean});
    refs.push_back({p + "bn2.running_var", &b.bn2.running_var});
  }
  return refs;
}

long EncoderModel::param_count() const {
  long n = 0;
  for (const auto& b : blocks_)
    n += static_cast<long>(b.conv1_w.size() + b.conv1_b.size() + b.bn1.gamma.size() +
                           b.bn1.beta.size() + b.conv2_w.size() + b.conv2_b.size() +
                           b.bn2.gamma.size() + b.bn2.beta.size() + b.proj_w.size() +
                           b.proj_b.size());
  n += static_cast<long>(out_w_.size() + out_b_.size());
  return n;
}

namespace {

void check_pairing(std::size_t n, const std::vector<int>& pair_index) {
  if (n < 2 || n % 2 != 0) throw PairingError("nt_xent: need an even number of views >= 2");
  if (pair_index.size() != n) throw PairingError("nt_xent: pair_index size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const int p = pair_index[i];
    if (p < 0 || static_cast<std::size_t>(p) >= n || static_cast<std::size_t>(p) == i ||
        pair_index[static_cast<std::size_t>(p)] != static_cast<int>(i))
      throw PairingError("nt_xent: pair_index is not a perfect pairing");
  }
}

std::vector<double> l2_normalize(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  std::vector<double> out(v.size());
  const double inv = norm > 1e-12 ? 1.0 / norm : 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return out;
}

}  // namespace

double nt_xent(const EmbeddingBatch& embeddings, const std::vector<int>& pair_index,
               double temperature) {
  return nt_xent_with_grad(embeddings, pair_index, temperature, nullptr);
}

double nt_xent_with_grad(const EmbeddingBatch& embeddings, const std::vector<int>& pair_index,
                         double temperature, EmbeddingBatch* grad) {
  const std::size_t n = embeddings.size();
  check_pairing(n, pair_index);
  if (!(temperature > 0.0)) throw DomainError("nt_xent: temperature must be positive");
  const std::size_t dim = embeddings[0].size();
  for (const auto& e : embeddings)
    if (e.size() != dim) throw ShapeError("nt_xent: embedding dims differ");

  std::vector<std::vector<double>> z(n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (double x : embeddings[i]) sq += x * x;
    norms[i] = std::max(std::sqrt(sq), 1e-12);
    z[i] = embeddings[i];
    for (double& x : z[i]) x /= norms[i];
  }

  // cosine similarities over temperature
  std::vector<double> s(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += z[i][d] * z[j][d];
      s[i * n + j] = s[j * n + i] = dot / temperature;
    }

  double loss = 0.0;
  std::vector<double> g_s;  // dL/ds, only when grad requested
  if (grad) g_s.assign(n * n, 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, s[i * n + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) denom += std::exp(s[i * n + j] - mx);
    const std::size_t p = static_cast<std::size_t>(pair_index[i]);
    loss += -(s[i * n + p] - mx) + std::log(denom);
    if (grad) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double soft = std::exp(s[i * n + j] - mx) / denom;
        g_s[i * n + j] = (soft - (j == p ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  loss /= static_cast<double>(n);

  if (grad) {
    grad->assign(n, std::vector<double>(dim, 0.0));
    // dL/dz_i = (1/tau) * sum_j (g_ij + g_ji) z_j
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> dz(dim, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = (g_s[i * n + j] + g_s[j * n + i]) / temperature;
        if (w == 0.0) continue;
        for (std::size_t d = 0; d < dim; ++d) dz[d] += w * z[j][d];
      }
      // through the L2 normalization
      double zdz = 0.0;
      for (std::size_t d = 0; d < dim; ++d) zdz += z[i][d] * dz[d];
      for (std::size_t d = 0; d < dim; ++d)
        (*grad)[i][d] = (dz[d] - z[i][d] * zdz) / norms[i];
    }
  }
  return loss;
}

std::vector<int> knn_classify(const EmbeddingBatch& references, const std::vector<int>& labels,
                              const EmbeddingBatch& queries, int k) {
  if (references.empty()) throw EmptyError("knn: empty reference set");
  if (references.size() != labels.size()) throw ShapeError("knn: labels/references mismatch");
  if (k < 1 || static_cast<std::size_t>(k) > references.size())
    throw DomainError("knn: need 1 <= k <= reference count");

  std::vector<std::vector<double>> refs(references.size());
  for (std::size_t i = 0; i < references.size(); ++i) refs[i] = l2_normalize(references[i]);

  std::vector<int> out;
  out.reserve(queries.size());
  for (const auto& q_raw : queries) {
    const std::vector<double> q = l2_normalize(q_raw);
    std::vector<std::pair<double, std::size_t>> dist(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
      double sq = 0.0;
      for (std::size_t d = 0; d < q.size(); ++d) {
        const double diff = q[d] - refs[i][d];
        sq += diff * diff;
      }
      dist[i] = {sq, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

    std::map<int, int> votes;
    std::map<int, int> best_rank;  // class -> rank of its nearest member
    for (int r = 0; r < k; ++r) {
      const int label = labels[dist[static_cast<std::size_t>(r)].second];
      ++votes[label];
      if (!best_rank.count(label)) best_rank[label] = r;
    }
    int best_label = -1, best_votes = -1, best_label_rank = k;
    for (const auto& [label, v] : votes) {
      const int rank = best_rank[label];
      if (v > best_votes || (v == best_votes && rank < best_label_rank)) {
        best_label = label;
        best_votes = v;
        best_label_rank = rank;
      }
    }
    out.push_back(best_label);
  }
  return out;
}

ParamRefs MlpModel::param_refs() {
  return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
}

double mlp_loss_grad(MlpModel& model, const EmbeddingBatch& inputs, const std::vector<int>& labels,
                     GradSet* grads) {
  const std::size_t B = inputs.size();
  if (B == 0 || labels.size() != B) throw ShapeError("mlp: inputs/labels mismatch");
  const int in = model.in_dim, H = model.hidden, C = model.n_classes;

  if (grads) {
    (*grads)["w1"].assign(model.w1.size(), 0.0);
    (*grads)["b1"].assign(model.b1.size(), 0.0);
    (*grads)["w2"].assign(model.w2.size(), 0.0);
    (*grads)["b2"].assign(model.b2.size(), 0.0);
  }

  double loss = 0.0;
  std::vector<double> h(static_cast<std::size_t>(H)), logits(static_cast<std::size_t>(C));
  for (std::size_t b = 0; b < B; ++b) {
    const auto& x = inputs[b];
    if (static_cast<int>(x.size()) != in) throw ShapeError("mlp: input dim mismatch");
    for (int i = 0; i < H; ++i) {
      double acc = model.b1[static_cast<std::size_t>(i)];
      const double* w = model.w1.data() + static_cast<std::size_t>(i) * in;
      for (int d = 0; d < in; ++d) acc += w[d] * x[static_cast<std::size_t>(d)];
      h[static_cast<std::size_t>(i)] = std::max(acc, 0.0);
    }
    for (int c = 0; c < C; ++c) {
      double acc = model.b2[static_cast<std::size_t>(c)];
      const double* w = model.w2.data() + static_cast<std::size_t>(c) * H;
      for (int i = 0; i < H; ++i) acc += w[i] * h[static_cast<std::size_t>(i)];
      logits[static_cast<std::size_t>(c)] = acc;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    const int y = labels[b];
    if (y < 0 || y >= C) throw ShapeError("mlp: label out of range");
    loss += -(logits[static_cast<std::size_t>(y)] - mx) + std::log(denom);

    if (grads) {
      std::vector<double> dlogit(static_cast<std::size_t>(C));
      for (int c = 0; c < C; ++c)
        dlogit[static_cast<std::size_t>(c)] =
            (std::exp(logits[static_cast<std::size_t>(c)] - mx) / denom - (c == y ? 1.0 : 0.0)) /
            static_cast<double>(B);
      auto& dw2 = (*grads)["w2"];
      auto& db2 = (*grads)["b2"];
      std::vector<double> dh(static_cast<std::size_t>(H), 0.0);
      for (int c = 0; c < C; ++c) {
        db2[static_cast<std::size_t>(c)] += dlogit[static_cast<std::size_t>(c)];
        double* dw = dw2.data() + static_cast<std::size_t>(c) * H;
        const double* w = model.w2.data() + static_cast<std::size_t>(c) * H;
        for (int i = 0; i < H; ++i) {
          dw[i] += dlogit[static_cast<std::size_t>(c)] * h[static_cast<std::size_t>(i)];
          dh[static_cast<std::size_t>(i)] += dlogit[static_cast<std::size_t>(c)] * w[i];
        }
      }
      auto& dw1 = (*grads)["w1"];
      auto& db1 = (*grads)["b1"];
      for (int i = 0; i < H; ++i) {
        if (h[static_cast<std::size_t>(i)] <= 0.0) continue;  // ReLU gate
        db1[static_cast<std::size_t>(i)] += dh[static_cast<std::size_t>(i)];
        double* dw = dw1.data() + static_cast<std::size_t>(i) * in;
        for (int d = 0; d < in; ++d)
          dw[d] += dh[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(d)];
      }
    }
  }
  return loss / static_cast<double>(B);
}

MlpModel mlp_train(const EmbeddingBatch& embeddings, const std::vector<int>& labels,
                   const MlpConfig& cfg) {
  if (embeddings.empty() || embeddings.size() != labels.size())
    throw ShapeError("mlp_train: embeddings/labels mismatch");
  std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw DegenerateLabelsError("mlp_train: need at least two classes");
  const int n_classes = *classes.rbegin() + 1;
  const int in_dim = static_cast<int>(embeddings[0].size());

  MlpModel model;
  model.in_dim = in_dim;
  model.hidden = cfg.hidden;
  model.n_classes = n_classes;
  Rng rng(derive_seed(cfg.seed, 0x6d6c70));
  model.w1.resize(static_cast<std::size_t>(cfg.hidden) * in_dim);
  const double s1 = std::sqrt(2.0 / in_dim);
  for (double& w : model.w1) w = rng.gaussian() * s1;
  model.b1.assign(static_cast<std::size_t>(cfg.hidden), 0.0);
  model.w2.resize(static_cast<std::size_t>(n_classes) * cfg.hidden);
  const double s2 = std::sqrt(2.0 / cfg.hidden);
  for (double& w : model.w2) w = rng.gaussian() * s2;
  model.b2.assign(static_cast<std::size_t>(n_classes), 0.0);

  Adam adam({cfg.learning_rate});
  const ParamRefs refs = model.param_refs();
  for (int it = 0; it < cfg.iterations; ++it) {
    GradSet grads;
    mlp_loss_grad(model, embeddings, labels, &grads);
    clip_grad_norm(grads, 10.0);
    adam.step(refs, grads);
  }
  return model;
}

std::vector<int> mlp_predict(const MlpModel& model, const EmbeddingBatch& embeddings) {
  std::vector<int> out;
  out.reserve(embeddings.size());
  std::vector<double> h(static_cast<std::size_t>(model.hidden));
  for (const auto& x : embeddings) {
    if (static_cast<int>(x.size()) != model.in_dim) throw ShapeError("mlp: input dim mismatch");
    for (int i = 0; i < model.hidden; ++i) {
      double acc = model.b1[static_cast<std::size_t>(i)];
      const double* w = model.w1.data() + static_cast<std::size_t>(i) * model.in_dim;
      for (int d = 0; d < model.in_dim; ++d) acc += w[d] * x[static_cast<std::size_t>(d)];
      h[static_cast<std::size_t>(i)] = std::max(acc, 0.0);
    }
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < model.n_classes; ++c) {
      double acc = model.b2[static_cast<std::size_t>(c)];
      const double* w = model.w2.data() + static_cast<std::size_t>(c) * model.hidden;
      for (int i = 0; i < model.hidden; ++i) acc += w[i] * h[static_cast<std::size_t>(i)];
      if (acc > best_v) {
        best_v = acc;
        best = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

void write_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids,
                      const EmbeddingBatch& embeddings) {
  if (ids.size() != embeddings.size()) throw ShapeError("write_embeddings: ids/rows mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write embeddings: " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i];
    for (double v : embeddings[i]) out << "," << v;
    out << "\n";
  }
}

std::pair<std::vector<std::string>, EmbeddingBatch> read_embeddings(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open embeddings: " + path.string());
  std::vector<std::string> ids;
  EmbeddingBatch rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    ids.push_back(cell);
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return {std::move(ids), std::move(rows)};
}

}  // namespace ampforge
