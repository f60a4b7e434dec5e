#include "ampforge/tcn_film.hpp"

#include <cmath>

#include "ampforge/errors.hpp"
#include "ampforge/rng.hpp"

namespace ampforge {

long receptive_field(const TcnConfig& cfg) {
  long per_layer_sum = 0;
  long d = 1;
  for (int l = 0; l < cfg.layers_per_block; ++l) {
    per_layer_sum += d;
    d *= cfg.dilation_growth;
  }
  return 1 + static_cast<long>(cfg.n_blocks) * (cfg.kernel - 1) * per_layer_sum;
}

std::vector<double> film_apply(std::span<const double> features, int channels, int time,
                               std::span<const double> gamma, std::span<const double> beta) {
  if (features.size() != static_cast<std::size_t>(channels) * time ||
      gamma.size() != static_cast<std::size_t>(channels) ||
      beta.size() != static_cast<std::size_t>(channels))
    throw ShapeError("film_apply: shape mismatch");
  std::vector<double> out(features.size());
  for (int c = 0; c < channels; ++c) {
    const double g = gamma[static_cast<std::size_t>(c)];
    const double b = beta[static_cast<std::size_t>(c)];
    const std::size_t base = static_cast<std::size_t>(c) * time;
    for (int t = 0; t < time; ++t) out[base + t] = g * features[base + t] + b;
  }
  return out;
}

TcnModel::TcnModel(const TcnConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.n_blocks < 1 || cfg.layers_per_block < 1 || cfg.channels < 1 || cfg.kernel < 1 ||
      cfg.dilation_growth < 1 || cfg.embed_dim < 1 || cfg.n_devices < 1)
    throw ValueError("TcnConfig fields must all be positive");

  Rng rng(derive_seed(seed, 0x74636e));
  const int C = cfg.channels;
  const int K = cfg.kernel;
  const int E = cfg.embed_dim;

  layers_.resize(static_cast<std::size_t>(cfg.n_layers()));
  for (int l = 0; l < cfg.n_layers(); ++l) {
    TcnLayer& layer = layers_[static_cast<std::size_t>(l)];
    layer.c_in = l == 0 ? 1 : C;
    layer.c_out = C;
    layer.dilation = cfg.dilation_of(l);
    const double conv_std = std::sqrt(2.0 / (layer.c_in * K));
    layer.conv_w.resize(static_cast<std::size_t>(C) * layer.c_in * K);
    for (double& w : layer.conv_w) w = rng.gaussian() * conv_std;
    layer.conv_b.assign(static_cast<std::size_t>(C), 0.0);
    const double film_std = 1.0 / std::sqrt(static_cast<double>(E));
    layer.film_w.resize(static_cast<std::size_t>(2 * C) * E);
    for (double& w : layer.film_w) w = rng.gaussian() * film_std;
    layer.film_b.assign(static_cast<std::size_t>(2 * C), 0.0);
    for (int c = 0; c < C; ++c) layer.film_b[static_cast<std::size_t>(c)] = 1.0;  // identity gamma
    const double res_std = 1.0 / std::sqrt(static_cast<double>(layer.c_in));
    layer.res_w.resize(static_cast<std::size_t>(C) * layer.c_in);
    for (double& w : layer.res_w) w = rng.gaussian() * res_std;
    layer.alpha.assign(static_cast<std::size_t>(C), 0.25);
  }
  head_w_.resize(static_cast<std::size_t>(C));
  const double head_std = 1.0 / std::sqrt(static_cast<double>(C));
  for (double& w : head_w_) w = rng.gaussian() * head_std;
  head_b_.assign(1, 0.0);
  embedding_.resize(static_cast<std::size_t>(cfg.n_devices) * E);
  for (double& v : embedding_) v = rng.gaussian() * 0.1;
}

std::vector<double> TcnModel::embedding_lookup(int device_index) const {
  if (device_index < 0 || device_index >= cfg_.n_devices)
    throw DeviceIndexError("device index " + std::to_string(device_index) + " out of range [0, " +
                           std::to_string(cfg_.n_devices) + ")");
  const int E = cfg_.embed_dim;
  const std::size_t base = static_cast<std::size_t>(device_index) * E;
  return std::vector<double>(embedding_.begin() + static_cast<std::ptrdiff_t>(base),
                             embedding_.begin() + static_cast<std::ptrdiff_t>(base + E));
}

std::vector<double> TcnModel::forward(std::span<const double> audio, int device_index,
                                      TcnCache* cache) const {
  std::vector<double> emb = embedding_lookup(device_index);
  std::vector<double> out = forward_embedding(audio, emb, cache);
  if (cache) cache->device_index = device_index;
  return out;
}

std::vector<double> TcnModel::forward_embedding(std::span<const double> audio,
                                                std::span<const double> embedding,
                                                TcnCache* cache) const {
  if (audio.empty()) throw ShapeError("tcn forward: empty input");
  if (embedding.size() != static_cast<std::size_t>(cfg_.embed_dim))
    throw ShapeError("tcn forward: embedding size mismatch");
  const int T = static_cast<int>(audio.size());
  const int C = cfg_.channels;
  const int K = cfg_.kernel;
  const int E = cfg_.embed_dim;

  if (cache) {
    cache->valid = true;
    cache->T = T;
    cache->device_index = -1;
    cache->embedding.assign(embedding.begin(), embedding.end());
    cache->layers.assign(static_cast<std::size_t>(cfg_.n_layers()), {});
  }

  std::vector<double> x(audio.begin(), audio.end());  // [c_in x T], c_in = 1 initially
  for (int l = 0; l < cfg_.n_layers(); ++l) {
    const TcnLayer& layer = layers_[static_cast<std::size_t>(l)];
    const int c_in = layer.c_in;
    const int d = layer.dilation;

    // causal dilated conv, taps at offsets -(K-1)d .. 0, zeros left of t=0
    std::vector<double> z(static_cast<std::size_t>(C) * T);
    for (int c = 0; c < C; ++c) {
      double* zrow = z.data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) zrow[t] = layer.conv_b[static_cast<std::size_t>(c)];
      for (int ci = 0; ci < c_in; ++ci) {
        const double* xrow = x.data() + static_cast<std::size_t>(ci) * T;
        const double* w = layer.conv_w.data() + (static_cast<std::size_t>(c) * c_in + ci) * K;
        for (int k = 0; k < K; ++k) {
          const int off = (K - 1 - k) * d;
          const double wk = w[k];
          for (int t = off; t < T; ++t) zrow[t] += wk * xrow[t - off];
        }
      }
    }

    // FiLM parameters from the device embedding through this layer's adaptor
    std::vector<double> gamma(static_cast<std::size_t>(C)), beta(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      double g = layer.film_b[static_cast<std::size_t>(c)];
      double b = layer.film_b[static_cast<std::size_t>(C + c)];
      const double* wg = layer.film_w.data() + static_cast<std::size_t>(c) * E;
      const double* wb = layer.film_w.data() + static_cast<std::size_t>(C + c) * E;
      for (int e = 0; e < E; ++e) {
        g += wg[e] * embedding[static_cast<std::size_t>(e)];
        b += wb[e] * embedding[static_cast<std::size_t>(e)];
      }
      gamma[static_cast<std::size_t>(c)] = g;
      beta[static_cast<std::size_t>(c)] = b;
    }

    std::vector<double> f = film_apply(z, C, T, gamma, beta);

    // parametric rectifier, then the 1x1-projected residual
    std::vector<double> y(static_cast<std::size_t>(C) * T);
    for (int c = 0; c < C; ++c) {
      const double a = layer.alpha[static_cast<std::size_t>(c)];
      const double* frow = f.data() + static_cast<std::size_t>(c) * T;
      double* yrow = y.data() + static_cast<std::size_t>(c) * T;
      for (int t = 0; t < T; ++t) yrow[t] = frow[t] > 0.0 ? frow[t] : a * frow[t];
      const double* rw = layer.res_w.data() + static_cast<std::size_t>(c) * c_in;
      for (int ci = 0; ci < c_in; ++ci) {
        const double w = rw[ci];
        const double* xrow = x.data() + static_cast<std::size_t>(ci) * T;
        for (int t = 0; t < T; ++t) yrow[t] += w * xrow[t];
      }
    }

    if (cache) {
      auto& lc = cache->layers[static_cast<std::size_t>(l)];
      lc.x = x;
      lc.z = std::move(z);
      lc.f = std::move(f);
      lc.gamma = std::move(gamma);
      lc.beta = std::move(beta);
    }
    x = std::move(y);
  }

  if (cache) cache->last = x;

  std::vector<double> out(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    double acc = head_b_[0];
    for (int c = 0; c < C; ++c) acc += head_w_[static_cast<std::size_t>(c)] * x[static_cast<std::size_t>(c) * T + t];
    out[static_cast<std::size_t>(t)] = acc;
  }
  return out;
}

GradSet TcnModel::backward(const TcnCache& cache, std::span<const double> upstream,
                           std::vector<double>* input_grad) const {
  if (!cache.valid) throw CacheError("tcn backward: cache is not from a train-mode forward");
  if (upstream.size() != static_cast<std::size_t>(cache.T))
    throw ShapeError("tcn backward: upstream length mismatch");
  const int T = cache.T;
  const int C = cfg_.channels;
  const int K = cfg_.kernel;
  const int E = cfg_.embed_dim;

  GradSet grads;
  auto key = [](int l, const char* part) {
    return "layer" + std::to_string(l) + "." + part;
  };

  // head
  std::vector<double>& d_head_w = grads["head.weight"];
  d_head_w.assign(static_cast<std::size_t>(C), 0.0);
  std::vector<double>& d_head_b = grads["head.bias"];
  d_head_b.assign(1, 0.0);
  std::vector<double> dy(static_cast<std::size_t>(C) * T, 0.0);
  for (int t = 0; t < T; ++t) {
    const double u = upstream[static_cast<std::size_t>(t)];
    d_head_b[0] += u;
    for (int c = 0; c < C; ++c) {
      d_head_w[static_cast<std::size_t>(c)] += u * cache.last[static_cast<std::size_t>(c) * T + t];
      dy[static_cast<std::size_t>(c) * T + t] = head_w_[static_cast<std::size_t>(c)] * u;
    }
  }

  std::vector<double> d_emb(static_cast<std::size_t>(E), 0.0);

  for (int l = cfg_.n_layers() - 1; l >= 0; --l) {
    const TcnLayer& layer = layers_[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const int c_in = layer.c_in;
    const int d = layer.dilation;

    std::vector<double>& d_conv_w = grads[key(l, "conv.weight")];
    d_conv_w.assign(layer.conv_w.size(), 0.0);
    std::vector<double>& d_conv_b = grads[key(l, "conv.bias")];
    d_conv_b.assign(layer.conv_b.size(), 0.0);
    std::vector<double>& d_film_w = grads[key(l, "film.weight")];
    d_film_w.assign(layer.film_w.size(), 0.0);
    std::vector<double>& d_film_b = grads[key(l, "film.bias")];
    d_film_b.assign(layer.film_b.size(), 0.0);
    std::vector<double>& d_res_w = grads[key(l, "res.weight")];
    d_res_w.assign(layer.res_w.size(), 0.0);
    std::vector<double>& d_alpha = grads[key(l, "act.alpha")];
    d_alpha.assign(layer.alpha.size(), 0.0);

    std::vector<double> dx(static_cast<std::size_t>(c_in) * T, 0.0);

    for (int c = 0; c < C; ++c) {
      const double* dyrow = dy.data() + static_cast<std::size_t>(c) * T;
      // residual branch
      const double* rw = layer.res_w.data() + static_cast<std::size_t>(c) * c_in;
      double* drw = d_res_w.data() + static_cast<std::size_t>(c) * c_in;
      for (int ci = 0; ci < c_in; ++ci) {
        const double* xrow = lc.x.data() + static_cast<std::size_t>(ci) * T;
        double* dxrow = dx.data() + static_cast<std::size_t>(ci) * T;
        const double w = rw[ci];
        double acc = 0.0;
        for (int t = 0; t < T; ++t) {
          acc += dyrow[t] * xrow[t];
          dxrow[t] += w * dyrow[t];
        }
        drw[ci] += acc;
      }
    }

    // activation + FiLM
    std::vector<double> dz(static_cast<std::size_t>(C) * T);
    for (int c = 0; c < C; ++c) {
      const double a = layer.alpha[static_cast<std::size_t>(c)];
      const double g = lc.gamma[static_cast<std::size_t>(c)];
      const double* dyrow = dy.data() + static_cast<std::size_t>(c) * T;
      const double* frow = lc.f.data() + static_cast<std::size_t>(c) * T;
      const double* zrow = lc.z.data() + static_cast<std::size_t>(c) * T;
      double* dzrow = dz.data() + static_cast<std::size_t>(c) * T;
      double dgamma = 0.0, dbeta = 0.0, dalpha = 0.0;
      for (int t = 0; t < T; ++t) {
        double df;
        if (frow[t] > 0.0) {
          df = dyrow[t];
        } else {
          df = dyrow[t] * a;
          dalpha += dyrow[t] * frow[t];
        }
        dgamma += df * zrow[t];
        dbeta += df;
        dzrow[t] = df * g;
      }
      d_alpha[static_cast<std::size_t>(c)] += dalpha;
      // adaptor: (gamma, beta) = film_w * emb + film_b
      d_film_b[static_cast<std::size_t>(c)] += dgamma;
      d_film_b[static_cast<std::size_t>(C + c)] += dbeta;
      const double* wg = layer.film_w.data() + static_cast<std::size_t>(c) * E;
      const double* wb = layer.film_w.data() + static_cast<std::size_t>(C + c) * E;
      double* dwg = d_film_w.data() + static_cast<std::size_t>(c) * E;
      double* dwb = d_film_w.data() + static_cast<std::size_t>(C + c) * E;
      for (int e = 0; e < E; ++e) {
        dwg[e] += dgamma * cache.embedding[static_cast<std::size_t>(e)];
        dwb[e] += dbeta * cache.embedding[static_cast<std::size_t>(e)];
        d_emb[static_cast<std::size_t>(e)] += wg[e] * dgamma + wb[e] * dbeta;
      }
    }

    // conv
    for (int c = 0; c < C; ++c) {
      const double* dzrow = dz.data() + static_cast<std::size_t>(c) * T;
      double bacc = 0.0;
      for (int t = 0; t < T; ++t) bacc += dzrow[t];
      d_conv_b[static_cast<std::size_t>(c)] += bacc;
      for (int ci = 0; ci < c_in; ++ci) {
        const double* xrow = lc.x.data() + static_cast<std::size_t>(ci) * T;
        double* dxrow = dx.data() + static_cast<std::size_t>(ci) * T;
        const double* w = layer.conv_w.data() + (static_cast<std::size_t>(c) * c_in + ci) * K;
        double* dw = d_conv_w.data() + (static_cast<std::size_t>(c) * c_in + ci) * K;
        for (int k = 0; k < K; ++k) {
          const int off = (K - 1 - k) * d;
          double wacc = 0.0;
          const double wk = w[k];
          for (int t = off; t < T; ++t) {
            wacc += dzrow[t] * xrow[t - off];
            dxrow[t - off] += wk * dzrow[t];
          }
          dw[k] += wacc;
        }
      }
    }

    dy = std::move(dx);
  }

  if (input_grad) *input_grad = dy;

  if (cache.device_index >= 0) {
    std::vector<double>& d_table = grads["embedding.table"];
    d_table.assign(embedding_.size(), 0.0);
    const std::size_t base = static_cast<std::size_t>(cache.device_index) * E;
    for (int e = 0; e < E; ++e) d_table[base + e] = d_emb[static_cast<std::size_t>(e)];
  } else {
    grads["embedding.input"] = std::move(d_emb);
  }
  return grads;
}

ParamRefs TcnModel::param_refs() {
  ParamRefs refs;
  for (int l = 0; l < cfg_.n_layers(); ++l) {
    TcnLayer& layer = layers_[static_cast<std::size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    refs.push_back({p + "conv.weight", &layer.conv_w});
    refs.push_back({p + "conv.bias", &layer.conv_b});
    refs.push_back({p + "film.weight", &layer.film_w});
    refs.push_back({p + "film.bias", &layer.film_b});
    refs.push_back({p + "res.weight", &layer.res_w});
    refs.push_back({p + "act.alpha", &layer.alpha});
  }
  refs.push_back({"head.weight", &head_w_});
  refs.push_back({"head.bias", &head_b_});
  refs.push_back({"embedding.table", &embedding_});
  return refs;
}

long TcnModel::param_count() const {
  long n = 0;
  for (const auto& layer : layers_)
    n += static_cast<long>(layer.conv_w.size() + layer.conv_b.size() + layer.film_w.size() +
                           layer.film_b.size() + layer.res_w.size() + layer.alpha.size());
  n += static_cast<long>(head_w_.size() + head_b_.size() + embedding_.size());
  return n;
}

TcnStream::TcnStream(const TcnModel& model, int device_index)
    : TcnStream(model, model.embedding_lookup(device_index)) {}

TcnStream::TcnStream(const TcnModel& model, std::vector<double> embedding)
    : model_(model), embedding_(std::move(embedding)) {
  history_.assign(static_cast<std::size_t>(receptive_field(model_.config()) - 1), 0.0);
}

std::vector<double> TcnStream::process(std::span<const double> block) {
  if (block.empty()) return {};
  std::vector<double> buf;
  buf.reserve(history_.size() + block.size());
  buf.insert(buf.end(), history_.begin(), history_.end());
  buf.insert(buf.end(), block.begin(), block.end());

  std::vector<double> full = model_.forward_embedding(buf, embedding_);
  std::vector<double> out(full.end() - static_cast<std::ptrdiff_t>(block.size()), full.end());

  if (history_.size() > 0) {
    if (buf.size() >= history_.size())
      history_.assign(buf.end() - static_cast<std::ptrdiff_t>(history_.size()), buf.end());
  }
  return out;
}

}  // namespace ampforge
