#include "ampforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "ampforge/errors.hpp"
#include "fft.hpp"

namespace ampforge {

namespace {
constexpr double kLogFloor = kMrslLogFloor;
}

std::vector<StftConfig> default_mrsl_resolutions() {
  return {{512, 128}, {1024, 256}, {2048, 512}};
}

std::vector<double> apply_pre_emphasis(std::span<const double> x, double a) {
  std::vector<double> y(x.size());
  double prev = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    y[n] = x[n] - a * prev;
    prev = x[n];
  }
  return y;
}

double esr(std::span<const double> target, std::span<const double> pred,
           std::optional<double> pre_emphasis) {
  if (target.size() != pred.size())
    throw ShapeError("esr: length mismatch (" + std::to_string(target.size()) + " vs " +
                     std::to_string(pred.size()) + ")");
  if (target.empty()) throw ShapeError("esr: empty signals");

  std::vector<double> tf, pf;
  if (pre_emphasis) {
    tf = apply_pre_emphasis(target, *pre_emphasis);
    pf = apply_pre_emphasis(pred, *pre_emphasis);
    target = tf;
    pred = pf;
  }
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < target.size(); ++n) {
    const double d = target[n] - pred[n];
    num += d * d;
    den += target[n] * target[n];
  }
  if (den == 0.0) throw DegenerateTargetError("esr: target has zero energy");
  return num / den;
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
  return w;
}

Spectrogram stft_mag(std::span<const double> signal, const StftConfig& cfg) {
  if (cfg.fft_size <= 0 || !detail::is_power_of_two(static_cast<std::size_t>(cfg.fft_size)))
    throw ShapeError("stft: fft_size must be a power of two");
  if (cfg.hop <= 0 || cfg.hop > cfg.fft_size) throw ShapeError("stft: need 0 < hop <= fft_size");
  if (signal.size() < static_cast<std::size_t>(cfg.fft_size))
    throw ShapeError("stft: signal shorter than fft_size (" + std::to_string(signal.size()) +
                     " < " + std::to_string(cfg.fft_size) + ")");

  const int n = cfg.fft_size;
  const int n_bins = n / 2 + 1;
  const int n_frames = static_cast<int>((signal.size() - static_cast<std::size_t>(n)) /
                                        static_cast<std::size_t>(cfg.hop)) + 1;
  const std::vector<double> window = hann_window(n);

  Spectrogram out;
  out.n_frames = n_frames;
  out.n_bins = n_bins;
  out.mag.resize(static_cast<std::size_t>(n_frames) * n_bins);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n));
  for (int f = 0; f < n_frames; ++f) {
    const std::size_t off = static_cast<std::size_t>(f) * cfg.hop;
    for (int i = 0; i < n; ++i)
      buf[static_cast<std::size_t>(i)] = signal[off + i] * window[static_cast<std::size_t>(i)];
    detail::fft_inplace(buf, -1);
    for (int k = 0; k < n_bins; ++k)
      out.mag[static_cast<std::size_t>(f) * n_bins + k] = std::abs(buf[static_cast<std::size_t>(k)]);
  }
  return out;
}

namespace {

double mrsl_one(const Spectrogram& st, const Spectrogram& sp) {
  double diff2 = 0.0, ref2 = 0.0, l1 = 0.0;
  const std::size_t n = st.mag.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = st.mag[i] - sp.mag[i];
    diff2 += d * d;
    ref2 += st.mag[i] * st.mag[i];
    l1 += std::abs(std::log(std::max(st.mag[i], kLogFloor)) -
                   std::log(std::max(sp.mag[i], kLogFloor)));
  }
  const double sc = std::sqrt(diff2) / std::max(std::sqrt(ref2), kLogFloor);
  return sc + l1 / static_cast<double>(n);
}

}  // namespace

double mrsl(std::span<const double> target, std::span<const double> pred,
            const std::vector<StftConfig>& resolutions) {
  if (target.size() != pred.size()) throw ShapeError("mrsl: length mismatch");
  if (resolutions.empty()) throw ShapeError("mrsl: no resolutions");
  double acc = 0.0;
  for (const auto& cfg : resolutions)
    acc += mrsl_one(stft_mag(target, cfg), stft_mag(pred, cfg));
  return acc / static_cast<double>(resolutions.size());
}

double to_db(double x) {
  if (!(x > 0.0)) throw DomainError("to_db: need x > 0, got " + std::to_string(x));
  return 10.0 * std::log10(x);
}

double from_db(double db) { return std::pow(10.0, db / 10.0); }

double combined_loss(std::span<const double> target, std::span<const double> pred,
                     const std::vector<StftConfig>& resolutions) {
  return esr(target, pred) + mrsl(target, pred, resolutions);
}

std::vector<double> widen(std::span<const float> x) {
  return std::vector<double>(x.begin(), x.end());
}

double esr(std::span<const float> target, std::span<const float> pred,
           std::optional<double> pre_emphasis) {
  return esr(std::span<const double>(widen(target)), std::span<const double>(widen(pred)),
             pre_emphasis);
}

double combined_loss(std::span<const float> target, std::span<const float> pred,
                     const std::vector<StftConfig>& resolutions) {
  return combined_loss(std::span<const double>(widen(target)),
                       std::span<const double>(widen(pred)), resolutions);
}

DeviceReport device_report(const std::vector<DeviceLoss>& per_device) {
  if (per_device.empty()) throw EmptyError("device_report: no devices");
  std::vector<DeviceLoss> sorted = per_device;
  std::sort(sorted.begin(), sorted.end(), [](const DeviceLoss& a, const DeviceLoss& b) {
    if (a.combined() != b.combined()) return a.combined() < b.combined();
    return a.device_id < b.device_id;
  });
  const int n = static_cast<int>(sorted.size());
  auto nearest_rank = [&](double q) {
    int rank = static_cast<int>(std::ceil(q * n));  // 1-indexed
    rank = std::clamp(rank, 1, n);
    return sorted[static_cast<std::size_t>(rank - 1)];
  };
  DeviceReport r;
  r.best = sorted.front();
  r.p25 = nearest_rank(0.25);
  r.median = nearest_rank(0.5);
  r.p75 = nearest_rank(0.75);
  r.worst = sorted.back();
  return r;
}

std::string export_device_losses(const std::vector<DeviceLoss>& per_device) {
  std::string out;
  for (const auto& d : per_device) {
    nlohmann::json j;
    j["device_id"] = d.device_id;
    j["esr_db"] = to_db(std::max(d.esr, 1e-300));
    j["mrsl_db"] = to_db(std::max(d.mrsl, 1e-300));
    out += j.dump();
    out += "\n";
  }
  return out;
}

}  // namespace ampforge
