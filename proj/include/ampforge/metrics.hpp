#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ampforge {

struct StftConfig {
  int fft_size = 1024;
  int hop = 256;  // window is a periodic Hann of length fft_size
};

// fft sizes {512, 1024, 2048} with hop = fft/4
std::vector<StftConfig> default_mrsl_resolutions();

// magnitude floor shared by the MRSL log term and its gradient
inline constexpr double kMrslLogFloor = 1e-12;

std::vector<double> hann_window(int n);  // periodic Hann

// y[n] = x[n] - a*x[n-1], x[-1] = 0
std::vector<double> apply_pre_emphasis(std::span<const double> x, double a);

// Sum (t - p)^2 / sum t^2, after optional first-order pre-emphasis
// y[n] - a*y[n-1] applied to both signals.
double esr(std::span<const double> target, std::span<const double> pred,
           std::optional<double> pre_emphasis = std::nullopt);

struct Spectrogram {
  int n_frames = 0;
  int n_bins = 0;  // fft_size/2 + 1
  std::vector<double> mag;  // frames x bins row-major

  double at(int frame, int bin) const { return mag[static_cast<std::size_t>(frame) * n_bins + bin]; }
};

Spectrogram stft_mag(std::span<const double> signal, const StftConfig& cfg);

// Mean over resolutions of spectral convergence + L1 log-magnitude distance.
double mrsl(std::span<const double> target, std::span<const double> pred,
            const std::vector<StftConfig>& resolutions = default_mrsl_resolutions());

double to_db(double x);    // 10*log10(x), x > 0
double from_db(double db);

double combined_loss(std::span<const double> target, std::span<const double> pred,
                     const std::vector<StftConfig>& resolutions = default_mrsl_resolutions());

// float convenience overloads (audio clips are float32)
std::vector<double> widen(std::span<const float> x);
double esr(std::span<const float> target, std::span<const float> pred,
           std::optional<double> pre_emphasis = std::nullopt);
double combined_loss(std::span<const float> target, std::span<const float> pred,
                     const std::vector<StftConfig>& resolutions = default_mrsl_resolutions());

struct DeviceLoss {
  int device_id = 0;
  double esr = 0.0;
  double mrsl = 0.0;
  double combined() const { return esr + mrsl; }
};

// best, 25th percentile, median, 75th percentile, worst by combined loss,
// nearest-rank percentiles over the ascending sort.
struct DeviceReport {
  DeviceLoss best, p25, median, p75, worst;
};

DeviceReport device_report(const std::vector<DeviceLoss>& per_device);

// Structured-text export: one JSON row per device (device_id, esr_db, mrsl_db).
std::string export_device_losses(const std::vector<DeviceLoss>& per_device);

struct LossReport {
  double esr = 0.0;
  double mrsl = 0.0;
  double esr_db = 0.0;
  double mrsl_db = 0.0;
  std::map<int, DeviceLoss> per_device;
};

}  // namespace ampforge
