#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "ampforge/rng.hpp"

namespace ampforge {

struct AudioClip {
  std::vector<float> samples;  // mono
  int sample_rate = 0;

  std::size_t size() const { return samples.size(); }
  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

enum class WavEncoding { Pcm16, Pcm24, Float32 };

WavEncoding wav_encoding_from_string(const std::string& name);
std::string to_string(WavEncoding enc);

AudioClip read_wav(const std::filesystem::path& path);

// Returns the number of samples hard-clipped by an integer encoding (0 for float32).
std::size_t write_wav(const AudioClip& clip, const std::filesystem::path& path,
                      WavEncoding encoding = WavEncoding::Float32);

// Where a sampled clip came from; enough to re-render it bit-exactly.
struct ClipOrigin {
  std::string source_path;  // relative to the corpus root
  std::uint64_t offset_samples = 0;
};

struct SampledClip {
  AudioClip clip;
  ClipOrigin origin;
};

// Read-only index over a directory of mono-compatible WAV files with a single
// sample rate. File audio is cached in memory on first use; safe for
// concurrent reads.
class CorpusIndex {
 public:
  struct Entry {
    std::string rel_path;
    std::uint64_t n_samples = 0;
  };

  explicit CorpusIndex(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  int sample_rate() const { return sample_rate_; }
  std::size_t file_count() const { return entries_.size(); }
  std::uint64_t total_samples() const { return total_samples_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Slice [offset, offset+count) of one corpus file.
  AudioClip load_slice(const std::string& rel_path, std::uint64_t offset,
                       std::uint64_t count) const;

 private:
  const std::vector<float>& cached(const std::string& rel_path) const;

  std::filesystem::path root_;
  int sample_rate_ = 0;
  std::uint64_t total_samples_ = 0;
  std::vector<Entry> entries_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::shared_ptr<std::vector<float>>> cache_;
};

// Uniformly random clip over the corpus timeline: files are weighted by their
// number of eligible offsets, the offset is uniform within the file.
SampledClip sample_clip(const CorpusIndex& corpus, double duration_s, Rng& rng);

}  // namespace ampforge
