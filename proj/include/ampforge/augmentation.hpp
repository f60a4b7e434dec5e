#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "ampforge/model_zoo.hpp"
#include "ampforge/signal_io.hpp"

namespace ampforge {

struct RenderedPair {
  AudioClip clean;
  AudioClip wet;
  int device_id = 0;
  ClipOrigin origin;
  std::uint64_t seed = 0;
};

// One clean clip sampled with `seed`, rendered through the device (with its
// conditioning value). Bit-reproducible from (corpus, registry, arguments).
RenderedPair render_pair(const CorpusIndex& corpus, const DeviceRegistry& registry,
                         int device_id, double duration_s, std::uint64_t seed);

struct ContrastiveView {
  AudioClip audio;  // processed (wet) clip, encoder input
  int device_id = 0;
  ClipOrigin origin;
};

// 2N views: views 2i and 2i+1 are a positive pair (same device, different
// source clips); devices are drawn without replacement.
struct ContrastiveBatch {
  std::vector<ContrastiveView> views;
  std::vector<int> pair_index;  // view -> partner view

  std::vector<int> device_ids() const {
    std::vector<int> ids;
    ids.reserve(views.size());
    for (const auto& v : views) ids.push_back(v.device_id);
    return ids;
  }
};

ContrastiveBatch make_contrastive_batch(const CorpusIndex& corpus, const DeviceRegistry& registry,
                                        int n_pairs, double duration_s, std::uint64_t seed);

struct ManifestRecord {
  std::string clip_path;    // relative to the dataset directory
  std::string source_path;  // relative to the corpus root
  std::uint64_t source_offset_samples = 0;
  std::uint64_t duration_samples = 0;
  int device_id = 0;
  std::string model_name;
  std::optional<float> conditioning_value;
  std::uint64_t seed = 0;

  std::string to_json_line() const;
  static ManifestRecord from_json_line(const std::string& line);
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path);

// Re-render the wet clip a manifest record describes (bit-exact).
AudioClip replay_record(const CorpusIndex& corpus, const DeviceRegistry& registry,
                        const ManifestRecord& rec);

// Renders clips_per_device clips per listed device into out_dir (float32 wav)
// and returns the manifest (also written to out_dir/manifest.jsonl).
// Reproducible from (seed, arguments); any I/O failure removes the partial
// output before rethrowing. `workers` only parallelizes rendering.
std::vector<ManifestRecord> make_supervised_dataset(
    const CorpusIndex& corpus, const DeviceRegistry& registry,
    const std::vector<int>& device_ids, int clips_per_device, double duration_s,
    const std::filesystem::path& out_dir, std::uint64_t seed, int workers = 1);

struct BatchSpec {
  enum class Kind { Supervised, Contrastive };
  Kind kind = Kind::Supervised;
  int size = 16;  // items for supervised, pairs for contrastive
  double duration_s = 1.0;
  std::vector<int> device_pool;  // supervised only; empty = whole registry
};

struct SupervisedBatch {
  std::vector<RenderedPair> items;
};

using Batch = std::variant<SupervisedBatch, ContrastiveBatch>;

// Batch k is a pure function of (spec, global_seed, k) regardless of worker
// count or completion order.
Batch make_batch(const CorpusIndex& corpus, const DeviceRegistry& registry, const BatchSpec& spec,
                 std::uint64_t global_seed, std::uint64_t index);

// Renders batches ahead of the consumer with a worker pool and hands them out
// in index order.
class BatchStream {
 public:
  BatchStream(const CorpusIndex& corpus, const DeviceRegistry& registry, BatchSpec spec,
              std::uint64_t global_seed, int workers = 1);
  ~BatchStream();

  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  Batch next();

 private:
  void worker_loop();

  const CorpusIndex& corpus_;
  const DeviceRegistry& registry_;
  BatchSpec spec_;
  std::uint64_t seed_;
  std::size_t lookahead_;

  std::mutex mutex_;
  std::condition_variable cv_;
  std::uint64_t next_to_claim_ = 0;
  std::uint64_t next_to_serve_ = 0;
  std::map<std::uint64_t, Batch> ready_;
  bool stop_ = false;
  std::string worker_error_;
  std::vector<std::thread> threads_;
};

}  // namespace ampforge
