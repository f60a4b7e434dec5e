#include "ampforge/augmentation.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "ampforge/errors.hpp"
#include "ampforge/lstm_runtime.hpp"
#include "ampforge/rng.hpp"

namespace ampforge {

using nlohmann::json;

RenderedPair render_pair(const CorpusIndex& corpus, const DeviceRegistry& registry, int device_id,
                         double duration_s, std::uint64_t seed) {
  const SyntheticDevice& dev = registry.device(device_id);
  Rng rng(seed);
  SampledClip sampled = sample_clip(corpus, duration_s, rng);
  RenderedPair pair;
  pair.wet = render(*dev.model, sampled.clip, dev.conditioning_value);
  pair.clean = std::move(sampled.clip);
  pair.device_id = device_id;
  pair.origin = sampled.origin;
  pair.seed = seed;
  return pair;
}

ContrastiveBatch make_contrastive_batch(const CorpusIndex& corpus, const DeviceRegistry& registry,
                                        int n_pairs, double duration_s, std::uint64_t seed) {
  if (n_pairs < 1) throw BatchSpecError("n_pairs must be >= 1");
  if (n_pairs > registry.size())
    throw BatchSpecError("n_pairs " + std::to_string(n_pairs) + " exceeds registry size " +
                         std::to_string(registry.size()));

  Rng dev_rng(derive_seed(seed, 0x646576));  // device draw stream
  std::vector<int> devices = sample_without_replacement(registry.size(), n_pairs, dev_rng);

  ContrastiveBatch batch;
  batch.views.reserve(static_cast<std::size_t>(2 * n_pairs));
  batch.pair_index.resize(static_cast<std::size_t>(2 * n_pairs));
  for (int p = 0; p < n_pairs; ++p) {
    const SyntheticDevice& dev = registry.device(devices[static_cast<std::size_t>(p)]);
    Rng a_rng(derive_seed(seed, static_cast<std::uint64_t>(p), 0));
    SampledClip a = sample_clip(corpus, duration_s, a_rng);

    SampledClip b;
    bool distinct = false;
    for (int attempt = 0; attempt < 100 && !distinct; ++attempt) {
      Rng b_rng(derive_seed(seed, static_cast<std::uint64_t>(p),
                            1 + static_cast<std::uint64_t>(attempt)));
      b = sample_clip(corpus, duration_s, b_rng);
      distinct = b.origin.source_path != a.origin.source_path ||
                 b.origin.offset_samples != a.origin.offset_samples;
    }
    if (!distinct)
      throw CorpusError("could not draw two distinct clips; corpus too small for contrastive pairs");

    ContrastiveView va{render(*dev.model, a.clip, dev.conditioning_value), dev.device_id, a.origin};
    ContrastiveView vb{render(*dev.model, b.clip, dev.conditioning_value), dev.device_id, b.origin};
    batch.views.push_back(std::move(va));
    batch.views.push_back(std::move(vb));
    batch.pair_index[static_cast<std::size_t>(2 * p)] = 2 * p + 1;
    batch.pair_index[static_cast<std::size_t>(2 * p + 1)] = 2 * p;
  }
  return batch;
}

std::string ManifestRecord::to_json_line() const {
  json j;
  j["clip_path"] = clip_path;
  j["source_path"] = source_path;
  j["source_offset_samples"] = source_offset_samples;
  j["duration_samples"] = duration_samples;
  j["device_id"] = device_id;
  j["model_name"] = model_name;
  if (conditioning_value)
    j["conditioning_value"] = *conditioning_value;
  else
    j["conditioning_value"] = nullptr;
  j["seed"] = seed;
  return j.dump();
}

ManifestRecord ManifestRecord::from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad manifest line: ") + e.what());
  }
  ManifestRecord r;
  r.clip_path = j.at("clip_path").get<std::string>();
  r.source_path = j.at("source_path").get<std::string>();
  r.source_offset_samples = j.at("source_offset_samples").get<std::uint64_t>();
  r.duration_samples = j.at("duration_samples").get<std::uint64_t>();
  r.device_id = j.at("device_id").get<int>();
  r.model_name = j.at("model_name").get<std::string>();
  if (!j.at("conditioning_value").is_null())
    r.conditioning_value = j.at("conditioning_value").get<float>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest: " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(ManifestRecord::from_json_line(line));
  }
  return records;
}

void write_manifest(const std::vector<ManifestRecord>& records,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest: " + path.string());
  for (const auto& r : records) out << r.to_json_line() << "\n";
  if (!out) throw Error("manifest write failed: " + path.string());
}

AudioClip replay_record(const CorpusIndex& corpus, const DeviceRegistry& registry,
                        const ManifestRecord& rec) {
  const SyntheticDevice& dev = registry.device(rec.device_id);
  if (dev.model->name != rec.model_name)
    throw ConfigError("manifest/registry mismatch for device " + std::to_string(rec.device_id) +
                      ": " + rec.model_name + " vs " + dev.model->name);
  AudioClip clean =
      corpus.load_slice(rec.source_path, rec.source_offset_samples, rec.duration_samples);
  return render(*dev.model, clean, dev.conditioning_value);
}

namespace {

// Renders tasks [0, n) with `render_fn` on `workers` threads, results kept by
// task index so output order never depends on scheduling.
template <typename T, typename Fn>
std::vector<T> ordered_parallel(std::size_t n, int workers, Fn render_fn) {
  std::vector<T> results(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) results[i] = render_fn(i);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::string error;
  auto run = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        results[i] = render_fn(i);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (error.empty()) error = e.what();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w) threads.emplace_back(run);
  for (auto& t : threads) t.join();
  if (!error.empty()) throw Error(error);
  return results;
}

}  // namespace

std::vector<ManifestRecord> make_supervised_dataset(
    const CorpusIndex& corpus, const DeviceRegistry& registry, const std::vector<int>& device_ids,
    int clips_per_device, double duration_s, const std::filesystem::path& out_dir,
    std::uint64_t seed, int workers) {
  if (device_ids.empty()) throw BatchSpecError("no devices selected");
  if (clips_per_device < 1) throw BatchSpecError("clips_per_device must be >= 1");
  for (int id : device_ids) registry.device(id);  // validate up front

  std::filesystem::create_directories(out_dir);
  const std::size_t n_tasks = device_ids.size() * static_cast<std::size_t>(clips_per_device);

  std::vector<std::filesystem::path> written;
  try {
    std::vector<RenderedPair> rendered = ordered_parallel<RenderedPair>(
        n_tasks, workers, [&](std::size_t task) {
          const int dev = device_ids[task / static_cast<std::size_t>(clips_per_device)];
          const std::uint64_t clip_idx = task % static_cast<std::size_t>(clips_per_device);
          const std::uint64_t clip_seed =
              derive_seed(seed, static_cast<std::uint64_t>(dev), clip_idx);
          return render_pair(corpus, registry, dev, duration_s, clip_seed);
        });

    std::vector<ManifestRecord> records;
    records.reserve(n_tasks);
    for (std::size_t task = 0; task < n_tasks; ++task) {
      const RenderedPair& pair = rendered[task];
      const std::uint64_t clip_idx = task % static_cast<std::size_t>(clips_per_device);
      char name[64];
      std::snprintf(name, sizeof(name), "device_%04d/clip_%05llu.wav", pair.device_id,
                    static_cast<unsigned long long>(clip_idx));
      const std::filesystem::path rel(name);
      std::filesystem::create_directories(out_dir / rel.parent_path());
      write_wav(pair.wet, out_dir / rel, WavEncoding::Float32);
      written.push_back(out_dir / rel);

      ManifestRecord rec;
      rec.clip_path = rel.generic_string();
      rec.source_path = pair.origin.source_path;
      rec.source_offset_samples = pair.origin.offset_samples;
      rec.duration_samples = pair.wet.samples.size();
      rec.device_id = pair.device_id;
      rec.model_name = registry.device(pair.device_id).model->name;
      rec.conditioning_value = registry.device(pair.device_id).conditioning_value;
      rec.seed = pair.seed;
      records.push_back(std::move(rec));
    }
    write_manifest(records, out_dir / "manifest.jsonl");
    return records;
  } catch (...) {
    // partial output is useless: remove what this call created
    std::error_code ec;
    for (const auto& p : written) std::filesystem::remove(p, ec);
    std::filesystem::remove(out_dir / "manifest.jsonl", ec);
    throw;
  }
}

Batch make_batch(const CorpusIndex& corpus, const DeviceRegistry& registry, const BatchSpec& spec,
                 std::uint64_t global_seed, std::uint64_t index) {
  const std::uint64_t batch_seed = derive_seed(global_seed, index);
  if (spec.kind == BatchSpec::Kind::Contrastive)
    return make_contrastive_batch(corpus, registry, spec.size, spec.duration_s, batch_seed);

  std::vector<int> pool = spec.device_pool;
  if (pool.empty()) {
    pool.resize(static_cast<std::size_t>(registry.size()));
    for (int i = 0; i < registry.size(); ++i) pool[static_cast<std::size_t>(i)] = i;
  }
  SupervisedBatch batch;
  batch.items.reserve(static_cast<std::size_t>(spec.size));
  Rng dev_rng(derive_seed(batch_seed, 0x646576));
  for (int i = 0; i < spec.size; ++i) {
    const int dev = pool[dev_rng.below(pool.size())];
    const std::uint64_t item_seed = derive_seed(batch_seed, 1 + static_cast<std::uint64_t>(i));
    batch.items.push_back(render_pair(corpus, registry, dev, spec.duration_s, item_seed));
  }
  return batch;
}

BatchStream::BatchStream(const CorpusIndex& corpus, const DeviceRegistry& registry, BatchSpec spec,
                         std::uint64_t global_seed, int workers)
    : corpus_(corpus), registry_(registry), spec_(std::move(spec)), seed_(global_seed),
      lookahead_(static_cast<std::size_t>(std::max(2 * workers, 4))) {
  if (workers < 1) workers = 1;
  for (int w = 0; w < workers; ++w) threads_.emplace_back([this] { worker_loop(); });
}

BatchStream::~BatchStream() {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void BatchStream::worker_loop() {
  for (;;) {
    std::uint64_t index;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_.wait(lock, [this] {
        return stop_ || next_to_claim_ < next_to_serve_ + lookahead_;
      });
      if (stop_) return;
      index = next_to_claim_++;
    }
    try {
      Batch batch = make_batch(corpus_, registry_, spec_, seed_, index);
      std::lock_guard<std::mutex> lock(mutex_);
      ready_.emplace(index, std::move(batch));
      cv_.notify_all();
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(mutex_);
      if (worker_error_.empty()) worker_error_ = e.what();
      stop_ = true;
      cv_.notify_all();
      return;
    }
  }
}

Batch BatchStream::next() {
  std::unique_lock<std::mutex> lock(mutex_);
  cv_.wait(lock, [this] {
    return !worker_error_.empty() || ready_.count(next_to_serve_) != 0;
  });
  if (!worker_error_.empty()) throw Error("batch worker failed: " + worker_error_);
  auto it = ready_.find(next_to_serve_);
  Batch batch = std::move(it->second);
  ready_.erase(it);
  ++next_to_serve_;
  cv_.notify_all();
  return batch;
}

}  // namespace ampforge
