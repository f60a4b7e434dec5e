#include "ampforge/signal_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ampforge/errors.hpp"

namespace ampforge {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | p[1] << 8);
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
  out.push_back(char((v >> 16) & 0xFF));
  out.push_back(char((v >> 24) & 0xFF));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
}

float f32_from_le(const unsigned char* p) {
  std::uint32_t bits = read_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

}  // namespace

WavEncoding wav_encoding_from_string(const std::string& name) {
  if (name == "pcm16") return WavEncoding::Pcm16;
  if (name == "pcm24") return WavEncoding::Pcm24;
  if (name == "float32") return WavEncoding::Float32;
  throw FormatError("unknown wav encoding: " + name);
}

std::string to_string(WavEncoding enc) {
  switch (enc) {
    case WavEncoding::Pcm16: return "pcm16";
    case WavEncoding::Pcm24: return "pcm24";
    case WavEncoding::Float32: return "float32";
  }
  return "?";
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open wav file: " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  const std::size_t n = data.size();

  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw ParseError("not a RIFF/WAVE file: " + path.string());

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* payload = nullptr;
  std::uint32_t payload_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const unsigned char* chunk = p + pos;
    std::uint32_t chunk_len = read_u32(chunk + 4);
    std::size_t body = pos + 8;
    if (body + chunk_len > n) throw ParseError("truncated chunk in: " + path.string());
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw ParseError("short fmt chunk");
      format = read_u16(p + body);
      channels = read_u16(p + body + 2);
      rate = read_u32(p + body + 4);
      bits = read_u16(p + body + 14);
      if (format == kFormatExtensible) {
        if (chunk_len < 40) throw ParseError("short extensible fmt chunk");
        format = read_u16(p + body + 24);  // first 2 bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      payload = p + body;
      payload_len = chunk_len;
    }
    pos = body + chunk_len + (chunk_len & 1);  // chunks are word aligned
  }

  if (!have_fmt || payload == nullptr) throw ParseError("missing fmt/data chunk: " + path.string());
  if (channels == 0 || rate == 0) throw FormatError("bad fmt fields in: " + path.string());

  std::size_t bytes_per_sample;
  if (format == kFormatPcm && bits == 16) bytes_per_sample = 2;
  else if (format == kFormatPcm && bits == 24) bytes_per_sample = 3;
  else if (format == kFormatFloat && bits == 32) bytes_per_sample = 4;
  else
    throw FormatError("unsupported wav encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bit) in: " + path.string());

  const std::size_t frame_bytes = bytes_per_sample * channels;
  if (payload_len % frame_bytes != 0) throw ParseError("data chunk not frame aligned");
  const std::size_t frames = payload_len / frame_bytes;

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    double acc = 0.0;
    const unsigned char* fp = payload + t * frame_bytes;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* sp = fp + c * bytes_per_sample;
      double v;
      if (bytes_per_sample == 2) {
        std::int16_t s = static_cast<std::int16_t>(read_u16(sp));
        v = s / 32768.0;
      } else if (bytes_per_sample == 3) {
        std::int32_t s = sp[0] | sp[1] << 8 | sp[2] << 16;
        if (s & 0x800000) s |= ~0xFFFFFF;  // sign extend
        v = s / 8388608.0;
      } else {
        float f = f32_from_le(sp);
        if (!std::isfinite(f)) throw ValueError("non-finite sample in: " + path.string());
        v = f;
      }
      acc += v;
    }
    clip.samples[t] = static_cast<float>(acc / channels);
  }
  return clip;
}

std::size_t write_wav(const AudioClip& clip, const std::filesystem::path& path,
                      WavEncoding encoding) {
  if (clip.samples.empty()) throw EmptyClipError("refusing to write empty clip: " + path.string());
  if (clip.sample_rate <= 0) throw ValueError("clip has no sample rate");
  for (float s : clip.samples)
    if (!std::isfinite(s)) throw ValueError("non-finite sample in clip");

  std::uint16_t format, bits;
  switch (encoding) {
    case WavEncoding::Pcm16: format = kFormatPcm; bits = 16; break;
    case WavEncoding::Pcm24: format = kFormatPcm; bits = 24; break;
    case WavEncoding::Float32: format = kFormatFloat; bits = 32; break;
    default: throw FormatError("bad encoding");
  }
  const std::uint16_t channels = 1;
  const std::uint32_t byte_rate = clip.sample_rate * channels * bits / 8;
  const std::uint16_t block_align = channels * bits / 8;
  const std::uint32_t data_len = static_cast<std::uint32_t>(clip.samples.size()) * block_align;

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, format);
  put_u16(out, channels);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, byte_rate);
  put_u16(out, block_align);
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);

  std::size_t clipped = 0;
  for (float s : clip.samples) {
    if (encoding == WavEncoding::Float32) {
      put_f32(out, s);
    } else {
      const double scale = encoding == WavEncoding::Pcm16 ? 32768.0 : 8388608.0;
      const long lo = -static_cast<long>(scale);
      const long hi = static_cast<long>(scale) - 1;
      long v = std::lround(static_cast<double>(s) * scale);
      if (v < lo) { v = lo; ++clipped; }
      if (v > hi) { v = hi; ++clipped; }
      if (encoding == WavEncoding::Pcm16) {
        put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
      } else {
        std::uint32_t u = static_cast<std::uint32_t>(v) & 0xFFFFFF;
        out.push_back(char(u & 0xFF));
        out.push_back(char((u >> 8) & 0xFF));
        out.push_back(char((u >> 16) & 0xFF));
      }
    }
  }
  if (data_len & 1) out.push_back('\0');

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for write: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write failed: " + path.string());
  return clipped;
}

CorpusIndex::CorpusIndex(const std::filesystem::path& root) : root_(root) {
  if (!std::filesystem::is_directory(root_))
    throw CorpusError("corpus directory does not exist: " + root_.string());
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root_)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".wav")
      files.push_back(std::filesystem::relative(e.path(), root_).generic_string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw CorpusError("no wav files under: " + root_.string());

  for (const auto& rel : files) {
    AudioClip clip = read_wav(root_ / rel);
    if (sample_rate_ == 0) sample_rate_ = clip.sample_rate;
    if (clip.sample_rate != sample_rate_)
      throw CorpusError("sample-rate mismatch in corpus: " + rel + " has " +
                        std::to_string(clip.sample_rate) + ", expected " +
                        std::to_string(sample_rate_));
    entries_.push_back({rel, clip.samples.size()});
    total_samples_ += clip.samples.size();
    std::lock_guard<std::mutex> lock(cache_mutex_);
    cache_[rel] = std::make_shared<std::vector<float>>(std::move(clip.samples));
  }
}

const std::vector<float>& CorpusIndex::cached(const std::string& rel_path) const {
  {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto it = cache_.find(rel_path);
    if (it != cache_.end()) return *it->second;
  }
  AudioClip clip = read_wav(root_ / rel_path);
  std::lock_guard<std::mutex> lock(cache_mutex_);
  auto [it, inserted] =
      cache_.emplace(rel_path, std::make_shared<std::vector<float>>(std::move(clip.samples)));
  return *it->second;
}

AudioClip CorpusIndex::load_slice(const std::string& rel_path, std::uint64_t offset,
                                  std::uint64_t count) const {
  const std::vector<float>& all = cached(rel_path);
  if (offset + count > all.size())
    throw CorpusError("slice out of range in " + rel_path + ": offset " + std::to_string(offset) +
                      " + " + std::to_string(count) + " > " + std::to_string(all.size()));
  AudioClip clip;
  clip.sample_rate = sample_rate_;
  clip.samples.assign(all.begin() + static_cast<std::ptrdiff_t>(offset),
                      all.begin() + static_cast<std::ptrdiff_t>(offset + count));
  return clip;
}

SampledClip sample_clip(const CorpusIndex& corpus, double duration_s, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(std::llround(duration_s * corpus.sample_rate()));
  if (n == 0) throw CorpusError("requested zero-length clip");

  // One draw over the concatenation of all eligible offsets gives file choice
  // weighted by eligible-offset count and a uniform offset within the file.
  std::uint64_t total_eligible = 0;
  for (const auto& e : corpus.entries())
    if (e.n_samples >= n) total_eligible += e.n_samples - n + 1;
  if (total_eligible == 0)
    throw CorpusError("no corpus file long enough for " + std::to_string(n) + " samples");

  std::uint64_t r = rng.below(total_eligible);
  for (const auto& e : corpus.entries()) {
    if (e.n_samples < n) continue;
    const std::uint64_t eligible = e.n_samples - n + 1;
    if (r < eligible) {
      SampledClip out;
      out.origin = {e.rel_path, r};
      out.clip = corpus.load_slice(e.rel_path, r, n);
      return out;
    }
    r -= eligible;
  }
  throw CorpusError("unreachable: clip draw out of range");
}

}  // namespace ampforge
