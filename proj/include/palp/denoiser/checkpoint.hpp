#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "palp/denoiser/denoiser.hpp"
#include "palp/diffusion/schedule.hpp"

// Binary checkpoint: "PALPCKPT", u32 version, then little-endian u64 sizes and
// f64 payloads. Layout:
//   dims (pixels, time width, cond dim), linear prior (steps, then if non-zero mean, basis,
//   variance, (signal, noise)*), layers (out, in, W, b)*,
//   vocab (token, placeholder class or ""), embedding rows,
//   optional LoRA (rank, scale, (layer, A, B)*), schedule betas.
namespace palp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'L', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 2;

struct Checkpoint {
  Denoiser model;
  NoiseSchedule schedule;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t d : t.shape()) u64(d);
    bytes(t.data().data(), t.size() * sizeof(double));
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  void bytes(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > buf_.size() - pos_) throw CheckpointError("checkpoint truncated");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const std::uint64_t rank = u64();
    if (rank > 4) throw CheckpointError("bad tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    const std::size_t n = shape_size(shape);
    if (n > (buf_.size() - pos_) / sizeof(double)) throw CheckpointError("checkpoint truncated");
    std::vector<double> data(n);
    bytes(data.data(), n * sizeof(double));
    return Tensor(std::move(shape), std::move(data));
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const DenoiserParams& p = ck.model.params;
  w.u64(p.image_pixels);
  w.u64(p.time_width);
  w.u64(p.cond_dim);
  const LinearPrior& lp = p.prior;
  w.u64(lp.steps());
  if (!lp.empty()) {
    for (double v : lp.mean) w.f64(v);
    w.tensor(lp.basis);
    for (double v : lp.variance) w.f64(v);
    for (std::size_t t = 0; t < lp.steps(); ++t) {
      w.f64(lp.signal[t]);
      w.f64(lp.noise[t]);
    }
  }
  w.u64(p.layers.size());
  for (const auto& l : p.layers) {
    w.tensor(l.weight);
    w.tensor(l.bias);
  }
  const EmbeddingTable& e = ck.model.embeddings;
  w.u64(e.size());
  for (const auto& t : e.tokens()) {
    w.str(t);
    auto it = e.placeholder_classes().find(t);
    w.str(it == e.placeholder_classes().end() ? std::string() : it->second);
  }
  w.tensor(e.rows());
  w.u32(ck.model.lora ? 1 : 0);
  if (ck.model.lora) {
    const LoraAdapter& a = *ck.model.lora;
    w.u64(a.rank);
    w.f64(a.scale);
    w.u64(a.layers.size());
    for (const auto& l : a.layers) {
      w.u64(l.layer);
      w.tensor(l.a);
      w.tensor(l.b);
    }
  }
  w.u64(ck.schedule.steps());
  for (double b : ck.schedule.beta) w.f64(b);
  return w.take();
}

inline Checkpoint deserialize(const std::string& buf) {
  detail::Reader r(buf);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint");
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ck;
  DenoiserParams& p = ck.model.params;
  p.image_pixels = r.u64();
  p.time_width = r.u64();
  p.cond_dim = r.u64();
  const std::uint64_t prior_steps = r.u64();
  if (prior_steps > 100000) throw CheckpointError("bad linear prior length");
  if (prior_steps > 0) {
    if (p.image_pixels > 4096) throw CheckpointError("bad pixel count");
    LinearPrior& lp = p.prior;
    for (std::size_t j = 0; j < p.image_pixels; ++j) lp.mean.push_back(r.f64());
    lp.basis = r.tensor();
    for (std::size_t j = 0; j < p.image_pixels; ++j) lp.variance.push_back(r.f64());
    for (std::uint64_t t = 0; t < prior_steps; ++t) {
      lp.signal.push_back(r.f64());
      lp.noise.push_back(r.f64());
    }
  }
  const std::uint64_t n_layers = r.u64();
  if (n_layers > 64) throw CheckpointError("bad layer count");
  for (std::uint64_t i = 0; i < n_layers; ++i) {
    AffineLayer l;
    l.weight = r.tensor();
    l.bias = r.tensor();
    p.layers.push_back(std::move(l));
  }
  p.validate();
  const std::uint64_t vocab = r.u64();
  std::vector<std::string> tokens;
  std::map<std::string, std::string> classes;
  for (std::uint64_t i = 0; i < vocab; ++i) {
    tokens.push_back(r.str());
    std::string cls = r.str();
    if (!cls.empty()) classes[tokens.back()] = std::move(cls);
  }
  ck.model.embeddings = EmbeddingTable(std::move(tokens), r.tensor(), std::move(classes));
  if (ck.model.embeddings.width() != p.cond_dim) throw CheckpointError("embedding width mismatch");
  if (r.u32()) {
    LoraAdapter a;
    a.rank = r.u64();
    a.scale = r.f64();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      LoraLayer l;
      l.layer = r.u64();
      l.a = r.tensor();
      l.b = r.tensor();
      if (l.layer >= p.layers.size() || l.a.shape() != Shape{a.rank, p.layers[l.layer].in_dim()} ||
          l.b.shape() != Shape{p.layers[l.layer].out_dim(), a.rank}) {
        throw CheckpointError("LoRA factor shapes do not match the base layers");
      }
      a.layers.push_back(std::move(l));
    }
    ck.model.lora = std::move(a);
  }
  const std::uint64_t steps = r.u64();
  if (steps > 100000) throw CheckpointError("bad schedule length");
  std::vector<double> betas(steps);
  for (auto& b : betas) b = r.f64();
  ck.schedule = schedule_from_betas(std::move(betas));
  if (!p.prior.empty() && p.prior.steps() != steps) {
    throw CheckpointError("linear prior does not match the schedule length");
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

/// FNV-1a over the serialized bytes, as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

inline std::string checkpoint_hash(const Checkpoint& ck) { return fnv1a_hex(serialize(ck)); }

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path));
}

}  // namespace palp
