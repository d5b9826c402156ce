#pragma once

// Binary checkpoints. Layout (little-endian):
//   8-byte magic ("CLWFVEL1" velocity, "CLWFVAE1" VAE)
//   u32 header fields (see writers below)
//   per network: u32 layer count, then (u32 in, u32 out) per layer
//   row-major f64 weights then biases, layer by layer

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clwf/nn.hpp"
#include "clwf/vae_potential.hpp"
#include "clwf/velocity_model.hpp"

namespace clwf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kVelocityMagic[8] = {'C', 'L', 'W', 'F', 'V', 'E', 'L', '1'};
inline constexpr char kVaeMagic[8] = {'C', 'L', 'W', 'F', 'V', 'A', 'E', '1'};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  void u32(std::uint64_t v) {
    if (v > 0xffffffffull) throw std::invalid_argument("checkpoint: header value exceeds 32 bits");
    const auto x = static_cast<std::uint32_t>(v);
    raw(&x, sizeof x);
  }
  void f64s(std::span<const double> v) { raw(v.data(), v.size() * sizeof(double)); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : bytes_(b) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t x = 0;
    raw(&x, sizeof x);
    return x;
  }
  void f64s(std::span<double> v) { raw(v.data(), v.size() * sizeof(double)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline void write_mlp_dims(ByteWriter& w, const Mlp& net) {
  w.u32(net.layers.size());
  for (const auto& l : net.layers) {
    w.u32(l.weight.dim(0));
    w.u32(l.weight.dim(1));
  }
}

inline void write_mlp_weights(ByteWriter& w, const Mlp& net) {
  for (const auto& l : net.layers) {
    w.f64s(l.weight.data());
    w.f64s(l.bias.data());
  }
}

inline Mlp read_mlp_dims(ByteReader& r, Activation act) {
  Mlp net;
  net.activation = act;
  const std::uint32_t n = r.u32();
  if (n == 0 || n > 64) throw std::runtime_error("checkpoint: implausible layer count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t in = r.u32(), out = r.u32();
    if (i > 0 && net.layers.back().weight.dim(1) != in) throw std::runtime_error("checkpoint: layer dims do not chain");
    net.layers.push_back(Dense{Tensor(Shape{in, out}), Tensor(Shape{1, out})});
  }
  return net;
}

inline void read_mlp_weights(ByteReader& r, Mlp& net) {
  for (auto& l : net.layers) {
    r.f64s(l.weight.data());
    r.f64s(l.bias.data());
    if (!l.weight.all_finite() || !l.bias.all_finite()) throw std::runtime_error("checkpoint: non-finite parameter");
  }
}

inline void check_magic(ByteReader& r, const char (&magic)[8], const char* what) {
  char m[8];
  r.raw(m, 8);
  if (std::memcmp(m, magic, 8) != 0) throw std::runtime_error(std::string("checkpoint: not a ") + what + " checkpoint");
}

inline Activation read_activation(ByteReader& r) {
  const std::uint32_t a = r.u32();
  if (a > 1) throw std::runtime_error("checkpoint: unknown activation code");
  return static_cast<Activation>(a);
}

}  // namespace detail

inline std::string serialize(const ModelParams& p) {
  detail::ByteWriter w;
  w.raw(kVelocityMagic, 8);
  w.u32(p.K);
  w.u32(p.L);
  w.u32(p.time_embed_dim);
  w.u32(static_cast<std::uint32_t>(p.net.activation));
  detail::write_mlp_dims(w, p.net);
  detail::write_mlp_weights(w, p.net);
  return w.take();
}

inline ModelParams deserialize_model(const std::string& bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, kVelocityMagic, "velocity");
  ModelParams p;
  p.K = r.u32();
  p.L = r.u32();
  p.time_embed_dim = r.u32();
  const Activation act = detail::read_activation(r);
  p.net = detail::read_mlp_dims(r, act);
  detail::read_mlp_weights(r, p.net);
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  if (p.net.input_dim() != p.input_dim() || p.net.output_dim() != p.state_dim()) {
    throw std::runtime_error("checkpoint: network dims inconsistent with K, L header");
  }
  for (std::size_t i = 0; i + 1 < p.net.layers.size(); ++i) p.hidden_dims.push_back(p.net.layers[i].weight.dim(1));
  return p;
}

inline std::string serialize(const VaeParams& p) {
  detail::ByteWriter w;
  w.raw(kVaeMagic, 8);
  w.u32(p.K);
  w.u32(p.L);
  w.u32(p.latent_dim);
  w.u32(static_cast<std::uint32_t>(p.encoder.activation));
  detail::write_mlp_dims(w, p.encoder);
  detail::write_mlp_dims(w, p.decoder);
  detail::write_mlp_weights(w, p.encoder);
  detail::write_mlp_weights(w, p.decoder);
  return w.take();
}

inline VaeParams deserialize_vae(const std::string& bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, kVaeMagic, "VAE");
  VaeParams p;
  p.K = r.u32();
  p.L = r.u32();
  p.latent_dim = r.u32();
  const Activation act = detail::read_activation(r);
  p.encoder = detail::read_mlp_dims(r, act);
  p.decoder = detail::read_mlp_dims(r, act);
  detail::read_mlp_weights(r, p.encoder);
  detail::read_mlp_weights(r, p.decoder);
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  if (p.encoder.input_dim() != 2 * p.state_dim() || p.encoder.output_dim() != 2 * p.latent_dim ||
      p.decoder.input_dim() != p.latent_dim || p.decoder.output_dim() != p.state_dim()) {
    throw std::runtime_error("checkpoint: VAE dims inconsistent with header");
  }
  return p;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_model(const std::string& path, const ModelParams& p) { write_file(path, serialize(p)); }
inline ModelParams load_model(const std::string& path) { return deserialize_model(read_file(path)); }
inline void save_vae(const std::string& path, const VaeParams& p) { write_file(path, serialize(p)); }
inline VaeParams load_vae(const std::string& path) { return deserialize_vae(read_file(path)); }

}  // namespace clwf
