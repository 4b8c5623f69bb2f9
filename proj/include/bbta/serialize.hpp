#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/layers.hpp"
#include "bbta/tensor.hpp"

// Binary containers. Both are little-endian:
//   BBTN — network weights: magic "BBTN", version u32, layer manifest as
//          length-prefixed records, then the flat parameter vector (f64).
//   BBTD — dataset: magic "BBTD", version u32, n/C/channels/height/width
//          u32, labels u8[n], pixels f32[n*channels*height*width] in [0,1].

namespace bbta::io {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("read_u32: truncated stream");
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("read_u64: truncated stream");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("read_f64: truncated stream");
  return v;
}

// ---- raw tensor wire format (used by the remote-model protocol) ----

inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

inline Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = read_u32(is);
  if (rank > 8) throw std::runtime_error("read_tensor: implausible rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = read_u32(is);
  Tensor t(std::move(shape));
  if (!is.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double))))
    throw std::runtime_error("read_tensor: truncated payload");
  return t;
}

inline std::string tensor_to_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

inline Tensor tensor_from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

// ---- BBTN weights container ----

inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_network(std::ostream& os, const Network& net) {
  os.write("BBTN", 4);
  write_u32(os, kWeightsVersion);
  write_u32(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const Layer& l : net.layers) {
    std::ostringstream rec(std::ios::binary);
    write_u32(rec, static_cast<std::uint32_t>(l.kind));
    switch (l.kind) {
      case LayerKind::kDense:
        write_u32(rec, static_cast<std::uint32_t>(l.in));
        write_u32(rec, static_cast<std::uint32_t>(l.out));
        break;
      case LayerKind::kConv2d:
        write_u32(rec, static_cast<std::uint32_t>(l.in_channels));
        write_u32(rec, static_cast<std::uint32_t>(l.out_channels));
        write_u32(rec, static_cast<std::uint32_t>(l.kernel));
        write_u32(rec, static_cast<std::uint32_t>(l.stride));
        write_u32(rec, static_cast<std::uint32_t>(l.pad));
        break;
      case LayerKind::kInstanceNorm:
        write_u32(rec, static_cast<std::uint32_t>(l.channels));
        write_f64(rec, l.epsilon);
        write_u32(rec, l.affine ? 1 : 0);
        break;
      default: break;
    }
    const std::string payload = rec.str();
    write_u32(os, static_cast<std::uint32_t>(payload.size()));
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  const Tensor flat = net.flatten_params();
  write_u64(os, flat.numel());
  os.write(reinterpret_cast<const char*>(flat.data.data()),
           static_cast<std::streamsize>(flat.numel() * sizeof(double)));
}

inline Network load_network(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "BBTN", 4) != 0)
    throw std::runtime_error("load_network: bad magic, not a BBTN file");
  const std::uint32_t version = read_u32(is);
  if (version != kWeightsVersion)
    throw std::runtime_error("load_network: unsupported version " + std::to_string(version));
  const std::uint32_t n_layers = read_u32(is);
  Network net;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint32_t len = read_u32(is);
    std::string payload(len, '\0');
    if (!is.read(payload.data(), len)) throw std::runtime_error("load_network: truncated record");
    std::istringstream rec(payload, std::ios::binary);
    const auto kind = static_cast<LayerKind>(read_u32(rec));
    switch (kind) {
      case LayerKind::kDense: {
        const std::uint32_t in = read_u32(rec), out = read_u32(rec);
        net.layers.push_back(Layer::dense(in, out));
        break;
      }
      case LayerKind::kConv2d: {
        const std::uint32_t ci = read_u32(rec), co = read_u32(rec), k = read_u32(rec);
        const std::uint32_t stride = read_u32(rec), pad = read_u32(rec);
        net.layers.push_back(Layer::conv2d(ci, co, k, stride, pad));
        break;
      }
      case LayerKind::kInstanceNorm: {
        const std::uint32_t channels = read_u32(rec);
        const double eps = read_f64(rec);
        const bool affine = read_u32(rec) != 0;
        net.layers.push_back(Layer::instance_norm(channels, eps, affine));
        break;
      }
      case LayerKind::kRelu: net.layers.push_back(Layer::relu()); break;
      case LayerKind::kSoftmax: net.layers.push_back(Layer::softmax()); break;
      default: throw std::runtime_error("load_network: unknown layer kind in record");
    }
  }
  const std::uint64_t d = read_u64(is);
  if (d != net.param_count())
    throw std::runtime_error("load_network: parameter vector length " + std::to_string(d) +
                             " does not match manifest (" + std::to_string(net.param_count()) + ")");
  Tensor flat({static_cast<std::size_t>(d)});
  if (!is.read(reinterpret_cast<char*>(flat.data.data()),
               static_cast<std::streamsize>(d * sizeof(double))))
    throw std::runtime_error("load_network: truncated parameters");
  net.set_params(flat);
  return net;
}

inline void save_network_file(const std::string& path, const Network& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  save_network(os, net);
}

inline Network load_network_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return load_network(is);
}

// ---- base64 (remote protocol framing: one message per line) ----

inline std::string base64_encode(const std::string& in) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= in.size(); i += 3) {
    const std::uint32_t v = (static_cast<std::uint8_t>(in[i]) << 16) |
                            (static_cast<std::uint8_t>(in[i + 1]) << 8) |
                            static_cast<std::uint8_t>(in[i + 2]);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  const std::size_t rem = in.size() - i;
  if (rem == 1) {
    const std::uint32_t v = static_cast<std::uint8_t>(in[i]) << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v =
        (static_cast<std::uint8_t>(in[i]) << 16) | (static_cast<std::uint8_t>(in[i + 1]) << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::string base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::string out;
  out.reserve(in.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=' || c == '\r' || c == '\n') break;
    const int v = val(c);
    if (v < 0) throw std::runtime_error("base64_decode: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace bbta::io
