#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/adaptor.hpp"
#include "bbta/blackbox.hpp"
#include "bbta/layers.hpp"
#include "bbta/rng.hpp"
#include "bbta/serialize.hpp"
#include "bbta/tensor.hpp"

// Self-contained desk-scale benchmark: procedurally rendered 16x16
// shape images, corruption operators with five severity levels, and a
// small deployed classifier trained here (first-order, before anything
// is frozen behind the query-only wrapper).

namespace bbta::bench {

struct ShapeDataset {
  Tensor images;                    // (n, channels, side, side), values in [0,1]
  std::vector<std::size_t> labels;  // 0..C-1
  std::size_t num_classes = 4;
  std::size_t side = 16;

  std::size_t size() const { return labels.size(); }
};

/// Pixels snap to the f32 grid at creation so that saving to the
/// dataset container and loading back is bit-exact.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Renders n class-balanced images (round-robin labels, so counts are
/// balanced within one). Classes: 0 bar, 1 cross, 2 disk, 3 ring, with
/// jittered position, scale and intensities. Deterministic per seed.
inline ShapeDataset generate_dataset(std::size_t n, std::size_t num_classes, std::uint64_t seed,
                                     std::size_t side = 16) {
  if (num_classes < 2 || num_classes > 4)
    throw std::invalid_argument("generate_dataset: supported class counts are 2..4");
  if (n < num_classes) throw std::invalid_argument("generate_dataset: need n >= num_classes");
  ShapeDataset ds;
  ds.num_classes = num_classes;
  ds.side = side;
  ds.images = Tensor({n, 1, side, side});
  ds.labels.resize(n);
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % num_classes;
    ds.labels[i] = label;
    rng::Stream stream(seed, {rng::kDatasetGen, i});
    const double cx = mid + (stream.uniform() * 4.0 - 2.0);
    const double cy = mid + (stream.uniform() * 4.0 - 2.0);
    const double scale = 0.8 + 0.4 * stream.uniform();
    const double bg = 0.05 + 0.10 * stream.uniform();
    const double fg = 0.75 + 0.20 * stream.uniform();
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        bool inside = false;
        switch (label) {
          case 0:  // horizontal bar
            inside = std::abs(dy) <= 1.6 * scale && std::abs(dx) <= 5.2 * scale;
            break;
          case 1:  // cross
            inside = (std::abs(dy) <= 1.2 * scale && std::abs(dx) <= 5.2 * scale) ||
                     (std::abs(dx) <= 1.2 * scale && std::abs(dy) <= 5.2 * scale);
            break;
          case 2:  // disk
            inside = dx * dx + dy * dy <= 16.0 * scale * scale;
            break;
          case 3: {  // ring
            const double r = std::sqrt(dx * dx + dy * dy);
            inside = r >= 2.4 * scale && r <= 4.6 * scale;
            break;
          }
        }
        double v = (inside ? fg : bg) + 0.02 * stream.normal();
        v = std::clamp(v, 0.0, 1.0);
        ds.images.at4(i, 0, y, x) = quantize_f32(v);
      }
  }
  return ds;
}

enum class CorruptionKind {
  kGaussianNoise,
  kShotNoise,
  kBoxBlur,
  kContrast,
  kPixelate,
  kImpulseNoise,
};

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kShotNoise: return "shot_noise";
    case CorruptionKind::kBoxBlur: return "box_blur";
    case CorruptionKind::kContrast: return "contrast";
    case CorruptionKind::kPixelate: return "pixelate";
    case CorruptionKind::kImpulseNoise: return "impulse_noise";
  }
  return "?";
}

inline CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k :
       {CorruptionKind::kGaussianNoise, CorruptionKind::kShotNoise, CorruptionKind::kBoxBlur,
        CorruptionKind::kContrast, CorruptionKind::kPixelate, CorruptionKind::kImpulseNoise})
    if (name == corruption_name(k)) return k;
  throw std::invalid_argument("unknown corruption kind: " + name);
}

struct Corruption {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 5;  // 1..5; 0 is the identity extension
};

namespace detail {

inline std::size_t poisson(double lambda, rng::Stream& stream) {
  // Knuth's method; lambdas here stay small (<= ~60).
  const double limit = std::exp(-lambda);
  double p = 1.0;
  std::size_t k = 0;
  do {
    ++k;
    p *= stream.uniform();
  } while (p > limit);
  return k - 1;
}

inline void box_blur_pass(std::vector<double>& img, std::size_t side) {
  std::vector<double> out(img.size());
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::size_t yy = static_cast<std::size_t>(
              std::clamp<int>(static_cast<int>(y) + dy, 0, static_cast<int>(side) - 1));
          const std::size_t xx = static_cast<std::size_t>(
              std::clamp<int>(static_cast<int>(x) + dx, 0, static_cast<int>(side) - 1));
          acc += img[yy * side + xx];
        }
      out[y * side + x] = acc / 9.0;
    }
  img = std::move(out);
}

}  // namespace detail

/// Labels are untouched; pixels are transformed, clipped to [0,1] and
/// re-quantized. Severity 0 is the identity. Distortion (mean L2 against
/// the clean image) grows with severity for every kind; the schedules
/// below were sized so the harness model loses enough accuracy at
/// severity 5 to leave measurable recovery headroom.
inline ShapeDataset corrupt(const ShapeDataset& ds, const Corruption& c, std::uint64_t seed) {
  if (c.severity < 0 || c.severity > 5)
    throw std::invalid_argument("corrupt: severity must be in 0..5");
  ShapeDataset out = ds;
  if (c.severity == 0) return out;
  const std::size_t s = static_cast<std::size_t>(c.severity) - 1;
  const std::size_t side = ds.side;
  const std::size_t pixels = side * side;

  static constexpr double kGaussianSigma[5] = {0.10, 0.18, 0.30, 0.48, 0.80};
  static constexpr double kShotLambda[5] = {50.0, 25.0, 12.0, 6.0, 3.0};
  static constexpr int kBlurPasses[5] = {1, 2, 3, 4, 5};
  static constexpr double kContrastFactor[5] = {0.70, 0.55, 0.42, 0.30, 0.20};
  static constexpr std::size_t kPixelateBlock[5] = {2, 3, 4, 6, 8};
  static constexpr double kImpulseProb[5] = {0.04, 0.08, 0.14, 0.22, 0.32};

  for (std::size_t i = 0; i < ds.size(); ++i) {
    rng::Stream stream(seed, {rng::kCorrupt, static_cast<std::uint64_t>(c.kind),
                              static_cast<std::uint64_t>(c.severity), i});
    std::vector<double> img(pixels);
    for (std::size_t p = 0; p < pixels; ++p) img[p] = ds.images.data[i * pixels + p];
    switch (c.kind) {
      case CorruptionKind::kGaussianNoise:
        for (double& v : img) v += kGaussianSigma[s] * stream.normal();
        break;
      case CorruptionKind::kShotNoise: {
        const double lambda = kShotLambda[s];
        for (double& v : img)
          v = static_cast<double>(detail::poisson(std::max(v, 0.0) * lambda, stream)) / lambda;
        break;
      }
      case CorruptionKind::kBoxBlur:
        for (int pass = 0; pass < kBlurPasses[s]; ++pass) detail::box_blur_pass(img, side);
        break;
      case CorruptionKind::kContrast: {
        double mean = 0.0;
        for (double v : img) mean += v;
        mean /= static_cast<double>(pixels);
        for (double& v : img) v = mean + (v - mean) * kContrastFactor[s];
        break;
      }
      case CorruptionKind::kPixelate: {
        const std::size_t block = kPixelateBlock[s];
        for (std::size_t by = 0; by < side; by += block)
          for (std::size_t bx = 0; bx < side; bx += block) {
            const std::size_t ye = std::min(by + block, side), xe = std::min(bx + block, side);
            double mean = 0.0;
            for (std::size_t y = by; y < ye; ++y)
              for (std::size_t x = bx; x < xe; ++x) mean += img[y * side + x];
            mean /= static_cast<double>((ye - by) * (xe - bx));
            for (std::size_t y = by; y < ye; ++y)
              for (std::size_t x = bx; x < xe; ++x) img[y * side + x] = mean;
          }
        break;
      }
      case CorruptionKind::kImpulseNoise:
        for (double& v : img)
          if (stream.uniform() < kImpulseProb[s]) v = stream.uniform() < 0.5 ? 0.0 : 1.0;
        break;
    }
    for (std::size_t p = 0; p < pixels; ++p)
      out.images.data[i * pixels + p] = quantize_f32(std::clamp(img[p], 0.0, 1.0));
  }
  return out;
}

// ---- deployed model ----

struct DeployedTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.003;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
};

/// conv(s2) -> relu -> conv(s2) -> relu -> dense -> softmax.
inline Network make_deployed_net(std::size_t side, std::size_t num_classes,
                                 const DeployedTrainConfig& cfg) {
  Network net;
  net.layers.push_back(Layer::conv2d(1, cfg.conv1_channels, 3, 2, 1));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::conv2d(cfg.conv1_channels, cfg.conv2_channels, 3, 2, 1));
  net.layers.push_back(Layer::relu());
  const std::size_t spatial = (side + 1) / 2;
  const std::size_t spatial2 = (spatial + 1) / 2;
  net.layers.push_back(Layer::dense(cfg.conv2_channels * spatial2 * spatial2, num_classes));
  net.layers.push_back(Layer::softmax());
  return net;
}

/// Plain SGD-with-momentum training on cross-entropy. This is harness
/// machinery: it runs strictly before the model is frozen behind the
/// query-only wrapper, and nothing downstream ever sees the Network.
inline Network train_deployed_net(const ShapeDataset& train, const DeployedTrainConfig& cfg,
                                  std::uint64_t seed) {
  Network net = make_deployed_net(train.side, train.num_classes, cfg);
  {
    Tensor flat({net.param_count()});
    std::size_t k = 0;
    std::size_t layer_id = 0;
    for (const Layer& l : net.layers) {
      if (l.param_count() == 0) continue;
      rng::Stream stream(seed, {rng::kDeployedInit, layer_id++});
      const double fan = static_cast<double>(l.fan_in() ? l.fan_in() : 1);
      const double s = (l.kind == LayerKind::kConv2d) ? std::sqrt(2.0 / fan) : 1.0 / std::sqrt(fan);
      for (std::size_t i = 0; i < l.weights.numel(); ++i) flat[k++] = s * stream.normal();
      for (std::size_t i = 0; i < l.biases.numel(); ++i) flat[k++] = 0.0;
    }
    net.set_params(flat);
  }

  const std::size_t n = train.size();
  Tensor velocity({net.param_count()});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng::Stream shuffle(seed, {rng::kDeployedShuffle, epoch});
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_index(i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, n);
      std::vector<std::size_t> rows(order.begin() + start, order.begin() + end);
      const Tensor x = train.images.gather_rows(rows);
      const Network::Trace trace = net.forward_trace(x);
      const Tensor& p = trace.output();
      const std::size_t bs = rows.size();
      Tensor upstream(p.shape);
      double loss = 0.0;
      for (std::size_t b = 0; b < bs; ++b) {
        const double py = std::max(p.at2(b, train.labels[rows[b]]), 1e-12);
        loss -= std::log(py);
        upstream.at2(b, train.labels[rows[b]]) = -1.0 / (py * static_cast<double>(bs));
      }
      loss /= static_cast<double>(bs);
      if (!std::isfinite(loss))
        throw std::runtime_error("train_deployed: loss diverged at epoch " +
                                 std::to_string(epoch) + " (non-finite)");
      epoch_loss += loss;
      ++batches;
      const Network::Gradients grads = net.backward(trace, upstream);
      Tensor params = net.flatten_params();
      for (std::size_t k = 0; k < params.numel(); ++k) {
        velocity[k] = cfg.momentum * velocity[k] + grads.params[k] + cfg.weight_decay * params[k];
        params[k] -= cfg.lr * velocity[k];
      }
      net.set_params(params);
    }
    (void)epoch_loss;
    (void)batches;
  }
  return net;
}

/// Freezes a trained network behind the query-only boundary. The network
/// is moved into the closure; no parameter or gradient access survives.
inline std::shared_ptr<BlackBoxModel> freeze_deployed(
    Network net, std::size_t num_classes,
    std::optional<std::uint64_t> budget = std::nullopt) {
  auto owned = std::make_shared<Network>(std::move(net));
  return std::make_shared<BlackBoxModel>(
      [owned](const Tensor& x) { return owned->forward(x); }, num_classes, budget);
}

inline std::shared_ptr<BlackBoxModel> train_deployed(const ShapeDataset& train,
                                                     const DeployedTrainConfig& cfg,
                                                     std::uint64_t seed) {
  return freeze_deployed(train_deployed_net(train, cfg, seed), train.num_classes);
}

/// Fraction of argmax-correct predictions on (optionally adapted) data.
/// Passing theta = nullptr evaluates the raw images.
inline double evaluate(const BlackBoxModel& model, const DataAdaptor* adaptor,
                       const Tensor* theta, const ShapeDataset& test,
                       std::size_t batch_size = 256) {
  const std::size_t n = test.size();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(start + batch_size, n);
    std::vector<std::size_t> rows(end - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    Tensor x = test.images.gather_rows(rows);
    if (adaptor != nullptr && theta != nullptr) x = adaptor->adapt(*theta, x);
    const Tensor p = model.query(x);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < p.shape[1]; ++k)
        if (p.at2(b, k) > p.at2(b, best)) best = k;
      if (best == test.labels[rows[b]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// ---- BBTD dataset container ----

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const ShapeDataset& ds) {
  os.write("BBTD", 4);
  io::write_u32(os, kDatasetVersion);
  io::write_u32(os, static_cast<std::uint32_t>(ds.size()));
  io::write_u32(os, static_cast<std::uint32_t>(ds.num_classes));
  io::write_u32(os, static_cast<std::uint32_t>(ds.images.shape[1]));
  io::write_u32(os, static_cast<std::uint32_t>(ds.images.shape[2]));
  io::write_u32(os, static_cast<std::uint32_t>(ds.images.shape[3]));
  for (std::size_t label : ds.labels) {
    const std::uint8_t b = static_cast<std::uint8_t>(label);
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  for (double v : ds.images.data) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), sizeof f);
  }
}

inline ShapeDataset load_dataset(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "BBTD", 4) != 0)
    throw std::runtime_error("load_dataset: bad magic, not a BBTD file");
  const std::uint32_t version = io::read_u32(is);
  if (version != kDatasetVersion)
    throw std::runtime_error("load_dataset: unsupported version " + std::to_string(version));
  const std::uint32_t n = io::read_u32(is);
  const std::uint32_t num_classes = io::read_u32(is);
  const std::uint32_t channels = io::read_u32(is);
  const std::uint32_t height = io::read_u32(is);
  const std::uint32_t width = io::read_u32(is);
  if (height != width) throw std::runtime_error("load_dataset: non-square images unsupported");
  ShapeDataset ds;
  ds.num_classes = num_classes;
  ds.side = height;
  ds.images = Tensor({n, channels, height, width});
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint8_t b = 0;
    if (!is.read(reinterpret_cast<char*>(&b), 1)) throw std::runtime_error("load_dataset: truncated labels");
    if (b >= num_classes) throw std::runtime_error("load_dataset: label out of range");
    ds.labels[i] = b;
  }
  for (double& v : ds.images.data) {
    float f = 0.f;
    if (!is.read(reinterpret_cast<char*>(&f), sizeof f))
      throw std::runtime_error("load_dataset: truncated pixels");
    v = static_cast<double>(f);
  }
  return ds;
}

inline void save_dataset_file(const std::string& path, const ShapeDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  save_dataset(os, ds);
}

inline ShapeDataset load_dataset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return load_dataset(is);
}

}  // namespace bbta::bench
