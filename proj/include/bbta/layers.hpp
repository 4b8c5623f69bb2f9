#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/rng.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

enum class LayerKind { kDense, kConv2d, kInstanceNorm, kRelu, kSoftmax };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kInstanceNorm: return "instance_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "?";
}

/// One layer. Parameter counts:
///   dense:         out * (in + 1)
///   conv2d:        out_channels * (in_channels * k * k + 1)
///   instance_norm: affine ? 2 * channels : 0
///   relu, softmax: 0
struct Layer {
  LayerKind kind;

  // dense
  std::size_t in = 0, out = 0;
  // conv2d
  std::size_t in_channels = 0, out_channels = 0, kernel = 0, stride = 1, pad = 0;
  // instance_norm
  std::size_t channels = 0;
  double epsilon = 1e-5;
  bool affine = false;

  Tensor weights;  // dense: (out,in); conv2d: (co,ci,k,k); instance_norm affine: gamma (channels)
  Tensor biases;   // dense: (out);    conv2d: (co);        instance_norm affine: beta (channels)

  static Layer dense(std::size_t in, std::size_t out) {
    Layer l;
    l.kind = LayerKind::kDense;
    l.in = in;
    l.out = out;
    l.weights = Tensor({out, in});
    l.biases = Tensor({out});
    return l;
  }

  /// Default pad = k/2 keeps spatial shape at stride 1 (same padding).
  static Layer conv2d(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride = 1,
                      std::size_t pad = static_cast<std::size_t>(-1)) {
    Layer l;
    l.kind = LayerKind::kConv2d;
    l.in_channels = ci;
    l.out_channels = co;
    l.kernel = k;
    l.stride = stride;
    l.pad = (pad == static_cast<std::size_t>(-1)) ? k / 2 : pad;
    l.weights = Tensor({co, ci, k, k});
    l.biases = Tensor({co});
    return l;
  }

  static Layer instance_norm(std::size_t channels, double epsilon = 1e-5, bool affine = false) {
    Layer l;
    l.kind = LayerKind::kInstanceNorm;
    l.channels = channels;
    l.epsilon = epsilon;
    l.affine = affine;
    if (affine) {
      l.weights = Tensor::full({channels}, 1.0);
      l.biases = Tensor({channels});
    }
    return l;
  }

  static Layer relu() {
    Layer l;
    l.kind = LayerKind::kRelu;
    return l;
  }

  static Layer softmax() {
    Layer l;
    l.kind = LayerKind::kSoftmax;
    return l;
  }

  std::size_t param_count() const {
    switch (kind) {
      case LayerKind::kDense: return out * (in + 1);
      case LayerKind::kConv2d: return out_channels * (in_channels * kernel * kernel + 1);
      case LayerKind::kInstanceNorm: return affine ? 2 * channels : 0;
      default: return 0;
    }
  }

  std::size_t fan_in() const {
    switch (kind) {
      case LayerKind::kDense: return in;
      case LayerKind::kConv2d: return in_channels * kernel * kernel;
      default: return 0;
    }
  }

  Tensor forward(const Tensor& x) const;
  // dx is accumulated output; dw/db are per-layer gradient buffers (same shapes as weights/biases).
  void backward(const Tensor& x, const Tensor& y, const Tensor& dy, Tensor& dx, Tensor& dw,
                Tensor& db) const;

  /// Mean in deviations-from-first form: a constant channel normalizes
  /// to exactly zero instead of inheriting summation round-off.
  static double channel_mean(const double* v, std::size_t m) {
    double dev = 0.0;
    for (std::size_t i = 0; i < m; ++i) dev += v[i] - v[0];
    return v[0] + dev / static_cast<double>(m);
  }
};

namespace detail {

inline void expect(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline std::size_t flat_features(const Tensor& x) {
  return x.numel() / x.shape.at(0);
}

}  // namespace detail

inline Tensor Layer::forward(const Tensor& x) const {
  using detail::expect;
  switch (kind) {
    case LayerKind::kDense: {
      expect(x.rank() >= 2, "dense: input must have a batch dimension");
      const std::size_t n = x.shape[0];
      expect(detail::flat_features(x) == in,
             "dense: expected " + std::to_string(in) + " input features, got " +
                 std::to_string(detail::flat_features(x)) + " from shape " +
                 Tensor::shape_str(x.shape));
      Tensor y({n, out});
      for (std::size_t b = 0; b < n; ++b) {
        const double* xv = x.data.data() + b * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double* w = weights.data.data() + o * in;
          double acc = biases[o];
          for (std::size_t i = 0; i < in; ++i) acc += w[i] * xv[i];
          y.at2(b, o) = acc;
        }
      }
      return y;
    }
    case LayerKind::kConv2d: {
      expect(x.rank() == 4, "conv2d: expected (N,C,H,W) input, got " + Tensor::shape_str(x.shape));
      expect(x.shape[1] == in_channels,
             "conv2d: expected " + std::to_string(in_channels) + " channels, got " +
                 std::to_string(x.shape[1]));
      const std::size_t n = x.shape[0], h = x.shape[2], w = x.shape[3];
      expect(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "conv2d: input smaller than kernel");
      const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
      const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
      Tensor y({n, out_channels, ho, wo});
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < out_channels; ++co)
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
              double acc = biases[co];
              for (std::size_t ci = 0; ci < in_channels; ++ci)
                for (std::size_t u = 0; u < kernel; ++u) {
                  const std::ptrdiff_t yy =
                      static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pad);
                  if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t v = 0; v < kernel; ++v) {
                    const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * stride + v) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                    acc += weights.data[((co * in_channels + ci) * kernel + u) * kernel + v] *
                           x.at4(b, ci, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                  }
                }
              y.at4(b, co, i, j) = acc;
            }
      return y;
    }
    case LayerKind::kInstanceNorm: {
      expect(x.rank() == 4,
             "instance_norm: expected (N,C,H,W) input, got " + Tensor::shape_str(x.shape));
      expect(x.shape[1] == channels,
             "instance_norm: expected " + std::to_string(channels) + " channels, got " +
                 std::to_string(x.shape[1]));
      const std::size_t n = x.shape[0], hw = x.shape[2] * x.shape[3];
      Tensor y(x.shape);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
          const double* xv = x.data.data() + (b * channels + c) * hw;
          double* yv = y.data.data() + (b * channels + c) * hw;
          const double mean = channel_mean(xv, hw);
          double var = 0.0;
          for (std::size_t i = 0; i < hw; ++i) var += (xv[i] - mean) * (xv[i] - mean);
          var /= static_cast<double>(hw);
          const double inv = 1.0 / std::sqrt(var + epsilon);
          const double g = affine ? weights[c] : 1.0;
          const double bb = affine ? biases[c] : 0.0;
          for (std::size_t i = 0; i < hw; ++i) yv[i] = g * (xv[i] - mean) * inv + bb;
        }
      return y;
    }
    case LayerKind::kRelu: {
      Tensor y = x;
      for (double& v : y.data) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::kSoftmax: {
      expect(x.rank() == 2, "softmax: expected (N,C) input, got " + Tensor::shape_str(x.shape));
      const std::size_t n = x.shape[0], c = x.shape[1];
      Tensor y(x.shape);
      for (std::size_t b = 0; b < n; ++b) {
        const double* xv = x.data.data() + b * c;
        double* yv = y.data.data() + b * c;
        double mx = xv[0];
        for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xv[k]);
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          yv[k] = std::exp(xv[k] - mx);
          sum += yv[k];
        }
        for (std::size_t k = 0; k < c; ++k) yv[k] /= sum;
      }
      return y;
    }
  }
  throw std::logic_error("unknown layer kind");
}

inline void Layer::backward(const Tensor& x, const Tensor& y, const Tensor& dy, Tensor& dx,
                            Tensor& dw, Tensor& db) const {
  using detail::expect;
  expect(dy.same_shape(y), std::string(layer_kind_name(kind)) + " backward: upstream shape " +
                               Tensor::shape_str(dy.shape) + " does not match output " +
                               Tensor::shape_str(y.shape));
  expect(dy.all_finite(), std::string(layer_kind_name(kind)) + " backward: non-finite upstream");
  dx = Tensor(x.shape);
  switch (kind) {
    case LayerKind::kDense: {
      const std::size_t n = x.shape[0];
      for (std::size_t b = 0; b < n; ++b) {
        const double* xv = x.data.data() + b * in;
        const double* gv = dy.data.data() + b * out;
        double* dxv = dx.data.data() + b * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double g = gv[o];
          db[o] += g;
          double* dwv = dw.data.data() + o * in;
          const double* wv = weights.data.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) {
            dwv[i] += g * xv[i];
            dxv[i] += g * wv[i];
          }
        }
      }
      return;
    }
    case LayerKind::kConv2d: {
      const std::size_t n = x.shape[0], h = x.shape[2], w = x.shape[3];
      const std::size_t ho = y.shape[2], wo = y.shape[3];
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < out_channels; ++co)
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
              const double g = dy.at4(b, co, i, j);
              db[co] += g;
              for (std::size_t ci = 0; ci < in_channels; ++ci)
                for (std::size_t u = 0; u < kernel; ++u) {
                  const std::ptrdiff_t yy =
                      static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pad);
                  if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t v = 0; v < kernel; ++v) {
                    const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * stride + v) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                    const std::size_t widx = ((co * in_channels + ci) * kernel + u) * kernel + v;
                    dw.data[widx] +=
                        g * x.at4(b, ci, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    dx.at4(b, ci, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) +=
                        g * weights.data[widx];
                  }
                }
            }
      return;
    }
    case LayerKind::kInstanceNorm: {
      const std::size_t n = x.shape[0], hw = x.shape[2] * x.shape[3];
      const double m = static_cast<double>(hw);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
          const double* xv = x.data.data() + (b * channels + c) * hw;
          const double* gv = dy.data.data() + (b * channels + c) * hw;
          double* dxv = dx.data.data() + (b * channels + c) * hw;
          const double mean = channel_mean(xv, hw);
          double var = 0.0;
          for (std::size_t i = 0; i < hw; ++i) var += (xv[i] - mean) * (xv[i] - mean);
          var /= m;
          const double inv = 1.0 / std::sqrt(var + epsilon);
          const double g = affine ? weights[c] : 1.0;
          // dL/dxhat, then the standard normalization backward.
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            const double xhat = (xv[i] - mean) * inv;
            const double dyh = gv[i] * g;
            sum_dy += dyh;
            sum_dy_xhat += dyh * xhat;
            if (affine) {
              dw[c] += gv[i] * xhat;
              db[c] += gv[i];
            }
          }
          for (std::size_t i = 0; i < hw; ++i) {
            const double xhat = (xv[i] - mean) * inv;
            dxv[i] = inv * (gv[i] * g - sum_dy / m - xhat * sum_dy_xhat / m);
          }
        }
      return;
    }
    case LayerKind::kRelu: {
      for (std::size_t i = 0; i < x.numel(); ++i) dx.data[i] = x.data[i] > 0.0 ? dy.data[i] : 0.0;
      return;
    }
    case LayerKind::kSoftmax: {
      const std::size_t n = y.shape[0], c = y.shape[1];
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = y.data.data() + b * c;
        const double* g = dy.data.data() + b * c;
        double gp = 0.0;
        for (std::size_t k = 0; k < c; ++k) gp += g[k] * p[k];
        double* dxv = dx.data.data() + b * c;
        for (std::size_t k = 0; k < c; ++k) dxv[k] = p[k] * (g[k] - gp);
      }
      return;
    }
  }
  throw std::logic_error("unknown layer kind");
}

/// Ordered stack of layers with a flat parameter view. Parameter layout
/// is fixed: layer order, weights before biases, row-major — the layout
/// the flat ZOO variable and the weight container rely on.
struct Network {
  std::vector<Layer> layers;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.param_count();
    return n;
  }

  Tensor forward(const Tensor& x) const {
    Tensor cur = x;
    for (const Layer& l : layers) cur = l.forward(cur);
    return cur;
  }

  /// Forward pass keeping every intermediate activation for backward.
  struct Trace {
    std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = layers[i] output
    const Tensor& output() const { return acts.back(); }
  };

  Trace forward_trace(const Tensor& x) const {
    Trace t;
    t.acts.reserve(layers.size() + 1);
    t.acts.push_back(x);
    for (const Layer& l : layers) t.acts.push_back(l.forward(t.acts.back()));
    return t;
  }

  struct Gradients {
    Tensor params;  // flat, same layout as flatten_params
    Tensor input;
  };

  Gradients backward(const Trace& trace, const Tensor& upstream) const {
    if (trace.acts.size() != layers.size() + 1)
      throw std::invalid_argument("backward: trace does not match network");
    Gradients g;
    g.params = Tensor({param_count()});
    // Per-layer gradient buffers live in the flat vector; find offsets first.
    std::vector<std::size_t> offsets(layers.size() + 1, 0);
    for (std::size_t i = 0; i < layers.size(); ++i)
      offsets[i + 1] = offsets[i] + layers[i].param_count();
    Tensor dy = upstream;
    for (std::size_t i = layers.size(); i-- > 0;) {
      const Layer& l = layers[i];
      Tensor dw(l.weights.shape.empty() ? std::vector<std::size_t>{0} : l.weights.shape);
      Tensor db(l.biases.shape.empty() ? std::vector<std::size_t>{0} : l.biases.shape);
      Tensor dx;
      l.backward(trace.acts[i], trace.acts[i + 1], dy, dx, dw, db);
      std::copy(dw.data.begin(), dw.data.end(), g.params.data.begin() + offsets[i]);
      std::copy(db.data.begin(), db.data.end(),
                g.params.data.begin() + offsets[i] + dw.data.size());
      dy = std::move(dx);
    }
    g.input = std::move(dy);
    return g;
  }

  Tensor flatten_params() const {
    Tensor flat({param_count()});
    std::size_t k = 0;
    for (const Layer& l : layers) {
      for (double v : l.weights.data) flat[k++] = v;
      for (double v : l.biases.data) flat[k++] = v;
    }
    return flat;
  }

  void set_params(const Tensor& flat) {
    if (flat.numel() != param_count())
      throw std::invalid_argument("set_params: expected " + std::to_string(param_count()) +
                                  " values, got " + std::to_string(flat.numel()));
    std::size_t k = 0;
    for (Layer& l : layers) {
      for (double& v : l.weights.data) v = flat[k++];
      for (double& v : l.biases.data) v = flat[k++];
    }
  }
};

inline Tensor forward(const Network& net, const Tensor& x) { return net.forward(x); }

inline Network::Gradients backward(const Network& net, const Tensor& x, const Tensor& upstream) {
  return net.backward(net.forward_trace(x), upstream);
}

inline Tensor flatten_params(const Network& net) { return net.flatten_params(); }

inline Network unflatten_params(const Network& net, const Tensor& flat) {
  Network copy = net;
  copy.set_params(flat);
  return copy;
}

}  // namespace bbta
