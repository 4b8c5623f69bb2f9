#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>

#include "bbta/layers.hpp"
#include "bbta/rng.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

enum class AdaptorMode { kResidual, kDirect };

struct AdaptorSpec {
  std::size_t in_channels = 1;
  std::size_t mid_channels = 8;
  std::size_t kernel = 3;
  bool relu_between = false;  // optional nonlinearity after the norm
  AdaptorMode mode = AdaptorMode::kResidual;
  std::optional<std::pair<double, double>> clamp_range = std::pair<double, double>{0.0, 1.0};
  /// Output-conv weights are drawn at init_scale/sqrt(fan_in) so a fresh
  /// adaptor starts close to the identity; hidden weights use 1/sqrt(fan_in).
  double init_scale = 0.05;
};

/// The data adaptor G(.; theta): a small same-shape conv network whose
/// output either perturbs the input (residual) or replaces it (direct).
/// The network itself stays fixed; theta is a flat vector applied before
/// every evaluation, which is what the zeroth-order loop perturbs.
class DataAdaptor {
 public:
  explicit DataAdaptor(AdaptorSpec spec) : spec_(spec) {
    net_.layers.push_back(Layer::conv2d(spec.in_channels, spec.mid_channels, spec.kernel));
    net_.layers.push_back(Layer::instance_norm(spec.mid_channels));
    if (spec.relu_between) net_.layers.push_back(Layer::relu());
    net_.layers.push_back(Layer::conv2d(spec.mid_channels, spec.in_channels, spec.kernel));
  }

  const AdaptorSpec& spec() const { return spec_; }
  const Network& net() const { return net_; }
  std::size_t param_count() const { return net_.param_count(); }
  AdaptorMode mode() const { return spec_.mode; }

  /// Deterministic per seed: weights ~ N(0, s^2), biases zero.
  Tensor init_params(std::uint64_t seed) const {
    Tensor flat({param_count()});
    std::size_t k = 0;
    std::size_t conv_index = 0;
    const std::size_t last_conv = last_param_layer_index();
    for (std::size_t li = 0; li < net_.layers.size(); ++li) {
      const Layer& l = net_.layers[li];
      if (l.param_count() == 0) continue;
      rng::Stream stream(seed, {rng::kAdaptorInit, conv_index});
      const double base = 1.0 / std::sqrt(static_cast<double>(l.fan_in() ? l.fan_in() : 1));
      const double s = (li == last_conv) ? spec_.init_scale * base : base;
      for (std::size_t i = 0; i < l.weights.numel(); ++i) flat[k++] = s * stream.normal();
      for (std::size_t i = 0; i < l.biases.numel(); ++i) flat[k++] = 0.0;
      ++conv_index;
    }
    return flat;
  }

  /// Applies theta and maps a batch. Pure in (theta, x).
  Tensor adapt(const Tensor& theta, const Tensor& x) const {
    Network net = with_params(theta);
    Tensor out = net.forward(x);
    check_same_shape(x, out, "adapt: network must preserve shape");
    if (spec_.mode == AdaptorMode::kResidual)
      for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += x.data[i];
    clamp(out);
    return out;
  }

  Network with_params(const Tensor& theta) const {
    if (theta.numel() != param_count())
      throw std::invalid_argument("adapt: theta has " + std::to_string(theta.numel()) +
                                  " values, adaptor expects " + std::to_string(param_count()));
    Network net = net_;
    net.set_params(theta);
    return net;
  }

  void clamp(Tensor& t) const {
    if (!spec_.clamp_range) return;
    const auto [lo, hi] = *spec_.clamp_range;
    for (double& v : t.data) v = v < lo ? lo : (v > hi ? hi : v);
  }

 private:
  std::size_t last_param_layer_index() const {
    std::size_t last = 0;
    for (std::size_t li = 0; li < net_.layers.size(); ++li)
      if (net_.layers[li].param_count() > 0) last = li;
    return last;
  }

  AdaptorSpec spec_;
  Network net_;
};

}  // namespace bbta
