#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/parallel.hpp"
#include "bbta/rng.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

struct ZooConfig {
  std::size_t q = 5;        // directions per estimate
  double mu = 1e-3;         // smoothing parameter
  std::uint64_t seed = 0;   // root seed for direction streams
  bool antithetic = false;  // off by default: raw standard-normal directions

  void validate() const {
    if (q < 1) throw std::invalid_argument("zoo: q must be >= 1");
    if (!(mu > 0.0)) throw std::invalid_argument("zoo: mu must be > 0");
  }
};

struct GradEstimate {
  Tensor delta;
  std::uint64_t evaluations = 0;  // objective evaluations consumed (q+1 per sample)
  double baseline = 0.0;          // f(theta), reused across the q directions
};

struct EstimationError : std::runtime_error {
  explicit EstimationError(const std::string& msg, std::ptrdiff_t direction = -1)
      : std::runtime_error(msg), direction_index(direction) {}
  std::ptrdiff_t direction_index;  // -1 for the baseline evaluation
};

using Objective = std::function<double(const Tensor&)>;

/// Multi-point gradient estimate
///   delta = 1/(mu q) * sum_j (f(theta + mu u_j) - f(theta)) u_j,
/// u_j standard normal from the given counter-based stream. The baseline
/// f(theta) is evaluated once and shared across all q directions, so one
/// estimate costs exactly q+1 evaluations. Directions are drawn up front
/// in stream order; evaluations may then fan out over `workers` threads
/// and are reduced by direction index, keeping the result independent of
/// scheduling.
inline GradEstimate multi_point_estimate(const Objective& objective, const Tensor& theta,
                                         const ZooConfig& cfg, rng::Stream directions,
                                         std::size_t workers = 1) {
  cfg.validate();
  const std::size_t d = theta.numel();
  const double f0 = objective(theta);
  if (!std::isfinite(f0))
    throw EstimationError("multi_point_estimate: non-finite objective at baseline", -1);

  std::vector<Tensor> dirs(cfg.q, Tensor(theta.shape));
  for (std::size_t j = 0; j < cfg.q; ++j) {
    if (cfg.antithetic && (j % 2 == 1)) {
      for (std::size_t k = 0; k < d; ++k) dirs[j][k] = -dirs[j - 1][k];
    } else {
      for (std::size_t k = 0; k < d; ++k) dirs[j][k] = directions.normal();
    }
  }

  std::vector<double> values(cfg.q);
  parallel_for(cfg.q, workers, [&](std::size_t j) {
    Tensor probe = theta;
    axpy(cfg.mu, dirs[j], probe);
    values[j] = objective(probe);
  });

  GradEstimate est;
  est.delta = Tensor(theta.shape);
  est.baseline = f0;
  est.evaluations = cfg.q + 1;
  const double scale = 1.0 / (cfg.mu * static_cast<double>(cfg.q));
  for (std::size_t j = 0; j < cfg.q; ++j) {
    if (!std::isfinite(values[j]))
      throw EstimationError("multi_point_estimate: non-finite objective along direction " +
                                std::to_string(j),
                            static_cast<std::ptrdiff_t>(j));
    axpy(scale * (values[j] - f0), dirs[j], est.delta);
  }
  return est;
}

/// Mini-batch estimate: the average of per-sample multi-point estimates,
/// each with fresh directions keyed by (base_key, sample index).
inline GradEstimate batch_estimate(const std::vector<Objective>& per_sample_objectives,
                                   const Tensor& theta, const ZooConfig& cfg,
                                   std::uint64_t base_key, std::size_t workers = 1) {
  if (per_sample_objectives.empty())
    throw std::invalid_argument("batch_estimate: empty objective list");
  cfg.validate();
  const std::size_t l = per_sample_objectives.size();
  std::vector<GradEstimate> parts(l);
  parallel_for(l, workers, [&](std::size_t i) {
    parts[i] = multi_point_estimate(per_sample_objectives[i], theta, cfg,
                                    rng::Stream(rng::combine(base_key, i)));
  });
  GradEstimate est;
  est.delta = Tensor(theta.shape);
  for (std::size_t i = 0; i < l; ++i) {
    axpy(1.0 / static_cast<double>(l), parts[i].delta, est.delta);
    est.evaluations += parts[i].evaluations;
    est.baseline += parts[i].baseline / static_cast<double>(l);
  }
  return est;
}

/// SGD-with-momentum state for the zeroth-order update. The velocity
/// form matches classical heavy-ball SGD: weight decay joins the
/// estimated gradient before the momentum accumulation.
struct OptimState {
  double eta = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  Tensor velocity;

  void validate(std::size_t d) const {
    if (!(eta > 0.0)) throw std::invalid_argument("optim: eta must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("optim: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("optim: weight_decay must be >= 0");
    if (velocity.numel() != d)
      throw std::invalid_argument("optim: velocity dimension " +
                                  std::to_string(velocity.numel()) + " != " + std::to_string(d));
  }
};

/// theta <- theta - eta * v,  v <- momentum*v + (delta + weight_decay*theta)
inline Tensor zo_sgd_step(OptimState& state, const Tensor& theta, const GradEstimate& estimate) {
  if (estimate.delta.numel() != theta.numel())
    throw std::invalid_argument("zo_sgd_step: estimate dimension mismatch");
  if (!estimate.delta.all_finite()) throw std::invalid_argument("zo_sgd_step: non-finite delta");
  if (state.velocity.numel() == 0) state.velocity = Tensor({theta.numel()});
  state.validate(theta.numel());
  Tensor next = theta;
  for (std::size_t k = 0; k < theta.numel(); ++k) {
    const double g = estimate.delta[k] + state.weight_decay * theta[k];
    state.velocity[k] = state.momentum * state.velocity[k] + g;
    next[k] = theta[k] - state.eta * state.velocity[k];
  }
  return next;
}

}  // namespace bbta
