#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "bbta/tensor.hpp"

namespace bbta {

/// Weights of the combined adaptation objective:
///   -MI(unreliable) + alpha * mean CE(reliable) [+ beta * mean L1 perturbation]
struct ObjectiveConfig {
  double alpha = 1e-4;
  double beta = 0.0;        // 0 disables the perturbation regularizer
  double log_floor = 1e-12; // clamp for log arguments
};

namespace detail {

inline double safe_log(double v, double floor) { return std::log(v < floor ? floor : v); }

inline void expect_same_size(std::span<const double> a, std::span<const double> b,
                             const char* what) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch, expected " +
                                std::to_string(a.size()) + " got " + std::to_string(b.size()));
}

}  // namespace detail

/// KL(target || pred) with 0*log(0/x) = 0 and pred clamped at log_floor.
inline double kl_div(std::span<const double> target, std::span<const double> pred,
                     double log_floor = 1e-12) {
  detail::expect_same_size(target, pred, "kl_div");
  double s = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k] <= 0.0) continue;
    s += target[k] * (std::log(target[k]) - detail::safe_log(pred[k], log_floor));
  }
  return s;
}

inline double cross_entropy(std::span<const double> onehot, std::span<const double> pred,
                            double log_floor = 1e-12) {
  detail::expect_same_size(onehot, pred, "cross_entropy");
  double s = 0.0;
  for (std::size_t k = 0; k < onehot.size(); ++k) {
    if (onehot[k] == 0.0) continue;
    s -= onehot[k] * detail::safe_log(pred[k], log_floor);
  }
  return s;
}

inline double cross_entropy(std::size_t label, std::span<const double> pred,
                            double log_floor = 1e-12) {
  if (label >= pred.size()) throw std::invalid_argument("cross_entropy: label out of range");
  return -detail::safe_log(pred[label], log_floor);
}

/// Shannon entropy with the 0*log(0)=0 convention; input must be a
/// valid distribution (used on labels, not on clamped predictions).
inline double entropy(std::span<const double> p) {
  double s = 0.0;
  for (double v : p)
    if (v > 0.0) s -= v * std::log(v);
  return s;
}

/// A pseudo-label written as clean one-hot plus a disturbance vector;
/// clean + disturbance must itself be a valid distribution.
struct NoisyLabel {
  std::vector<double> clean;
  std::vector<double> disturbance;

  std::vector<double> noisy() const {
    if (clean.size() != disturbance.size())
      throw std::invalid_argument("NoisyLabel: clean/disturbance length mismatch");
    std::vector<double> v(clean.size());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = clean[k] + disturbance[k];
    return v;
  }
};

inline void validate_distribution(std::span<const double> p, const char* what,
                                  double tol = 1e-9) {
  double s = 0.0;
  for (double v : p) {
    if (v < 0.0) throw std::invalid_argument(std::string(what) + ": negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > tol)
    throw std::invalid_argument(std::string(what) + ": probabilities sum to " + std::to_string(s));
}

/// Evaluates both sides of the noisy-label KL split
///   KL(y+sigma || p) = -H(y+sigma) + CE(y, p) - sum_k sigma_k log p_k
/// and returns (lhs, rhs). The two agree to rounding for any valid
/// disturbance, which is what the identity test pins down.
inline std::pair<double, double> kl_decomposition_check(const NoisyLabel& label,
                                                        std::span<const double> pred,
                                                        double log_floor = 1e-12) {
  const std::vector<double> noisy = label.noisy();
  validate_distribution(noisy, "kl_decomposition_check: noisy label");
  validate_distribution(pred, "kl_decomposition_check: pred");
  const double lhs = kl_div(noisy, pred, log_floor);
  double disturbance_term = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k)
    disturbance_term += label.disturbance[k] * detail::safe_log(pred[k], log_floor);
  const double rhs =
      -entropy(noisy) + cross_entropy(label.clean, pred, log_floor) - disturbance_term;
  return {lhs, rhs};
}

/// Batch mutual information between inputs and predictions:
///   E_i[sum_k p_ik log p_ik] - sum_k pbar_k log pbar_k,  pbar = batch mean.
/// Computed as mean_i KL(p_i || pbar), which is the same quantity and is
/// exactly zero when all rows are identical (the mean is formed from
/// deviations against row 0, so identical rows reproduce row 0 bitwise).
inline double mutual_information(const std::vector<std::vector<double>>& preds,
                                 double log_floor = 1e-12) {
  if (preds.empty()) throw std::invalid_argument("mutual_information: empty batch");
  const std::size_t c = preds[0].size();
  const double n = static_cast<double>(preds.size());
  std::vector<double> marginal(c);
  for (std::size_t k = 0; k < c; ++k) {
    double dev = 0.0;
    for (const auto& row : preds) {
      if (row.size() != c) throw std::invalid_argument("mutual_information: ragged batch");
      dev += row[k] - preds[0][k];
    }
    marginal[k] = preds[0][k] + dev / n;
  }
  double mi = 0.0;
  for (const auto& row : preds)
    for (std::size_t k = 0; k < c; ++k) {
      if (row[k] <= 0.0) continue;
      mi += row[k] * (detail::safe_log(row[k], log_floor) - detail::safe_log(marginal[k], log_floor));
    }
  return mi / n;
}

/// Mean over samples of the L1 distance between adapted and original.
inline double l1_perturbation(const Tensor& adapted, const Tensor& original) {
  check_same_shape(adapted, original, "l1_perturbation");
  if (adapted.shape.empty() || adapted.shape[0] == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < adapted.numel(); ++i)
    s += std::abs(adapted.data[i] - original.data[i]);
  return s / static_cast<double>(adapted.shape[0]);
}

/// Combined adaptation objective. Either subset may be empty (it then
/// contributes zero); both empty is an error.
inline double soda_objective(const std::vector<std::vector<double>>& preds_reliable,
                             const std::vector<std::size_t>& labels_reliable,
                             const std::vector<std::vector<double>>& preds_unreliable,
                             const ObjectiveConfig& cfg, const Tensor* adapted = nullptr,
                             const Tensor* original = nullptr) {
  if (preds_reliable.empty() && preds_unreliable.empty())
    throw std::invalid_argument("soda_objective: both subsets empty");
  if (preds_reliable.size() != labels_reliable.size())
    throw std::invalid_argument("soda_objective: reliable preds/labels length mismatch");
  double value = 0.0;
  if (!preds_unreliable.empty()) value -= mutual_information(preds_unreliable, cfg.log_floor);
  if (!preds_reliable.empty()) {
    double ce = 0.0;
    for (std::size_t i = 0; i < preds_reliable.size(); ++i)
      ce += cross_entropy(labels_reliable[i], preds_reliable[i], cfg.log_floor);
    value += cfg.alpha * ce / static_cast<double>(preds_reliable.size());
  }
  if (cfg.beta > 0.0) {
    if (adapted == nullptr || original == nullptr)
      throw std::invalid_argument("soda_objective: beta > 0 requires adapted/original tensors");
    value += cfg.beta * l1_perturbation(*adapted, *original);
  }
  return value;
}

}  // namespace bbta
