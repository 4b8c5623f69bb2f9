#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bbta/adaptor.hpp"
#include "bbta/bench.hpp"
#include "bbta/blackbox.hpp"
#include "bbta/engine.hpp"
#include "bbta/objectives.hpp"
#include "bbta/rng.hpp"
#include "bbta/zoo.hpp"

// Empirical measurement of the zeroth-order gradient estimation error,
// comparing the naive path (noisy-label KL on every sample) against the
// robust split (CE on the confident subset, mutual information on the
// rest). True gradients come from central finite differences over theta,
// which is why the adaptor must stay small here.

namespace bbta {

struct NoiseSpec {
  double flip_rate = 0.4;
  /// When set, flip probability scales with (1 - confidence), mirroring
  /// how prediction errors concentrate on low-confidence samples under
  /// distribution shift. Uniform flips otherwise.
  bool bias_low_confidence = true;
  std::uint64_t seed = 0;
};

struct GradErrorReport {
  std::vector<double> naive_errors;   // per trial, ||estimate - true grad||_2
  std::vector<double> robust_errors;  // per trial
  double naive_mean = 0.0, robust_mean = 0.0;
  double naive_se = 0.0, robust_se = 0.0;
  double diff_mean = 0.0, diff_se = 0.0;  // robust - naive, paired by trial
  std::size_t trials = 0;
  // Component means (diagnostics): per-sample CE error over each subset
  // and the batch MI estimation error.
  double reliable_ce_error = 0.0, unreliable_ce_error = 0.0, mi_error = 0.0;
  std::size_t reliable_count = 0, unreliable_count = 0;

  void finalize() {
    trials = naive_errors.size();
    auto mean_of = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    auto se_of = [](const std::vector<double>& v, double m) {
      if (v.size() < 2) return 0.0;
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size() - 1) /
                       static_cast<double>(v.size()));
    };
    naive_mean = mean_of(naive_errors);
    robust_mean = mean_of(robust_errors);
    naive_se = se_of(naive_errors, naive_mean);
    robust_se = se_of(robust_errors, robust_mean);
    std::vector<double> diff(trials);
    for (std::size_t t = 0; t < trials; ++t) diff[t] = robust_errors[t] - naive_errors[t];
    diff_mean = mean_of(diff);
    diff_se = se_of(diff, diff_mean);
  }
};

namespace detail {

/// Central finite differences of a scalar function of theta.
inline Tensor fd_gradient(const Objective& f, const Tensor& theta, double h = 1e-5) {
  Tensor grad({theta.numel()});
  Tensor probe = theta;
  for (std::size_t k = 0; k < theta.numel(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + h;
    const double fp = f(probe);
    probe[k] = saved - h;
    const double fm = f(probe);
    probe[k] = saved;
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace detail

/**
 * For each of `trials` trials: draw noisy labels at the given flip rate,
 * then measure the L2 gap between the zeroth-order estimate and the true
 * (finite-difference) gradient for
 *   (a) naive:  per-sample KL against the noisy label, all samples;
 *   (b) robust: per-sample CE on the confident subset plus one batch
 *       mutual-information term on the rest.
 * The split uses the confidence threshold alone; the per-class cap is a
 * dataset balancing device and has no role in the per-sample comparison.
 * A per-trial error is the mean per-sample gap (plus the MI gap for the
 * robust path). theta stays fixed at its seeded initialization, so the
 * per-class true gradients can be precomputed once.
 */
inline GradErrorReport grad_error_experiment(const BlackBoxModel& model,
                                             const DataAdaptor& adaptor,
                                             const bench::ShapeDataset& test,
                                             const NoiseSpec& noise, double tau,
                                             const RunConfig& cfg, std::size_t trials) {
  const std::size_t n = test.size();
  const std::size_t num_classes = model.num_classes();
  if (n == 0) throw std::invalid_argument("grad_error_experiment: empty test set");
  if (test.labels.size() != n)
    throw std::invalid_argument("grad_error_experiment: needs true labels");
  const std::size_t d = adaptor.param_count();
  if (d > 200)
    throw std::invalid_argument("grad_error_experiment: adaptor dimension " + std::to_string(d) +
                                " too large for the finite-difference oracle (max 200)");

  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<double> confidence(n);
  for (const auto& r : records) confidence[r.sample_index] = r.confidence;
  std::vector<std::size_t> reliable, unreliable;
  for (std::size_t i = 0; i < n; ++i)
    (confidence[i] > tau ? reliable : unreliable).push_back(i);

  const Tensor theta = adaptor.init_params(cfg.seed);
  const double floor = cfg.objective.log_floor;

  // True per-class CE gradients, one finite-difference sweep per sample:
  // each probe query yields the full probability row, so every class's
  // cross-entropy derivative falls out of the same 2d evaluations.
  std::vector<std::vector<Tensor>> ce_grad(n);
  {
    const double h = 1e-5;
    for (std::size_t i = 0; i < n; ++i) {
      ce_grad[i].assign(num_classes, Tensor({d}));
      const Tensor x = test.images.row(i);
      Tensor probe = theta;
      for (std::size_t k = 0; k < d; ++k) {
        const double saved = probe[k];
        probe[k] = saved + h;
        const Tensor pp = model.query(adaptor.adapt(probe, x));
        probe[k] = saved - h;
        const Tensor pm = model.query(adaptor.adapt(probe, x));
        probe[k] = saved;
        for (std::size_t c = 0; c < num_classes; ++c) {
          const double cep = cross_entropy(c, detail::prob_row(pp, 0), floor);
          const double cem = cross_entropy(c, detail::prob_row(pm, 0), floor);
          ce_grad[i][c][k] = (cep - cem) / (2.0 * h);
        }
      }
    }
  }

  // True gradient of the batch mutual-information term on the
  // unreliable subset (fixed across trials: the split never changes).
  Tensor mi_grad({d});
  if (!unreliable.empty()) {
    const Tensor xu = test.images.gather_rows(unreliable);
    Objective f_mi = [&](const Tensor& th) {
      const Tensor p = model.query(adaptor.adapt(th, xu));
      std::vector<std::vector<double>> rows(unreliable.size());
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = detail::prob_row(p, i);
      return -mutual_information(rows, floor);
    };
    mi_grad = detail::fd_gradient(f_mi, theta);
  }

  GradErrorReport report;
  report.naive_errors.reserve(trials);
  report.robust_errors.reserve(trials);

  double mean_margin = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_margin += 1.0 - confidence[i];
  mean_margin /= static_cast<double>(n);

  for (std::size_t t = 0; t < trials; ++t) {
    rng::Stream flips(noise.seed, {rng::kLabelFlip, t});
    std::vector<std::size_t> noisy(n);
    for (std::size_t i = 0; i < n; ++i) {
      double p_flip = noise.flip_rate;
      if (noise.bias_low_confidence && mean_margin > 0.0)
        p_flip = std::min(1.0, noise.flip_rate * (1.0 - confidence[i]) / mean_margin);
      if (flips.uniform() < p_flip) {
        const std::size_t shift = 1 + flips.uniform_index(num_classes - 1);
        noisy[i] = (test.labels[i] + shift) % num_classes;
      } else {
        noisy[i] = test.labels[i];
      }
    }

    auto sample_estimate = [&](std::size_t i, std::uint64_t arm) {
      const Tensor x = test.images.row(i);
      const std::size_t label = noisy[i];
      // One-hot KL against the noisy label equals CE in value and in
      // every derivative, so both paths share this objective.
      Objective obj = [&, label](const Tensor& th) {
        const Tensor p = model.query(adaptor.adapt(th, x));
        return cross_entropy(label, detail::prob_row(p, 0), floor);
      };
      return multi_point_estimate(obj, theta, cfg.zoo,
                                  rng::Stream(noise.seed, {rng::kTrialDirections, t, arm, i}),
                                  1);
    };

    double naive = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const GradEstimate est = sample_estimate(i, 0);
      const double err = norm2(est.delta - ce_grad[i][noisy[i]]);
      naive += err / static_cast<double>(n);
      (confidence[i] > tau ? report.reliable_ce_error : report.unreliable_ce_error) += err;
    }

    double robust = 0.0;
    if (!reliable.empty()) {
      double ce_err = 0.0;
      for (std::size_t i : reliable) {
        const GradEstimate est = sample_estimate(i, 1);
        ce_err += norm2(est.delta - ce_grad[i][noisy[i]]) / static_cast<double>(reliable.size());
      }
      robust += ce_err;
    }
    if (!unreliable.empty()) {
      const Tensor xu = test.images.gather_rows(unreliable);
      Objective f_mi = [&](const Tensor& th) {
        const Tensor p = model.query(adaptor.adapt(th, xu));
        std::vector<std::vector<double>> rows(unreliable.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = detail::prob_row(p, i);
        return -mutual_information(rows, floor);
      };
      const GradEstimate est = multi_point_estimate(
          f_mi, theta, cfg.zoo, rng::Stream(noise.seed, {rng::kTrialDirections, t, 2}),
          cfg.workers);
      const double err = norm2(est.delta - mi_grad);
      report.mi_error += err;
      robust += err;
    }

    if (!std::isfinite(naive) || !std::isfinite(robust) || naive < 0.0 || robust < 0.0)
      throw std::runtime_error("grad_error_experiment: non-finite or negative trial error");
    report.naive_errors.push_back(naive);
    report.robust_errors.push_back(robust);
  }
  report.reliable_count = reliable.size();
  report.unreliable_count = unreliable.size();
  if (!reliable.empty())
    report.reliable_ce_error /= static_cast<double>(trials * reliable.size());
  if (!unreliable.empty())
    report.unreliable_ce_error /= static_cast<double>(trials * unreliable.size());
  report.mi_error /= static_cast<double>(trials);
  report.finalize();
  return report;
}

/**
 * End-to-end gradient fidelity: cosine similarity between the combined
 * zeroth-order update direction on one batch and the finite-difference
 * gradient of the identical objective (same partition, same weights).
 */
inline double soda_update_fidelity(const BlackBoxModel& model, const DataAdaptor& adaptor,
                                   const bench::ShapeDataset& test, const RunConfig& cfg) {
  const std::size_t n = test.size();
  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<std::size_t> labels(n);
  for (const auto& r : records) labels[r.sample_index] = r.class_id;
  SelectionConfig sel_cfg;
  sel_cfg.tau = cfg.tau;
  sel_cfg.rho = cfg.rho;
  sel_cfg.num_classes = model.num_classes();
  sel_cfg.n = n;
  const Selection selection = select_reliable(records, sel_cfg);

  const Tensor theta = adaptor.init_params(cfg.seed);
  detail::BatchSlices slices;
  slices.reliable = selection.reliable;
  slices.unreliable = selection.unreliable;
  SodaStepper stepper(model, adaptor, test.images, labels, cfg);
  const SodaStepper::StepOutcome outcome = stepper.estimate(theta, slices, 1, 0);

  const double floor = cfg.objective.log_floor;
  Objective combined = [&](const Tensor& th) {
    double value = 0.0;
    if (!slices.unreliable.empty()) {
      const Tensor p = model.query(adaptor.adapt(th, test.images.gather_rows(slices.unreliable)));
      std::vector<std::vector<double>> rows(slices.unreliable.size());
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = detail::prob_row(p, i);
      value -= mutual_information(rows, floor);
    }
    if (!slices.reliable.empty()) {
      const Tensor p = model.query(adaptor.adapt(th, test.images.gather_rows(slices.reliable)));
      double ce = 0.0;
      for (std::size_t i = 0; i < slices.reliable.size(); ++i)
        ce += cross_entropy(labels[slices.reliable[i]], detail::prob_row(p, i), floor);
      value += cfg.objective.alpha * ce / static_cast<double>(slices.reliable.size());
    }
    return value;
  };
  const Tensor fd = detail::fd_gradient(combined, theta);
  return cosine_similarity(outcome.combined.delta, fd);
}

}  // namespace bbta
