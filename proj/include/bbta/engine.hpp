#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbta/adaptor.hpp"
#include "bbta/bench.hpp"
#include "bbta/blackbox.hpp"
#include "bbta/objectives.hpp"
#include "bbta/parallel.hpp"
#include "bbta/pseudo_select.hpp"
#include "bbta/rng.hpp"
#include "bbta/tensor.hpp"
#include "bbta/zoo.hpp"

namespace bbta {

enum class RunMode { kOffline, kOnline };

struct OnlineConfig {
  std::size_t queue_size = 1000;
  std::size_t epochs_per_batch = 10;
};

struct RunConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 256;
  ZooConfig zoo;
  double eta = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  ObjectiveConfig objective;
  double tau = 0.9;
  double rho = 0.9;
  RunMode mode = RunMode::kOffline;
  OnlineConfig online;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool shuffle = true;
  /// Evaluate adapted accuracy every k epochs (0 = never during the run).
  /// Each evaluation queries the model once per test sample and is part
  /// of the documented query accounting.
  std::size_t eval_every = 1;

  OptimState make_optim(std::size_t d) const {
    OptimState s;
    s.eta = eta;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    s.velocity = Tensor({d});
    return s;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;        // offline: epoch; online: batch index
  double objective = 0.0;       // mean pre-step batch objective
  double accuracy = std::nan(""); // NaN when not measured this epoch
  std::uint64_t queries_total = 0;  // cumulative model queries at epoch end
  double seconds = 0.0;         // wall time, reported in the JSON summary only
};

struct RunResult {
  Tensor theta;
  std::vector<EpochMetrics> metrics;
  double final_accuracy = std::nan("");
  std::uint64_t total_queries = 0;
  std::vector<PseudoLabelRecord> records;  // step-1 pseudo-labels
  Selection selection;                     // frozen partition (when selection ran)
};

namespace detail {

struct BatchSlices {
  std::vector<std::size_t> reliable;    // dataset indices
  std::vector<std::size_t> unreliable;  // dataset indices
};

inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed,
                                            std::uint64_t tag, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    rng::Stream stream(seed, {tag, epoch});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[stream.uniform_index(i)]);
  }
  return order;
}

inline std::vector<double> prob_row(const Tensor& p, std::size_t row) {
  std::vector<double> v(p.shape[1]);
  for (std::size_t k = 0; k < p.shape[1]; ++k) v[k] = p.at2(row, k);
  return v;
}

}  // namespace detail

/**
 * One combined zeroth-order step on a mini-batch.
 *
 * The cross-entropy term decomposes per sample, so each reliable member
 * gets its own multi-point estimate with fresh directions; the mutual
 * information term couples the batch, so it is probed at batch level:
 * every direction re-adapts and re-queries all unreliable members.
 *
 * Model queries consumed: (q+1)*l_r for the CE estimates plus
 * (q+1)*l_u for the MI estimates, i.e. (q+1)*l per full batch.
 * The returned delta estimates the gradient of
 *   -MI(unreliable) + alpha * mean CE(reliable) [+ beta * mean L1].
 */
class SodaStepper {
 public:
  SodaStepper(const BlackBoxModel& model, const DataAdaptor& adaptor, const Tensor& images,
              const std::vector<std::size_t>& pseudo_labels, const RunConfig& cfg)
      : model_(model), adaptor_(adaptor), images_(images), pseudo_labels_(pseudo_labels),
        cfg_(cfg) {}

  struct StepOutcome {
    GradEstimate combined;
    double objective = 0.0;  // value at theta before the step
    std::uint64_t queries = 0;
  };

  StepOutcome estimate(const Tensor& theta, const detail::BatchSlices& slices,
                       std::uint64_t epoch, std::uint64_t batch_index,
                       std::uint64_t ce_tag = rng::kCeDirections,
                       std::uint64_t mi_tag = rng::kMiDirections) const {
    if (slices.reliable.empty() && slices.unreliable.empty())
      throw std::invalid_argument("soda step: empty batch");
    StepOutcome out;
    out.combined.delta = Tensor({theta.numel()});

    double ce_baseline = 0.0;
    if (!slices.reliable.empty()) {
      const std::size_t lr = slices.reliable.size();
      std::vector<GradEstimate> parts(lr);
      parallel_for(lr, cfg_.workers, [&](std::size_t i) {
        const std::size_t sample = slices.reliable[i];
        const Tensor x = images_.row(sample);
        const std::size_t label = pseudo_labels_[sample];
        Objective obj = [&, label](const Tensor& th) {
          const Tensor p = model_.query(adaptor_.adapt(th, x));
          return cross_entropy(label, detail::prob_row(p, 0), cfg_.objective.log_floor);
        };
        parts[i] = multi_point_estimate(obj, theta, cfg_.zoo,
                                        rng::Stream(cfg_.seed, {ce_tag, epoch, batch_index, sample}));
      });
      const double alpha_over_l = cfg_.objective.alpha / static_cast<double>(lr);
      for (const GradEstimate& part : parts) {
        axpy(alpha_over_l, part.delta, out.combined.delta);
        ce_baseline += part.baseline / static_cast<double>(lr);
        out.combined.evaluations += part.evaluations;
        out.queries += part.evaluations;  // one sample per evaluation
      }
    }

    double mi_baseline = 0.0;
    if (!slices.unreliable.empty()) {
      const Tensor xu = images_.gather_rows(slices.unreliable);
      const std::size_t lu = slices.unreliable.size();
      // The optional L1 regularizer rides along in this batch-level
      // probe (it costs no model queries); a batch with no unreliable
      // members skips it for that step.
      Objective obj = [&](const Tensor& th) {
        const Tensor adapted = adaptor_.adapt(th, xu);
        const Tensor p = model_.query(adapted);
        std::vector<std::vector<double>> rows(lu);
        for (std::size_t i = 0; i < lu; ++i) rows[i] = detail::prob_row(p, i);
        double value = -mutual_information(rows, cfg_.objective.log_floor);
        if (cfg_.objective.beta > 0.0)
          value += cfg_.objective.beta * l1_perturbation(adapted, xu);
        return value;
      };
      const GradEstimate mi = multi_point_estimate(
          obj, theta, cfg_.zoo, rng::Stream(cfg_.seed, {mi_tag, epoch, batch_index}),
          cfg_.workers);
      axpy(1.0, mi.delta, out.combined.delta);
      mi_baseline = mi.baseline;
      out.combined.evaluations += mi.evaluations;
      out.queries += mi.evaluations * lu;
    }

    out.objective = mi_baseline + cfg_.objective.alpha * ce_baseline;
    out.combined.baseline = out.objective;
    return out;
  }

 private:
  const BlackBoxModel& model_;
  const DataAdaptor& adaptor_;
  const Tensor& images_;
  const std::vector<std::size_t>& pseudo_labels_;
  const RunConfig& cfg_;
};

/**
 * Offline adaptation. Step 1 pseudo-labels the whole test set once on
 * un-adapted data and fixes the reliable/unreliable partition; Step 2
 * runs ZO-SGD over shuffled mini-batches for the configured epochs.
 *
 * Query accounting (asserted after every epoch):
 *   step 1: n;  each epoch: (q+1)*n, plus n per accuracy evaluation.
 */
inline RunResult soda_offline(const BlackBoxModel& model, const DataAdaptor& adaptor,
                              const bench::ShapeDataset& test, const RunConfig& cfg,
                              std::optional<Tensor> theta0 = std::nullopt) {
  const std::size_t n = test.size();
  if (n == 0) throw std::invalid_argument("soda_offline: empty test set");
  const auto t_start = std::chrono::steady_clock::now();
  const std::uint64_t count0 = model.query_count();

  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<std::size_t> labels(n);
  for (const auto& r : records) labels[r.sample_index] = r.class_id;
  SelectionConfig sel_cfg;
  sel_cfg.tau = cfg.tau;
  sel_cfg.rho = cfg.rho;
  sel_cfg.num_classes = model.num_classes();
  sel_cfg.n = n;
  const Selection selection = select_reliable(records, sel_cfg);

  Tensor theta = theta0 ? *theta0 : adaptor.init_params(cfg.seed);
  OptimState optim = cfg.make_optim(theta.numel());
  SodaStepper stepper(model, adaptor, test.images, labels, cfg);

  RunResult result;
  std::uint64_t expected = n;  // step 1
  if (model.query_count() - count0 != expected)
    throw std::logic_error("soda_offline: query accounting mismatch after step 1");

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        detail::epoch_order(n, cfg.shuffle, cfg.seed, rng::kEpochShuffle, epoch);
    double objective_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, n);
      detail::BatchSlices slices;
      for (std::size_t i = start; i < end; ++i)
        (selection.is_reliable[order[i]] ? slices.reliable : slices.unreliable)
            .push_back(order[i]);
      const SodaStepper::StepOutcome outcome = stepper.estimate(theta, slices, epoch, batches);
      theta = zo_sgd_step(optim, theta, outcome.combined);
      objective_sum += outcome.objective;
      expected += outcome.queries;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.objective = objective_sum / static_cast<double>(batches);
    if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
      m.accuracy = bench::evaluate(model, &adaptor, &theta, test);
      expected += n;
    }
    if (model.query_count() - count0 != expected)
      throw std::logic_error("soda_offline: query accounting mismatch at epoch " +
                             std::to_string(epoch) + ": counted " +
                             std::to_string(model.query_count() - count0) + ", expected " +
                             std::to_string(expected));
    m.queries_total = model.query_count() - count0;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics.push_back(m);
  }

  result.theta = std::move(theta);
  result.final_accuracy = bench::evaluate(model, &adaptor, &result.theta, test);
  result.total_queries = model.query_count() - count0;
  result.records = records;
  result.selection = selection;
  return result;
}

struct OnlineResult {
  Tensor theta;
  std::vector<EpochMetrics> metrics;      // one row per stream batch
  std::vector<std::size_t> predictions;   // emitted per-sample predictions
  double stream_accuracy = std::nan("");  // matches labels when available
  std::uint64_t total_queries = 0;
};

/**
 * Online adaptation over a stream of mini-batches. For each incoming
 * batch: pseudo-label it, push above-threshold records into the bounded
 * queue, then train for epochs_per_batch epochs on the union of the
 * queue snapshot (reliable, with stored labels) and the below-threshold
 * members of the batch (unreliable). Predictions for the batch are
 * emitted through the adaptor after its adaptation; theta, the optimizer
 * state and the queue persist across batches.
 */
inline OnlineResult soda_online(const BlackBoxModel& model, const DataAdaptor& adaptor,
                                const bench::ShapeDataset& stream, const RunConfig& cfg,
                                const std::function<void(const ReliableQueue&,
                                                         const PseudoLabelRecord&,
                                                         const std::optional<PseudoLabelRecord>&)>&
                                    push_observer = nullptr) {
  const std::size_t n = stream.size();
  if (n == 0) throw std::invalid_argument("soda_online: empty stream");
  const auto t_start = std::chrono::steady_clock::now();
  const std::uint64_t count0 = model.query_count();

  Tensor theta = adaptor.init_params(cfg.seed);
  OptimState optim = cfg.make_optim(theta.numel());
  ReliableQueue queue(cfg.online.queue_size, model.num_classes());

  OnlineResult result;
  result.predictions.resize(n);
  std::size_t correct = 0;
  std::uint64_t expected = 0;

  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
    const std::size_t end = std::min(start + cfg.batch_size, n);
    std::vector<std::size_t> rows(end - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    const Tensor xb = stream.images.gather_rows(rows);
    const std::vector<PseudoLabelRecord> records = pseudo_label(model, xb);
    expected += rows.size();

    std::vector<std::size_t> below_threshold;
    for (const auto& r : records) {
      if (r.confidence > cfg.tau) {
        const auto evicted = queue.push(r, xb.row(r.sample_index));
        if (push_observer) push_observer(queue, r, evicted);
        if (queue.size() > queue.capacity())
          throw std::logic_error("soda_online: queue exceeded capacity");
      } else {
        below_threshold.push_back(r.sample_index);  // row within xb
      }
    }

    // Small working set: queue snapshot first (reliable), then the
    // below-threshold members of this batch (unreliable).
    const ReliableQueue::Snapshot snap = queue.snapshot();
    const std::size_t n_rel = snap.labels.size();
    const std::size_t n_unrel = below_threshold.size();
    const std::size_t n_small = n_rel + n_unrel;
    std::vector<std::size_t> shape = stream.images.shape;
    shape[0] = n_small;
    Tensor small(std::move(shape));
    std::vector<std::size_t> small_labels(n_small, 0);
    const std::size_t sample_elems = small.numel() / std::max<std::size_t>(n_small, 1);
    for (std::size_t i = 0; i < n_rel; ++i) {
      std::copy(snap.images.data.begin() + i * sample_elems,
                snap.images.data.begin() + (i + 1) * sample_elems,
                small.data.begin() + i * sample_elems);
      small_labels[i] = snap.labels[i];
    }
    for (std::size_t i = 0; i < n_unrel; ++i) {
      const std::size_t src = below_threshold[i];
      std::copy(xb.data.begin() + src * sample_elems, xb.data.begin() + (src + 1) * sample_elems,
                small.data.begin() + (n_rel + i) * sample_elems);
    }

    SodaStepper stepper(model, adaptor, small, small_labels, cfg);
    double objective_last = 0.0;
    if (n_small > 0) {
      for (std::size_t epoch = 1; epoch <= cfg.online.epochs_per_batch; ++epoch) {
        const std::uint64_t shuffle_key = batch_index * 1000003ull + epoch;
        const std::vector<std::size_t> order =
            detail::epoch_order(n_small, cfg.shuffle, cfg.seed, rng::kOnlineShuffle, shuffle_key);
        double objective_sum = 0.0;
        std::size_t inner_batches = 0;
        for (std::size_t s = 0; s < n_small; s += cfg.batch_size) {
          const std::size_t e = std::min(s + cfg.batch_size, n_small);
          detail::BatchSlices slices;
          for (std::size_t i = s; i < e; ++i)
            (order[i] < n_rel ? slices.reliable : slices.unreliable).push_back(order[i]);
          if (slices.reliable.empty() && slices.unreliable.empty()) continue;
          const SodaStepper::StepOutcome outcome =
              stepper.estimate(theta, slices, shuffle_key, inner_batches,
                               rng::kOnlineCeDirections, rng::kOnlineMiDirections);
          theta = zo_sgd_step(optim, theta, outcome.combined);
          objective_sum += outcome.objective;
          expected += outcome.queries;
          ++inner_batches;
        }
        objective_last = objective_sum / static_cast<double>(std::max<std::size_t>(inner_batches, 1));
      }
    }

    // Inference for this batch through the current adaptor.
    const Tensor p = model.query(adaptor.adapt(theta, xb));
    expected += rows.size();
    for (std::size_t b = 0; b < rows.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < p.shape[1]; ++k)
        if (p.at2(b, k) > p.at2(b, best)) best = k;
      result.predictions[rows[b]] = best;
      if (!stream.labels.empty() && best == stream.labels[rows[b]]) ++correct;
    }

    if (model.query_count() - count0 != expected)
      throw std::logic_error("soda_online: query accounting mismatch at batch " +
                             std::to_string(batch_index));
    EpochMetrics m;
    m.epoch = batch_index;
    m.objective = objective_last;
    m.accuracy = stream.labels.empty()
                     ? std::nan("")
                     : static_cast<double>(correct) / static_cast<double>(end);
    m.queries_total = model.query_count() - count0;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics.push_back(m);
  }

  result.theta = std::move(theta);
  if (!stream.labels.empty())
    result.stream_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  result.total_queries = model.query_count() - count0;
  return result;
}

/**
 * DA-PL: the same adaptor trained with cross-entropy against all initial
 * pseudo-labels — no selection, no mutual-information term. Serves as the
 * non-robust reference. DA-Direct is this path with a direct-mode adaptor.
 */
inline RunResult baseline_da_pl(const BlackBoxModel& model, const DataAdaptor& adaptor,
                                const bench::ShapeDataset& test, const RunConfig& cfg) {
  const std::size_t n = test.size();
  if (n == 0) throw std::invalid_argument("baseline_da_pl: empty test set");
  const auto t_start = std::chrono::steady_clock::now();
  const std::uint64_t count0 = model.query_count();
  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<std::size_t> labels(n);
  for (const auto& r : records) labels[r.sample_index] = r.class_id;

  Tensor theta = adaptor.init_params(cfg.seed);
  OptimState optim = cfg.make_optim(theta.numel());
  std::uint64_t expected = n;
  RunResult result;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        detail::epoch_order(n, cfg.shuffle, cfg.seed, rng::kEpochShuffle, epoch);
    double objective_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, n);
      const std::size_t l = end - start;
      std::vector<GradEstimate> parts(l);
      std::vector<std::size_t> samples(order.begin() + start, order.begin() + end);
      parallel_for(l, cfg.workers, [&](std::size_t i) {
        const std::size_t sample = samples[i];
        const Tensor x = test.images.row(sample);
        const std::size_t label = labels[sample];
        Objective obj = [&, label](const Tensor& th) {
          const Tensor p = model.query(adaptor.adapt(th, x));
          return cross_entropy(label, detail::prob_row(p, 0), cfg.objective.log_floor);
        };
        parts[i] = multi_point_estimate(
            obj, theta, cfg.zoo,
            rng::Stream(cfg.seed, {rng::kCeDirections, epoch, batches, sample}));
      });
      GradEstimate mean;
      mean.delta = Tensor({theta.numel()});
      for (const GradEstimate& part : parts) {
        axpy(1.0 / static_cast<double>(l), part.delta, mean.delta);
        mean.baseline += part.baseline / static_cast<double>(l);
        expected += part.evaluations;
      }
      theta = zo_sgd_step(optim, theta, mean);
      objective_sum += mean.baseline;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.objective = objective_sum / static_cast<double>(batches);
    if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
      m.accuracy = bench::evaluate(model, &adaptor, &theta, test);
      expected += n;
    }
    if (model.query_count() - count0 != expected)
      throw std::logic_error("baseline_da_pl: query accounting mismatch at epoch " +
                             std::to_string(epoch));
    m.queries_total = model.query_count() - count0;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics.push_back(m);
  }
  result.theta = std::move(theta);
  result.final_accuracy = bench::evaluate(model, &adaptor, &result.theta, test);
  result.total_queries = model.query_count() - count0;
  result.records = records;
  return result;
}

inline RunResult baseline_da_direct(const BlackBoxModel& model, const DataAdaptor& adaptor,
                                    const bench::ShapeDataset& test, const RunConfig& cfg) {
  if (adaptor.mode() != AdaptorMode::kDirect)
    throw std::invalid_argument("baseline_da_direct: adaptor must be in direct mode");
  return baseline_da_pl(model, adaptor, test, cfg);
}

struct PgdResult {
  Tensor adapted;  // whole test set after the signed-step updates
  std::vector<EpochMetrics> metrics;
  double final_accuracy = std::nan("");
  std::uint64_t total_queries = 0;
};

/**
 * DA-PGD: no adaptor network. A per-batch pixel perturbation is updated
 * by a signed step on the zeroth-order estimate of the combined
 * objective w.r.t. the pixels themselves. The direction dimension is the
 * batch pixel count, far beyond what the estimator can resolve — kept as
 * the cautionary baseline it is.
 */
inline PgdResult baseline_da_pgd(const BlackBoxModel& model, const bench::ShapeDataset& test,
                                 const RunConfig& cfg, double step_size = 1e-3) {
  const std::size_t n = test.size();
  if (n == 0) throw std::invalid_argument("baseline_da_pgd: empty test set");
  const auto t_start = std::chrono::steady_clock::now();
  const std::uint64_t count0 = model.query_count();
  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<std::size_t> labels(n);
  for (const auto& r : records) labels[r.sample_index] = r.class_id;
  SelectionConfig sel_cfg;
  sel_cfg.tau = cfg.tau;
  sel_cfg.rho = cfg.rho;
  sel_cfg.num_classes = model.num_classes();
  sel_cfg.n = n;
  const Selection selection = select_reliable(records, sel_cfg);

  Tensor perturbation(test.images.shape);
  std::uint64_t expected = n;
  PgdResult result;
  const std::size_t sample_elems = test.images.numel() / n;

  auto batch_objective = [&](const std::vector<std::size_t>& rows, const Tensor& pert_slice,
                             const Tensor& x_slice) {
    Tensor adapted = x_slice;
    for (std::size_t i = 0; i < adapted.numel(); ++i) {
      adapted.data[i] = std::clamp(adapted.data[i] + pert_slice.data[i], 0.0, 1.0);
    }
    const Tensor p = model.query(adapted);
    std::vector<std::vector<double>> unreliable_rows;
    std::vector<std::vector<double>> reliable_rows;
    std::vector<std::size_t> reliable_labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (selection.is_reliable[rows[i]]) {
        reliable_rows.push_back(detail::prob_row(p, i));
        reliable_labels.push_back(labels[rows[i]]);
      } else {
        unreliable_rows.push_back(detail::prob_row(p, i));
      }
    }
    double value = 0.0;
    if (!unreliable_rows.empty())
      value -= mutual_information(unreliable_rows, cfg.objective.log_floor);
    if (!reliable_rows.empty()) {
      double ce = 0.0;
      for (std::size_t i = 0; i < reliable_rows.size(); ++i)
        ce += cross_entropy(reliable_labels[i], reliable_rows[i], cfg.objective.log_floor);
      value += cfg.objective.alpha * ce / static_cast<double>(reliable_rows.size());
    }
    return value;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double objective_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, n);
      std::vector<std::size_t> rows(end - start);
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
      const Tensor x_slice = test.images.gather_rows(rows);
      Tensor pert_slice = perturbation.gather_rows(rows);
      Objective obj = [&](const Tensor& pert) { return batch_objective(rows, pert, x_slice); };
      const GradEstimate est = multi_point_estimate(
          obj, pert_slice, cfg.zoo,
          rng::Stream(cfg.seed, {rng::kPgdDirections, epoch, batches}), cfg.workers);
      expected += est.evaluations * rows.size();
      objective_sum += est.baseline;
      for (std::size_t i = 0; i < pert_slice.numel(); ++i) {
        const double g = est.delta[i];
        if (g > 0.0) pert_slice.data[i] -= step_size;
        else if (g < 0.0) pert_slice.data[i] += step_size;
        // Projection: keep the adapted iterate inside the pixel box.
        pert_slice.data[i] =
            std::clamp(x_slice.data[i] + pert_slice.data[i], 0.0, 1.0) - x_slice.data[i];
      }
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(pert_slice.data.begin() + i * sample_elems,
                  pert_slice.data.begin() + (i + 1) * sample_elems,
                  perturbation.data.begin() + rows[i] * sample_elems);
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.objective = objective_sum / static_cast<double>(batches);
    if (model.query_count() - count0 != expected)
      throw std::logic_error("baseline_da_pgd: query accounting mismatch at epoch " +
                             std::to_string(epoch));
    m.queries_total = model.query_count() - count0;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics.push_back(m);
  }

  result.adapted = test.images;
  for (std::size_t i = 0; i < result.adapted.numel(); ++i)
    result.adapted.data[i] = std::clamp(result.adapted.data[i] + perturbation.data[i], 0.0, 1.0);
  {
    const Tensor p = model.query(result.adapted);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < p.shape[1]; ++k)
        if (p.at2(b, k) > p.at2(b, best)) best = k;
      if (best == test.labels[b]) ++correct;
    }
    result.final_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  result.total_queries = model.query_count() - count0;
  return result;
}

/**
 * DA-ZOO-Input: the zeroth-order variable is the adapted data itself.
 * Pixel-space gradients of the combined objective are estimated per
 * reliable sample (CE) and jointly over the unreliable members (MI),
 * then pulled back to adaptor parameters with the chain rule through
 * the adaptor network. Clamped pixels pass no gradient.
 */
inline RunResult baseline_da_zoo_input(const BlackBoxModel& model, const DataAdaptor& adaptor,
                                       const bench::ShapeDataset& test, const RunConfig& cfg) {
  if (adaptor.mode() != AdaptorMode::kResidual)
    throw std::invalid_argument("baseline_da_zoo_input: residual adaptor expected");
  const std::size_t n = test.size();
  if (n == 0) throw std::invalid_argument("baseline_da_zoo_input: empty test set");
  const auto t_start = std::chrono::steady_clock::now();
  const std::uint64_t count0 = model.query_count();
  const std::vector<PseudoLabelRecord> records = pseudo_label(model, test.images);
  std::vector<std::size_t> labels(n);
  for (const auto& r : records) labels[r.sample_index] = r.class_id;
  SelectionConfig sel_cfg;
  sel_cfg.tau = cfg.tau;
  sel_cfg.rho = cfg.rho;
  sel_cfg.num_classes = model.num_classes();
  sel_cfg.n = n;
  const Selection selection = select_reliable(records, sel_cfg);

  Tensor theta = adaptor.init_params(cfg.seed);
  OptimState optim = cfg.make_optim(theta.numel());
  std::uint64_t expected = n;
  RunResult result;
  const auto clamp_range = adaptor.spec().clamp_range;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        detail::epoch_order(n, cfg.shuffle, cfg.seed, rng::kEpochShuffle, epoch);
    double objective_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, n);
      detail::BatchSlices slices;
      for (std::size_t i = start; i < end; ++i)
        (selection.is_reliable[order[i]] ? slices.reliable : slices.unreliable)
            .push_back(order[i]);

      // Forward through the adaptor once; the pixel estimates probe
      // around this adapted point.
      const Network net = adaptor.with_params(theta);
      const Tensor xb = test.images.gather_rows(
          [&] {
            std::vector<std::size_t> all = slices.reliable;
            all.insert(all.end(), slices.unreliable.begin(), slices.unreliable.end());
            return all;
          }());
      const Network::Trace trace = net.forward_trace(xb);
      Tensor adapted = trace.output() + xb;
      std::vector<char> pass_mask(adapted.numel(), 1);
      if (clamp_range) {
        for (std::size_t i = 0; i < adapted.numel(); ++i) {
          if (adapted.data[i] < clamp_range->first) {
            adapted.data[i] = clamp_range->first;
            pass_mask[i] = 0;
          } else if (adapted.data[i] > clamp_range->second) {
            adapted.data[i] = clamp_range->second;
            pass_mask[i] = 0;
          }
        }
      }
      const std::size_t lr = slices.reliable.size();
      const std::size_t lu = slices.unreliable.size();
      const std::size_t sample_elems = adapted.numel() / (lr + lu);
      Tensor pixel_grad(adapted.shape);
      double ce_baseline = 0.0, mi_baseline = 0.0;

      // CE part: per-sample pixel directions.
      if (lr > 0) {
        std::vector<GradEstimate> parts(lr);
        parallel_for(lr, cfg.workers, [&](std::size_t i) {
          const std::size_t label = labels[slices.reliable[i]];
          Tensor x_adapted = adapted.row(i);
          Objective obj = [&, label](const Tensor& pix) {
            const Tensor p = model.query(pix);
            return cross_entropy(label, detail::prob_row(p, 0), cfg.objective.log_floor);
          };
          parts[i] = multi_point_estimate(
              obj, x_adapted, cfg.zoo,
              rng::Stream(cfg.seed,
                          {rng::kPixelCeDirections, epoch, batches, slices.reliable[i]}));
        });
        for (std::size_t i = 0; i < lr; ++i) {
          const double scale = cfg.objective.alpha / static_cast<double>(lr);
          for (std::size_t k = 0; k < sample_elems; ++k)
            pixel_grad.data[i * sample_elems + k] += scale * parts[i].delta[k];
          ce_baseline += parts[i].baseline / static_cast<double>(lr);
          expected += parts[i].evaluations;
        }
      }

      // MI part: joint directions over the unreliable members' pixels.
      if (lu > 0) {
        std::vector<std::size_t> urows(lu);
        for (std::size_t i = 0; i < lu; ++i) urows[i] = lr + i;
        const Tensor xu_adapted = adapted.gather_rows(urows);
        Objective obj = [&](const Tensor& pix) {
          const Tensor p = model.query(pix);
          std::vector<std::vector<double>> rows(lu);
          for (std::size_t i = 0; i < lu; ++i) rows[i] = detail::prob_row(p, i);
          return -mutual_information(rows, cfg.objective.log_floor);
        };
        const GradEstimate mi = multi_point_estimate(
            obj, xu_adapted, cfg.zoo,
            rng::Stream(cfg.seed, {rng::kPixelMiDirections, epoch, batches}), cfg.workers);
        for (std::size_t i = 0; i < lu; ++i)
          for (std::size_t k = 0; k < sample_elems; ++k)
            pixel_grad.data[(lr + i) * sample_elems + k] += mi.delta[i * sample_elems + k];
        mi_baseline = mi.baseline;
        expected += mi.evaluations * lu;
      }

      for (std::size_t i = 0; i < pixel_grad.numel(); ++i)
        if (!pass_mask[i]) pixel_grad.data[i] = 0.0;

      // Chain rule: residual mode means d(adapted)/d(theta) is the
      // network Jacobian, so the upstream is the pixel gradient.
      const Network::Gradients grads = net.backward(trace, pixel_grad);
      GradEstimate combined;
      combined.delta = grads.params;
      combined.baseline = mi_baseline + cfg.objective.alpha * ce_baseline;
      theta = zo_sgd_step(optim, theta, combined);
      objective_sum += combined.baseline;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.objective = objective_sum / static_cast<double>(batches);
    if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
      m.accuracy = bench::evaluate(model, &adaptor, &theta, test);
      expected += n;
    }
    if (model.query_count() - count0 != expected)
      throw std::logic_error("baseline_da_zoo_input: query accounting mismatch at epoch " +
                             std::to_string(epoch));
    m.queries_total = model.query_count() - count0;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics.push_back(m);
  }
  result.theta = std::move(theta);
  result.final_accuracy = bench::evaluate(model, &adaptor, &result.theta, test);
  result.total_queries = model.query_count() - count0;
  result.records = records;
  result.selection = selection;
  return result;
}

}  // namespace bbta
