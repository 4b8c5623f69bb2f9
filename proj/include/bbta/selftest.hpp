#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "bbta/adaptor.hpp"
#include "bbta/layers.hpp"
#include "bbta/objectives.hpp"
#include "bbta/pseudo_select.hpp"
#include "bbta/rng.hpp"
#include "bbta/zoo.hpp"

// Invariant suites shared by the `selftest` command and the test
// binaries. Each check is self-contained and seeded, so a failure
// reproduces exactly.

namespace bbta::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::vector<double> random_distribution(rng::Stream& stream, std::size_t c,
                                               bool allow_zeros = false) {
  std::vector<double> p(c);
  double sum = 0.0;
  for (double& v : p) {
    v = allow_zeros && stream.uniform() < 0.2 ? 0.0 : stream.uniform();
    sum += v;
  }
  if (sum == 0.0) {
    p[0] = 1.0;
    sum = 1.0;
  }
  for (double& v : p) v /= sum;
  return p;
}

/// |lhs - rhs| <= 1e-9 for the noisy-label KL split over random pairs.
inline CheckResult check_kl_decomposition(std::size_t pairs = 1000, std::uint64_t seed = 42) {
  rng::Stream stream(seed, {901});
  double worst = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t c = 2 + stream.uniform_index(9);  // 2..10 classes
    const std::vector<double> noisy = random_distribution(stream, c, true);
    const std::vector<double> pred = random_distribution(stream, c);
    const std::size_t clean_class = stream.uniform_index(c);
    NoisyLabel label;
    label.clean.assign(c, 0.0);
    label.clean[clean_class] = 1.0;
    label.disturbance.resize(c);
    for (std::size_t k = 0; k < c; ++k) label.disturbance[k] = noisy[k] - label.clean[k];
    const auto [lhs, rhs] = kl_decomposition_check(label, pred);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  std::ostringstream os;
  os << "max |lhs-rhs| = " << worst << " over " << pairs << " pairs";
  return {"kl_decomposition_identity", worst <= 1e-9, os.str()};
}

/// MI stays in [-eps, log C + eps], is exactly 0 on identical rows;
/// KL is nonnegative and 0 only at equality.
inline CheckResult check_loss_bounds(std::size_t batches = 10000, std::uint64_t seed = 43) {
  rng::Stream stream(seed, {902});
  bool ok = true;
  std::string detail = "all bounds held";
  for (std::size_t i = 0; i < batches && ok; ++i) {
    const std::size_t c = 2 + stream.uniform_index(9);
    const std::size_t n = 1 + stream.uniform_index(16);
    std::vector<std::vector<double>> rows;
    rows.reserve(n);
    for (std::size_t r = 0; r < n; ++r) rows.push_back(random_distribution(stream, c, true));
    const double floor = 1e-12;
    const double eps = static_cast<double>(c) * std::abs(std::log(floor)) * floor;
    const double mi = mutual_information(rows, floor);
    if (!(mi >= -eps && mi <= std::log(static_cast<double>(c)) + eps)) {
      ok = false;
      detail = "MI out of bounds: " + std::to_string(mi) + " for C=" + std::to_string(c);
      break;
    }
    std::vector<std::vector<double>> identical(n, rows[0]);
    if (mutual_information(identical, floor) != 0.0) {
      ok = false;
      detail = "MI not exactly zero on identical rows";
      break;
    }
    const std::vector<double> target = random_distribution(stream, c);
    const std::vector<double> pred = random_distribution(stream, c);
    if (kl_div(target, target) != 0.0) {
      ok = false;
      detail = "KL(p||p) != 0";
      break;
    }
    const double kl = kl_div(target, pred);
    if (kl < 0.0) {
      ok = false;
      detail = "negative KL: " + std::to_string(kl);
      break;
    }
    double l1 = 0.0;
    for (std::size_t k = 0; k < c; ++k) l1 += std::abs(target[k] - pred[k]);
    if (l1 > 1e-6 && kl <= 0.0) {
      ok = false;
      detail = "KL zero for distinct distributions";
      break;
    }
  }
  return {"loss_bounds", ok, detail};
}

/// select_reliable against an independent sort-and-truncate oracle,
/// plus the partition / strict-threshold / cap properties.
inline CheckResult check_selection(std::size_t rounds = 200, std::uint64_t seed = 44) {
  rng::Stream stream(seed, {903});
  for (std::size_t round = 0; round < rounds; ++round) {
    SelectionConfig cfg;
    cfg.num_classes = 2 + stream.uniform_index(9);
    cfg.n = cfg.num_classes + stream.uniform_index(400);
    cfg.tau = stream.uniform();
    cfg.rho = 0.99 * stream.uniform();
    std::vector<PseudoLabelRecord> records(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
      records[i].sample_index = i;
      records[i].class_id = stream.uniform_index(cfg.num_classes);
      // Coarse confidences make threshold and ordering ties common.
      records[i].confidence = stream.uniform_index(21) / 20.0;
    }
    const Selection sel = select_reliable(records, cfg);

    // Oracle: per class, sort (confidence desc, index asc), truncate.
    std::vector<char> oracle(cfg.n, 0);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      std::vector<std::pair<double, std::size_t>> bucket;
      for (const auto& r : records)
        if (r.class_id == c && r.confidence > cfg.tau) bucket.push_back({-r.confidence, r.sample_index});
      std::sort(bucket.begin(), bucket.end());
      for (std::size_t i = 0; i < std::min(cfg.per_class_cap(), bucket.size()); ++i)
        oracle[bucket[i].second] = 1;
    }
    for (std::size_t i = 0; i < cfg.n; ++i)
      if (oracle[i] != sel.is_reliable[i])
        return {"selection_oracle", false,
                "mismatch vs oracle at sample " + std::to_string(i) + " (round " +
                    std::to_string(round) + ")"};

    if (sel.reliable.size() + sel.unreliable.size() != cfg.n)
      return {"selection_oracle", false, "partition sizes do not cover n"};
    std::vector<std::size_t> class_counts(cfg.num_classes, 0);
    for (std::size_t i : sel.reliable) {
      if (!(records[i].confidence > cfg.tau))
        return {"selection_oracle", false, "selected record at or below tau"};
      ++class_counts[records[i].class_id];
    }
    for (std::size_t c = 0; c < cfg.num_classes; ++c)
      if (class_counts[c] > cfg.per_class_cap())
        return {"selection_oracle", false, "class cap exceeded"};
  }
  return {"selection_oracle", true,
          std::to_string(rounds) + " randomized rounds matched the oracle"};
}

/// ReliableQueue against a brute-force sorted-list oracle over random
/// push sequences; checks size, per-class caps and min-eviction.
inline CheckResult check_queue(std::size_t rounds = 50, std::uint64_t seed = 45) {
  rng::Stream stream(seed, {904});
  for (std::size_t round = 0; round < rounds; ++round) {
    const std::size_t c = 2 + stream.uniform_index(6);
    const std::size_t capacity = c * (1 + stream.uniform_index(8));
    ReliableQueue queue(capacity, c);
    // Oracle per class: vector of (confidence, sequence) sorted desc/asc.
    std::vector<std::vector<std::pair<double, std::size_t>>> oracle(c);
    const std::size_t pushes = 40 + stream.uniform_index(300);
    for (std::size_t p = 0; p < pushes; ++p) {
      PseudoLabelRecord r;
      r.sample_index = p;
      r.class_id = stream.uniform_index(c);
      r.confidence = stream.uniform_index(11) / 10.0;
      Tensor data({1, 1});
      data[0] = static_cast<double>(p);
      const auto evicted = queue.push(r, data);

      auto& bucket = oracle[r.class_id];
      bucket.push_back({r.confidence, p});
      std::sort(bucket.begin(), bucket.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      std::optional<std::size_t> oracle_evicted;
      if (bucket.size() > queue.per_class_cap()) {
        oracle_evicted = bucket.back().second;
        bucket.pop_back();
      }
      if (oracle_evicted.has_value() != evicted.has_value())
        return {"queue_oracle", false, "eviction presence mismatch at push " + std::to_string(p)};
      if (evicted && evicted->sample_index != *oracle_evicted)
        return {"queue_oracle", false,
                "evicted " + std::to_string(evicted->sample_index) + ", oracle says " +
                    std::to_string(*oracle_evicted)};
      if (evicted) {
        // The evicted confidence must be minimal within its class.
        for (const auto& [conf, seq] : oracle[evicted->class_id])
          if (conf < evicted->confidence)
            return {"queue_oracle", false, "evicted entry was not the class minimum"};
      }
      if (queue.size() > queue.capacity())
        return {"queue_oracle", false, "queue exceeded capacity"};
      for (std::size_t k = 0; k < c; ++k) {
        if (queue.class_count(k) != oracle[k].size())
          return {"queue_oracle", false, "class count mismatch"};
        if (queue.class_count(k) > queue.per_class_cap())
          return {"queue_oracle", false, "class cap exceeded"};
      }
    }
    // Snapshot order must be (class asc, confidence desc).
    const auto snap = queue.snapshot();
    std::size_t row = 0;
    for (std::size_t k = 0; k < c; ++k)
      for (const auto& [conf, seq] : oracle[k]) {
        if (snap.labels[row] != k || snap.confidences[row] != conf)
          return {"queue_oracle", false, "snapshot order mismatch"};
        ++row;
      }
  }
  return {"queue_oracle", true, std::to_string(rounds) + " randomized rounds matched the oracle"};
}

/// Fixed seed, fixed keys: the estimate is bitwise identical no matter
/// how many workers evaluate the probes.
inline CheckResult check_zoo_determinism(std::uint64_t seed = 46) {
  const std::size_t d = 24;
  Tensor theta({d});
  rng::Stream init(seed, {905});
  for (std::size_t k = 0; k < d; ++k) theta[k] = init.normal();
  Objective f = [](const Tensor& th) {
    double s = 0.0;
    for (std::size_t k = 0; k < th.numel(); ++k) s += std::sin(th[k]) + 0.5 * th[k] * th[k];
    return s;
  };
  ZooConfig cfg;
  cfg.q = 16;
  const GradEstimate a = multi_point_estimate(f, theta, cfg, rng::Stream(seed, {906}), 1);
  const GradEstimate b = multi_point_estimate(f, theta, cfg, rng::Stream(seed, {906}), 8);
  for (std::size_t k = 0; k < d; ++k)
    if (a.delta[k] != b.delta[k])
      return {"zoo_determinism", false, "worker count changed the estimate"};
  if (a.evaluations != cfg.q + 1)
    return {"zoo_determinism", false, "evaluation count != q+1"};
  return {"zoo_determinism", true, "bitwise identical across 1 and 8 workers"};
}

/// Residual adaptor with zero parameters is the identity, bitwise.
inline CheckResult check_residual_identity(std::uint64_t seed = 47) {
  AdaptorSpec spec;
  spec.mid_channels = 4;
  DataAdaptor adaptor(spec);
  rng::Stream stream(seed, {907});
  Tensor x({3, 1, 8, 8});
  for (double& v : x.data) v = stream.uniform();
  const Tensor theta({adaptor.param_count()});
  const Tensor adapted = adaptor.adapt(theta, x);
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (adapted.data[i] != x.data[i])
      return {"residual_identity", false, "zero-parameter adaptor changed the input"};
  return {"residual_identity", true, "adapt(0, x) == x bitwise"};
}

/// Analytic backward against central finite differences for every layer
/// kind, through a scalar probe loss sum(upstream * output).
inline CheckResult check_backward_fd(std::uint64_t seed = 48) {
  struct Case {
    std::string name;
    Network net;
    std::vector<std::size_t> input_shape;
  };
  std::vector<Case> cases;
  {
    Network n;
    n.layers.push_back(Layer::dense(5, 4));
    cases.push_back({"dense", n, {3, 5}});
  }
  {
    Network n;
    n.layers.push_back(Layer::conv2d(2, 3, 3, 1, 1));
    cases.push_back({"conv2d_same", n, {2, 2, 5, 5}});
  }
  {
    Network n;
    n.layers.push_back(Layer::conv2d(2, 3, 3, 2, 0));
    cases.push_back({"conv2d_stride2", n, {2, 2, 7, 7}});
  }
  {
    Network n;
    n.layers.push_back(Layer::instance_norm(3));
    cases.push_back({"instance_norm", n, {2, 3, 4, 4}});
  }
  {
    Network n;
    n.layers.push_back(Layer::instance_norm(2, 1e-5, true));
    cases.push_back({"instance_norm_affine", n, {2, 2, 4, 4}});
  }
  {
    Network n;
    n.layers.push_back(Layer::relu());
    cases.push_back({"relu", n, {2, 6}});
  }
  {
    Network n;
    n.layers.push_back(Layer::softmax());
    cases.push_back({"softmax", n, {3, 4}});
  }
  {
    Network n;
    n.layers.push_back(Layer::conv2d(1, 3, 3, 1, 1));
    n.layers.push_back(Layer::instance_norm(3));
    n.layers.push_back(Layer::relu());
    n.layers.push_back(Layer::conv2d(3, 2, 3, 2, 1));
    n.layers.push_back(Layer::dense(2 * 3 * 3, 4));
    n.layers.push_back(Layer::softmax());
    cases.push_back({"full_net", n, {2, 1, 6, 6}});
  }

  const double h = 1e-5, tol = 1e-4;
  rng::Stream stream(seed, {908});
  for (Case& tc : cases) {
    Tensor params({tc.net.param_count()});
    for (std::size_t k = 0; k < params.numel(); ++k) params[k] = 0.5 * stream.normal();
    tc.net.set_params(params);
    Tensor x(tc.input_shape);
    for (double& v : x.data) v = stream.normal();
    const Network::Trace trace = tc.net.forward_trace(x);
    Tensor upstream(trace.output().shape);
    for (double& v : upstream.data) v = stream.normal();
    const Network::Gradients grads = tc.net.backward(trace, upstream);
    auto loss_at = [&](const Tensor& p, const Tensor& input) {
      Network net = tc.net;
      net.set_params(p);
      const Tensor y = net.forward(input);
      double s = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) s += upstream.data[i] * y.data[i];
      return s;
    };
    auto rel_err = [](double fd, double an) {
      return std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    };
    for (std::size_t k = 0; k < params.numel(); ++k) {
      Tensor p = params;
      p[k] = params[k] + h;
      const double fp = loss_at(p, x);
      p[k] = params[k] - h;
      const double fm = loss_at(p, x);
      const double fd = (fp - fm) / (2 * h);
      if (rel_err(fd, grads.params[k]) > tol)
        return {"backward_fd", false,
                tc.name + ": param " + std::to_string(k) + " fd=" + std::to_string(fd) +
                    " analytic=" + std::to_string(grads.params[k])};
    }
    for (std::size_t k = 0; k < x.numel(); ++k) {
      Tensor xi = x;
      xi.data[k] = x.data[k] + h;
      const double fp = loss_at(params, xi);
      xi.data[k] = x.data[k] - h;
      const double fm = loss_at(params, xi);
      const double fd = (fp - fm) / (2 * h);
      if (rel_err(fd, grads.input.data[k]) > tol)
        return {"backward_fd", false,
                tc.name + ": input " + std::to_string(k) + " fd=" + std::to_string(fd) +
                    " analytic=" + std::to_string(grads.input.data[k])};
    }
  }
  return {"backward_fd", true, "all layer kinds within 1e-4 of central differences"};
}

inline std::vector<CheckResult> run_all() {
  return {
      check_kl_decomposition(), check_loss_bounds(),       check_selection(),
      check_queue(),            check_zoo_determinism(),   check_residual_identity(),
      check_backward_fd(),
  };
}

}  // namespace bbta::selftest
