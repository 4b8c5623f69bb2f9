#include <doctest.h>

#include <atomic>
#include <cmath>
#include <vector>

#include "bbta/rng.hpp"
#include "bbta/selftest.hpp"
#include "bbta/tensor.hpp"
#include "bbta/zoo.hpp"

using namespace bbta;

namespace {

Tensor random_vector(std::size_t d, rng::Stream& stream) {
  Tensor t({d});
  for (double& v : t.data) v = stream.normal();
  return t;
}

}  // namespace

TEST_CASE("constant objective estimates a zero gradient") {
  ZooConfig cfg;
  cfg.q = 8;
  const Tensor theta = Tensor::full({6}, 1.5);
  const auto est = multi_point_estimate([](const Tensor&) { return 3.25; }, theta, cfg,
                                        rng::Stream(9, {1}));
  for (double v : est.delta.data) CHECK(v == 0.0);
  CHECK(est.baseline == 3.25);
}

TEST_CASE("linear objective: mean of 10000 single-direction estimates recovers the gradient") {
  // Monte-Carlo oracle for E[(a.u)u] = a; relative L2 error budget 5%.
  const std::size_t d = 12;
  rng::Stream setup(10, {1});
  const Tensor a = random_vector(d, setup);
  const Tensor theta = random_vector(d, setup);
  ZooConfig cfg;
  cfg.q = 1;
  Objective linear = [&](const Tensor& th) { return dot(a, th); };
  Tensor mean({d});
  const std::size_t trials = 10000;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto est = multi_point_estimate(linear, theta, cfg, rng::Stream(10, {2, t}));
    axpy(1.0 / static_cast<double>(trials), est.delta, mean);
  }
  CHECK(norm2(mean - a) / norm2(a) <= 0.05);
}

TEST_CASE("quadratic objective: estimate aligns with the analytic gradient") {
  // f = 0.5*||theta||^2 has gradient theta; q=50 at d=20 typically gives
  // cosine ~0.85 (the acceptance suite quantifies the distribution).
  const std::size_t d = 20;
  rng::Stream setup(13, {1});
  const Tensor theta = random_vector(d, setup);
  ZooConfig cfg;
  cfg.q = 50;
  cfg.mu = 1e-3;
  Objective quad = [](const Tensor& th) { return 0.5 * dot(th, th); };
  const auto est = multi_point_estimate(quad, theta, cfg, rng::Stream(13, {2}));
  CHECK(cosine_similarity(est.delta, theta) >= 0.8);
}

TEST_CASE("one estimate consumes exactly q+1 objective evaluations") {
  std::atomic<int> calls{0};
  ZooConfig cfg;
  cfg.q = 7;
  const Tensor theta({5});
  const auto est = multi_point_estimate(
      [&](const Tensor& th) {
        ++calls;
        return dot(th, th);
      },
      theta, cfg, rng::Stream(12, {1}), 4);
  CHECK(calls.load() == 8);
  CHECK(est.evaluations == 8);
}

TEST_CASE("non-finite objective raises an estimation error naming the direction") {
  ZooConfig cfg;
  cfg.q = 3;
  const Tensor theta({4});
  int calls = 0;
  Objective nasty = [&](const Tensor&) {
    ++calls;
    return calls >= 3 ? std::nan("") : 1.0;  // baseline and direction 0 fine
  };
  try {
    multi_point_estimate(nasty, theta, cfg, rng::Stream(13, {1}));
    FAIL("expected EstimationError");
  } catch (const EstimationError& e) {
    CHECK(e.direction_index == 1);
  }
}

TEST_CASE("antithetic flag pairs directions as u, -u") {
  ZooConfig cfg;
  cfg.q = 4;
  cfg.antithetic = true;
  std::vector<Tensor> probes;
  const Tensor theta({3});
  multi_point_estimate(
      [&](const Tensor& th) {
        probes.push_back(th);
        return 0.0;
      },
      theta, cfg, rng::Stream(14, {1}));
  REQUIRE(probes.size() == 5);  // baseline + 4 probes
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(probes[1][k] == -probes[2][k]);
    CHECK(probes[3][k] == -probes[4][k]);
  }
}

TEST_CASE("batch estimate with one sample matches the bare estimator") {
  const std::size_t d = 8;
  rng::Stream setup(15, {1});
  const Tensor a = random_vector(d, setup);
  const Tensor theta = random_vector(d, setup);
  ZooConfig cfg;
  cfg.q = 6;
  Objective linear = [&](const Tensor& th) { return dot(a, th); };
  const std::uint64_t base = rng::key(15, {2});
  const auto batched = batch_estimate({linear}, theta, cfg, base);
  const auto single = multi_point_estimate(linear, theta, cfg, rng::Stream(rng::combine(base, 0)));
  for (std::size_t k = 0; k < d; ++k) CHECK(batched.delta[k] == single.delta[k]);
  CHECK(batched.evaluations == single.evaluations);
}

TEST_CASE("batch estimate averages per-sample estimates with fresh directions") {
  const std::size_t d = 10;
  rng::Stream setup(16, {1});
  const Tensor a = random_vector(d, setup);
  const Tensor b = random_vector(d, setup);
  const Tensor theta = random_vector(d, setup);
  ZooConfig cfg;
  cfg.q = 4;
  std::vector<Objective> objectives = {[&](const Tensor& th) { return dot(a, th); },
                                       [&](const Tensor& th) { return dot(b, th); }};
  const std::uint64_t base = rng::key(16, {2});
  const auto est = batch_estimate(objectives, theta, cfg, base, 2);
  // Structural: equals the average of the two per-sample estimates.
  const auto e0 = multi_point_estimate(objectives[0], theta, cfg, rng::Stream(rng::combine(base, 0)));
  const auto e1 = multi_point_estimate(objectives[1], theta, cfg, rng::Stream(rng::combine(base, 1)));
  for (std::size_t k = 0; k < d; ++k)
    CHECK(est.delta[k] == doctest::Approx(0.5 * (e0.delta[k] + e1.delta[k])).epsilon(1e-15));

  // Monte Carlo: the mean of many such estimates approaches (a+b)/2.
  Tensor mean({d});
  const std::size_t trials = 4000;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto e = batch_estimate(objectives, theta, cfg, rng::key(16, {3, t}));
    axpy(1.0 / static_cast<double>(trials), e.delta, mean);
  }
  const Tensor target = 0.5 * (a + b);
  CHECK(norm2(mean - target) / norm2(target) <= 0.05);
  CHECK_THROWS_AS(batch_estimate({}, theta, cfg, base), std::invalid_argument);
}

TEST_CASE("zo_sgd_step: zero estimate is a no-op without decay") {
  OptimState state;
  state.eta = 0.1;
  state.momentum = 0.0;
  state.weight_decay = 0.0;
  state.velocity = Tensor({4});
  const Tensor theta = Tensor::full({4}, 2.0);
  GradEstimate zero;
  zero.delta = Tensor({4});
  const Tensor next = zo_sgd_step(state, theta, zero);
  for (std::size_t k = 0; k < 4; ++k) CHECK(next[k] == theta[k]);
}

TEST_CASE("zo_sgd_step reduces to plain SGD without momentum and decay") {
  OptimState state;
  state.eta = 1e-3;
  state.momentum = 0.0;
  state.weight_decay = 0.0;
  state.velocity = Tensor({3});
  Tensor theta({3});
  theta[0] = 1.0;
  theta[1] = -2.0;
  theta[2] = 0.5;
  GradEstimate est;
  est.delta = Tensor({3});
  est.delta[0] = 10.0;
  est.delta[1] = 0.0;
  est.delta[2] = -4.0;
  const Tensor next = zo_sgd_step(state, theta, est);
  CHECK(next[0] == doctest::Approx(1.0 - 1e-3 * 10.0));
  CHECK(next[1] == doctest::Approx(-2.0));
  CHECK(next[2] == doctest::Approx(0.5 + 1e-3 * 4.0));
}

TEST_CASE("momentum descent on the quadratic matches the scalar recurrence oracle") {
  // Exact gradients: every coordinate follows v' = m v + x, x' = x - eta v'.
  const std::size_t d = 5;
  Tensor theta({d});
  for (std::size_t k = 0; k < d; ++k) theta[k] = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> oracle(theta.data.begin(), theta.data.end());
  std::vector<double> oracle_v(d, 0.0);

  OptimState state;
  state.eta = 0.1;
  state.momentum = 0.9;
  state.weight_decay = 0.0;
  state.velocity = Tensor({d});
  bool reached = false;
  for (int step = 0; step < 200; ++step) {
    GradEstimate est;
    est.delta = theta;  // exact gradient of 0.5*||theta||^2
    theta = zo_sgd_step(state, theta, est);
    for (std::size_t k = 0; k < d; ++k) {
      oracle_v[k] = 0.9 * oracle_v[k] + oracle[k];
      oracle[k] -= 0.1 * oracle_v[k];
      CHECK(theta[k] == doctest::Approx(oracle[k]).epsilon(1e-12));
    }
    if (norm2(theta) < 1e-3) {
      reached = true;
      break;
    }
  }
  CHECK(reached);
}

TEST_CASE("weight decay joins the gradient before momentum") {
  OptimState state;
  state.eta = 0.5;
  state.momentum = 0.0;
  state.weight_decay = 0.1;
  state.velocity = Tensor({1});
  Tensor theta({1});
  theta[0] = 2.0;
  GradEstimate zero;
  zero.delta = Tensor({1});
  const Tensor next = zo_sgd_step(state, theta, zero);
  CHECK(next[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0));
}

TEST_CASE("zo_sgd_step rejects non-finite estimates") {
  OptimState state;
  state.velocity = Tensor({2});
  Tensor theta({2});
  GradEstimate est;
  est.delta = Tensor({2});
  est.delta[0] = std::nan("");
  CHECK_THROWS_AS(zo_sgd_step(state, theta, est), std::invalid_argument);
}

TEST_CASE("estimates are bitwise deterministic across worker counts") {
  const auto result = selftest::check_zoo_determinism();
  INFO(result.detail);
  CHECK(result.pass);
}
