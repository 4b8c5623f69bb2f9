#include <doctest.h>

#include <cmath>
#include <vector>

#include "bbta/objectives.hpp"
#include "bbta/rng.hpp"
#include "bbta/selftest.hpp"

using namespace bbta;

TEST_CASE("kl_div: identity, analytic values, hand computation") {
  const std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(kl_div(p, p) == 0.0);

  std::vector<double> onehot(10, 0.0);
  onehot[3] = 1.0;
  const std::vector<double> uniform(10, 0.1);
  CHECK(kl_div(onehot, uniform) == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  const std::vector<double> t{0.5, 0.5}, q{0.9, 0.1};
  const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(kl_div(t, q) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.510826).epsilon(1e-5));
}

TEST_CASE("cross_entropy: perfect prediction, uniform, hand computation") {
  std::vector<double> onehot{0.0, 1.0, 0.0};
  CHECK(cross_entropy(onehot, std::vector<double>{0.0, 1.0, 0.0}) == 0.0);

  std::vector<double> one10(10, 0.0);
  one10[7] = 1.0;
  CHECK(cross_entropy(one10, std::vector<double>(10, 0.1)) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));

  CHECK(cross_entropy(std::size_t{2}, std::vector<double>{0.2, 0.3, 0.5}) ==
        doctest::Approx(-std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("kl decomposition: zero disturbance reduces to cross entropy") {
  NoisyLabel label;
  label.clean = {0.0, 1.0, 0.0, 0.0};
  label.disturbance = {0.0, 0.0, 0.0, 0.0};
  const std::vector<double> pred{0.1, 0.6, 0.2, 0.1};
  const auto [lhs, rhs] = kl_decomposition_check(label, pred);
  CHECK(lhs == doctest::Approx(cross_entropy(label.clean, pred)).epsilon(1e-12));
  CHECK(std::abs(lhs - rhs) <= 1e-9);
}

TEST_CASE("kl decomposition: uniform noisy label vs uniform prediction is zero") {
  const std::size_t c = 10;
  NoisyLabel label;
  label.clean.assign(c, 0.0);
  label.clean[0] = 1.0;
  label.disturbance.resize(c);
  for (std::size_t k = 0; k < c; ++k) label.disturbance[k] = 0.1 - label.clean[k];
  const auto [lhs, rhs] = kl_decomposition_check(label, std::vector<double>(c, 0.1));
  CHECK(std::abs(lhs) <= 1e-12);
  CHECK(std::abs(rhs) <= 1e-9);
}

TEST_CASE("kl decomposition identity holds over 1000 random pairs") {
  const auto result = selftest::check_kl_decomposition(1000);
  INFO(result.detail);
  CHECK(result.pass);
}

TEST_CASE("mutual information: identical rows, one-hot spread, two-point batch") {
  const std::vector<double> row{0.25, 0.5, 0.25};
  CHECK(mutual_information({row, row, row}) == 0.0);

  std::vector<std::vector<double>> onehots;
  for (std::size_t c = 0; c < 10; ++c) {
    std::vector<double> r(10, 0.0);
    r[c] = 1.0;
    onehots.push_back(r);
  }
  // Clamped logs contribute at most C*log_floor-scale error.
  CHECK(mutual_information(onehots) == doctest::Approx(std::log(10.0)).epsilon(1e-9));

  CHECK(mutual_information({{1.0, 0.0}, {0.0, 1.0}}) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK_THROWS_AS(mutual_information({}), std::invalid_argument);
}

TEST_CASE("l1 perturbation: zero, uniform shift, sign symmetry") {
  Tensor a({1, 8});
  Tensor b({1, 8});
  CHECK(l1_perturbation(a, b) == 0.0);
  for (double& v : a.data) v = 0.5;
  CHECK(l1_perturbation(a, b) == doctest::Approx(4.0));
  for (double& v : a.data) v = -0.5;
  CHECK(l1_perturbation(a, b) == doctest::Approx(4.0));
}

TEST_CASE("combined objective composes its parts") {
  const std::vector<double> identical{0.5, 0.5};
  ObjectiveConfig cfg;

  // No reliable samples, identical unreliable predictions: only the MI
  // term remains and it is exactly zero.
  CHECK(soda_objective({}, {}, {identical, identical}, cfg) == 0.0);

  // No unreliable samples, perfect reliable predictions: zero CE.
  CHECK(soda_objective({{0.0, 1.0}}, {1}, {}, cfg) == 0.0);

  // alpha = 1e-4: one reliable pair at CE log 10, unreliable MI log 10.
  cfg.alpha = 1e-4;
  std::vector<std::vector<double>> onehots;
  for (std::size_t c = 0; c < 10; ++c) {
    std::vector<double> r(10, 0.0);
    r[c] = 1.0;
    onehots.push_back(r);
  }
  const std::vector<double> uniform(10, 0.1);
  const double value = soda_objective({uniform}, {4}, onehots, cfg);
  CHECK(value == doctest::Approx(-std::log(10.0) + 1e-4 * std::log(10.0)).epsilon(1e-9));

  CHECK_THROWS_AS(soda_objective({}, {}, {}, cfg), std::invalid_argument);
}

TEST_CASE("combined objective ignores ordering within subsets when beta is zero") {
  rng::Stream stream(77, {1});
  std::vector<std::vector<double>> unreliable, reliable;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 12; ++i) {
    unreliable.push_back(selftest::random_distribution(stream, 5));
    reliable.push_back(selftest::random_distribution(stream, 5));
    labels.push_back(stream.uniform_index(5));
  }
  ObjectiveConfig cfg;
  cfg.alpha = 0.3;
  const double base = soda_objective(reliable, labels, unreliable, cfg);
  // Rotate both subsets.
  std::rotate(unreliable.begin(), unreliable.begin() + 5, unreliable.end());
  std::rotate(reliable.begin(), reliable.begin() + 3, reliable.end());
  std::rotate(labels.begin(), labels.begin() + 3, labels.end());
  CHECK(soda_objective(reliable, labels, unreliable, cfg) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("beta adds the mean L1 term and requires the tensors") {
  ObjectiveConfig cfg;
  cfg.beta = 0.5;
  Tensor adapted({2, 4}), original({2, 4});
  for (double& v : adapted.data) v = 1.0;
  const std::vector<double> row{0.5, 0.5};
  const double value = soda_objective({}, {}, {row, row}, cfg, &adapted, &original);
  CHECK(value == doctest::Approx(0.5 * 4.0));
  CHECK_THROWS_AS(soda_objective({}, {}, {row, row}, cfg), std::invalid_argument);
}

TEST_CASE("loss bounds invariants over random batches") {
  const auto result = selftest::check_loss_bounds(2000);
  INFO(result.detail);
  CHECK(result.pass);
}
