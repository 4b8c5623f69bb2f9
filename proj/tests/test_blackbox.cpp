#include <doctest.h>

#include <cmath>
#include <thread>
#include <type_traits>

#include "bbta/blackbox.hpp"
#include "bbta/layers.hpp"
#include "bbta/rng.hpp"

using namespace bbta;

namespace {

// Fixed softmax-of-affine model over 3 features, 3 classes.
BlackBoxModel::PredictFn toy_predict() {
  return [](const Tensor& x) {
    Tensor logits({x.shape[0], 3});
    for (std::size_t b = 0; b < x.shape[0]; ++b) {
      const double* v = x.data.data() + b * 3;
      logits.at2(b, 0) = v[0] - v[2];
      logits.at2(b, 1) = 2.0 * v[1];
      logits.at2(b, 2) = 0.5 * (v[0] + v[1] + v[2]);
    }
    return Layer::softmax().forward(logits);
  };
}

}  // namespace

// The boundary exposes nothing but query/pseudo-label surfaces: the type
// is not copyable and holds no parameter accessor to misuse.
static_assert(!std::is_copy_constructible_v<BlackBoxModel>);

TEST_CASE("query returns probability rows and counts by batch size") {
  BlackBoxModel model(toy_predict(), 3);
  Tensor x({4, 3});
  rng::Stream stream(21, {1});
  for (double& v : x.data) v = stream.normal();
  const Tensor p1 = model.query(x);
  CHECK(model.query_count() == 4);
  for (std::size_t b = 0; b < 4; ++b) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(p1.at2(b, k) >= 0.0);
      sum += p1.at2(b, k);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  const Tensor p2 = model.query(x);
  CHECK(model.query_count() == 8);
  for (std::size_t i = 0; i < p1.numel(); ++i) CHECK(p1.data[i] == p2.data[i]);
}

TEST_CASE("query budget exhausts with an explicit error") {
  BlackBoxModel model(toy_predict(), 3, 5);
  Tensor x({2, 3});
  model.query(x);
  model.query(x);
  CHECK(model.query_count() == 4);
  CHECK_THROWS_AS(model.query(x), QueryBudgetError);
  // A failed query does not consume budget.
  CHECK(model.query_count() == 4);
  Tensor one({1, 3});
  model.query(one);
  CHECK(model.query_count() == 5);
}

TEST_CASE("query validates the model output") {
  BlackBoxModel bad_shape([](const Tensor& x) { return Tensor({x.shape[0], 2}); }, 3);
  Tensor x({1, 3});
  CHECK_THROWS_AS(bad_shape.query(x), std::runtime_error);
  BlackBoxModel not_prob(
      [](const Tensor& x) {
        Tensor t({x.shape[0], 3});
        t.at2(0, 0) = 0.5;
        return t;  // sums to 0.5
      },
      3);
  CHECK_THROWS_AS(not_prob.query(x), std::runtime_error);
}

TEST_CASE("concurrent queries keep an exact total") {
  BlackBoxModel model(toy_predict(), 3);
  Tensor x({1, 3});
  x.data = {0.1, 0.2, 0.3};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      for (int i = 0; i < 50; ++i) model.query(x);
    });
  for (auto& th : threads) th.join();
  CHECK(model.query_count() == 400);
}

TEST_CASE("pseudo labels take the argmax with max-probability confidence") {
  BlackBoxModel fixed(
      [](const Tensor& x) {
        Tensor p({x.shape[0], 3});
        p.at2(0, 0) = 0.1;
        p.at2(0, 1) = 0.7;
        p.at2(0, 2) = 0.2;
        return p;
      },
      3);
  Tensor x({1, 3});
  const auto records = pseudo_label(fixed, x);
  REQUIRE(records.size() == 1);
  CHECK(records[0].class_id == 1);
  CHECK(records[0].confidence == doctest::Approx(0.7));
}

TEST_CASE("pseudo label ties break toward the lowest class index") {
  BlackBoxModel fixed(
      [](const Tensor& x) {
        Tensor p({x.shape[0], 2});
        p.at2(0, 0) = 0.5;
        p.at2(0, 1) = 0.5;
        return p;
      },
      2);
  Tensor x({1, 2});
  const auto records = pseudo_label(fixed, x);
  CHECK(records[0].class_id == 0);
  CHECK(records[0].confidence == doctest::Approx(0.5));
}

TEST_CASE("uniform rows give confidence 1/C") {
  const std::size_t c = 10;
  BlackBoxModel uniform(
      [c](const Tensor& x) {
        Tensor p({x.shape[0], c});
        for (double& v : p.data) v = 1.0 / static_cast<double>(c);
        return p;
      },
      c);
  Tensor x({3, 4});
  const auto records = pseudo_label(uniform, x, 100);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].sample_index == 100 + i);
    CHECK(records[i].class_id == 0);
    CHECK(records[i].confidence == doctest::Approx(0.1));
  }
}
