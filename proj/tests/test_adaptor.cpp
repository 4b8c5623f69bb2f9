#include <doctest.h>

#include <cmath>

#include "bbta/adaptor.hpp"
#include "bbta/rng.hpp"
#include "bbta/selftest.hpp"

using namespace bbta;

TEST_CASE("residual mode with zero parameters is the identity, bitwise") {
  const auto result = selftest::check_residual_identity();
  INFO(result.detail);
  CHECK(result.pass);
}

TEST_CASE("direct mode with zero parameters maps everything to zero") {
  AdaptorSpec spec;
  spec.mode = AdaptorMode::kDirect;
  spec.mid_channels = 4;
  DataAdaptor adaptor(spec);
  Tensor x({2, 1, 6, 6});
  rng::Stream stream(31, {1});
  for (double& v : x.data) v = stream.uniform();
  const Tensor adapted = adaptor.adapt(Tensor({adaptor.param_count()}), x);
  for (double v : adapted.data) CHECK(v == 0.0);
}

TEST_CASE("clamp range caps overflowing pixels") {
  AdaptorSpec spec;
  spec.mid_channels = 2;
  spec.clamp_range = {0.0, 1.0};
  DataAdaptor adaptor(spec);
  // Push the output conv bias high enough to overflow any pixel.
  Tensor theta({adaptor.param_count()});
  theta[theta.numel() - 1] = 5.0;  // final conv bias (last flat slot)
  Tensor x({1, 1, 4, 4});
  for (double& v : x.data) v = 0.8;
  const Tensor adapted = adaptor.adapt(theta, x);
  for (double v : adapted.data) CHECK(v == 1.0);
}

TEST_CASE("adapt is pure and shape preserving over random shapes") {
  AdaptorSpec spec;
  spec.mid_channels = 3;
  DataAdaptor adaptor(spec);
  rng::Stream stream(32, {1});
  const Tensor theta = adaptor.init_params(5);
  for (int round = 0; round < 10; ++round) {
    const std::size_t n = 1 + stream.uniform_index(4);
    const std::size_t h = 4 + stream.uniform_index(13);
    const std::size_t w = 4 + stream.uniform_index(13);
    Tensor x({n, 1, h, w});
    for (double& v : x.data) v = stream.uniform();
    const Tensor a = adaptor.adapt(theta, x);
    const Tensor b = adaptor.adapt(theta, x);
    CHECK(a.shape == x.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);
  }
}

TEST_CASE("init is deterministic per seed and varies across seeds") {
  AdaptorSpec spec;
  DataAdaptor adaptor(spec);
  const Tensor a = adaptor.init_params(123);
  const Tensor b = adaptor.init_params(123);
  const Tensor c = adaptor.init_params(124);
  REQUIRE(a.numel() == b.numel());
  bool differs = false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a[i] == b[i]);
    differs = differs || a[i] != c[i];
  }
  CHECK(differs);
}

TEST_CASE("parameter dimension follows the architecture") {
  AdaptorSpec spec;
  spec.mid_channels = 8;
  CHECK(DataAdaptor(spec).param_count() == 153);  // conv 1->8 (80) + conv 8->1 (73)
  spec.mid_channels = 2;
  CHECK(DataAdaptor(spec).param_count() == 39);
  spec.mid_channels = 1;
  CHECK(DataAdaptor(spec).param_count() == 20);
}

TEST_CASE("theta length mismatches are rejected") {
  DataAdaptor adaptor(AdaptorSpec{});
  Tensor x({1, 1, 4, 4});
  CHECK_THROWS_AS(adaptor.adapt(Tensor({3}), x), std::invalid_argument);
}

TEST_CASE("initial perturbation stays small on unit-range inputs") {
  // Measured over 100 seeds: the residual output conv is initialized
  // small, so the initial perturbation's sup norm stays below 1 with
  // probability >= 0.99.
  AdaptorSpec spec;
  spec.clamp_range.reset();
  DataAdaptor adaptor(spec);
  rng::Stream stream(33, {1});
  Tensor x({4, 1, 16, 16});
  for (double& v : x.data) v = stream.uniform();
  int within = 0;
  const int seeds = 100;
  for (int s = 0; s < seeds; ++s) {
    const Tensor theta = adaptor.init_params(1000 + s);
    const Tensor adapted = adaptor.adapt(theta, x);
    double sup = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
      sup = std::max(sup, std::abs(adapted.data[i] - x.data[i]));
    if (sup <= 1.0) ++within;
  }
  CHECK(within >= 99);
}
