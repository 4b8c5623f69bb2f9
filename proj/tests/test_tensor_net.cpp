#include <doctest.h>

#include <cmath>
#include <sstream>

#include "bbta/layers.hpp"
#include "bbta/rng.hpp"
#include "bbta/selftest.hpp"
#include "bbta/serialize.hpp"

using namespace bbta;

TEST_CASE("dense layer with zero weights outputs the bias") {
  Layer l = Layer::dense(4, 3);
  l.biases[0] = 0.5;
  l.biases[1] = -1.0;
  l.biases[2] = 2.0;
  Tensor x({2, 4});
  rng::Stream stream(1, {1});
  for (double& v : x.data) v = stream.normal();
  const Tensor y = l.forward(x);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(y.at2(b, 0) == 0.5);
    CHECK(y.at2(b, 1) == -1.0);
    CHECK(y.at2(b, 2) == 2.0);
  }
}

TEST_CASE("instance norm on constant channels outputs zero") {
  Layer l = Layer::instance_norm(2);
  Tensor x({1, 2, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x.data[i] = 0.7;
  for (std::size_t i = 9; i < 18; ++i) x.data[i] = -1.3;
  const Tensor y = l.forward(x);
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("1x1 conv with weight 2 doubles an all-ones input") {
  Layer l = Layer::conv2d(1, 1, 1, 1, 0);
  l.weights[0] = 2.0;
  const Tensor x = Tensor::full({1, 1, 4, 4}, 1.0);
  const Tensor y = l.forward(x);
  REQUIRE(y.shape == std::vector<std::size_t>{1, 1, 4, 4});
  for (double v : y.data) CHECK(v == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("softmax rows are distributions") {
  Layer l = Layer::softmax();
  Tensor x({5, 7});
  rng::Stream stream(2, {2});
  for (double& v : x.data) v = 10.0 * stream.normal();
  const Tensor y = l.forward(x);
  for (std::size_t b = 0; b < 5; ++b) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      CHECK(y.at2(b, k) >= 0.0);
      sum += y.at2(b, k);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("forward is deterministic") {
  Network net;
  net.layers.push_back(Layer::conv2d(1, 4, 3));
  net.layers.push_back(Layer::instance_norm(4));
  net.layers.push_back(Layer::conv2d(4, 1, 3));
  Tensor params({net.param_count()});
  rng::Stream stream(3, {3});
  for (double& v : params.data) v = stream.normal();
  net.set_params(params);
  Tensor x({2, 1, 8, 8});
  for (double& v : x.data) v = stream.uniform();
  const Tensor a = net.forward(x);
  const Tensor b = net.forward(x);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("parameter counts match the documented formulas") {
  CHECK(Layer::dense(4, 3).param_count() == 15);  // 4*3 weights + 3 biases
  CHECK(Layer::conv2d(2, 5, 3).param_count() == 5 * (2 * 9 + 1));
  CHECK(Layer::instance_norm(6).param_count() == 0);
  CHECK(Layer::instance_norm(6, 1e-5, true).param_count() == 12);
  CHECK(Layer::relu().param_count() == 0);
  CHECK(Layer::softmax().param_count() == 0);
}

TEST_CASE("flatten then unflatten reproduces forward outputs") {
  Network net;
  net.layers.push_back(Layer::conv2d(1, 3, 3));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(3 * 6 * 6, 5));
  net.layers.push_back(Layer::softmax());
  rng::Stream stream(4, {4});
  Tensor params({net.param_count()});
  for (double& v : params.data) v = stream.normal();
  net.set_params(params);
  Tensor x({3, 1, 6, 6});
  for (double& v : x.data) v = stream.uniform();
  const Tensor before = net.forward(x);
  const Network rebuilt = unflatten_params(net, flatten_params(net));
  const Tensor after = rebuilt.forward(x);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(before.data[i] == after.data[i]);
}

TEST_CASE("unflatten with zeros silences dense and conv layers") {
  Network net;
  net.layers.push_back(Layer::conv2d(1, 2, 3));
  net.layers.push_back(Layer::dense(2 * 4 * 4, 3));
  const Network zeroed = unflatten_params(net, Tensor({net.param_count()}));
  Tensor x({1, 1, 4, 4});
  for (double& v : x.data) v = 0.5;
  const Tensor y = zeroed.forward(x);
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("unflatten rejects wrong lengths") {
  Network net;
  net.layers.push_back(Layer::dense(3, 2));
  CHECK_THROWS_AS(net.set_params(Tensor({5})), std::invalid_argument);
}

TEST_CASE("forward rejects shape mismatches with a useful message") {
  Layer l = Layer::dense(4, 2);
  Tensor x({2, 5});
  CHECK_THROWS_WITH_AS(l.forward(x), doctest::Contains("expected 4"), std::invalid_argument);
  Layer c = Layer::conv2d(3, 4, 3);
  Tensor img({1, 2, 8, 8});
  CHECK_THROWS_AS(c.forward(img), std::invalid_argument);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  Network net;
  net.layers.push_back(Layer::conv2d(1, 2, 3));
  net.layers.push_back(Layer::dense(2 * 5 * 5, 3));
  rng::Stream stream(5, {5});
  Tensor params({net.param_count()});
  for (double& v : params.data) v = stream.normal();
  net.set_params(params);
  Tensor x({2, 1, 5, 5});
  for (double& v : x.data) v = stream.uniform();
  const auto trace = net.forward_trace(x);
  const auto grads = net.backward(trace, Tensor(trace.output().shape));
  for (double v : grads.params.data) CHECK(v == 0.0);
  for (double v : grads.input.data) CHECK(v == 0.0);
}

TEST_CASE("backward: scalar dense case matches the product rule") {
  // y = w*x + b, upstream g: dw = g*x, db = g, dx = g*w.
  Layer l = Layer::dense(1, 1);
  l.weights[0] = 3.0;
  l.biases[0] = 0.25;
  Network net;
  net.layers.push_back(l);
  Tensor x({1, 1});
  x[0] = 2.0;
  Tensor upstream({1, 1});
  upstream[0] = 5.0;
  const auto grads = net.backward(net.forward_trace(x), upstream);
  CHECK(grads.params[0] == doctest::Approx(10.0));  // g*x
  CHECK(grads.params[1] == doctest::Approx(5.0));   // g
  CHECK(grads.input[0] == doctest::Approx(15.0));   // g*w
}

TEST_CASE("backward matches central finite differences for every layer kind") {
  const auto result = selftest::check_backward_fd();
  INFO(result.detail);
  CHECK(result.pass);
}

TEST_CASE("backward rejects non-finite upstream") {
  Network net;
  net.layers.push_back(Layer::dense(2, 2));
  Tensor x({1, 2});
  Tensor upstream({1, 2});
  upstream[0] = std::nan("");
  CHECK_THROWS_AS(net.backward(net.forward_trace(x), upstream), std::invalid_argument);
}

TEST_CASE("weights container round-trips networks bit-exactly") {
  Network net;
  net.layers.push_back(Layer::conv2d(1, 4, 3, 2, 1));
  net.layers.push_back(Layer::instance_norm(4, 1e-5, true));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(4 * 3 * 3, 6));
  net.layers.push_back(Layer::softmax());
  rng::Stream stream(6, {6});
  Tensor params({net.param_count()});
  for (double& v : params.data) v = stream.normal();
  net.set_params(params);

  std::stringstream buf;
  io::save_network(buf, net);
  const Network loaded = io::load_network(buf);
  REQUIRE(loaded.layers.size() == net.layers.size());
  const Tensor a = net.flatten_params(), b = loaded.flatten_params();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK(loaded.layers[0].stride == 2);
  CHECK(loaded.layers[1].affine);
}

TEST_CASE("forward passes keep finite inputs finite") {
  // Includes extreme logits through softmax and flat channels through
  // the epsilon-guarded instance norm.
  Network net;
  net.layers.push_back(Layer::conv2d(1, 3, 3));
  net.layers.push_back(Layer::instance_norm(3));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(3 * 4 * 4, 5));
  net.layers.push_back(Layer::softmax());
  rng::Stream stream(7, {7});
  for (int round = 0; round < 50; ++round) {
    Tensor params({net.param_count()});
    const double scale = std::pow(10.0, static_cast<double>(round % 5));
    for (double& v : params.data) v = scale * stream.normal();
    net.set_params(params);
    Tensor x({2, 1, 4, 4});
    if (round % 7 == 0) {
      // constant input: zero variance exercises the epsilon path
      for (double& v : x.data) v = 3.14;
    } else {
      for (double& v : x.data) v = scale * stream.normal();
    }
    CHECK(net.forward(x).all_finite());
  }
}

TEST_CASE("weights container rejects foreign bytes") {
  std::stringstream buf;
  buf << "NOPE    garbage";
  CHECK_THROWS_AS(io::load_network(buf), std::runtime_error);
}
