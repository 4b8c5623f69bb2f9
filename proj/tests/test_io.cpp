#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "bbta/config.hpp"
#include "bbta/serialize.hpp"

using namespace bbta;

TEST_CASE("base64 round-trips binary payloads") {
  std::string bytes;
  for (int i = 0; i < 300; ++i) bytes.push_back(static_cast<char>(i % 256));
  for (std::size_t cut : {0ul, 1ul, 2ul, 3ul, 299ul, 300ul}) {
    const std::string part = bytes.substr(0, cut);
    CHECK(io::base64_decode(io::base64_encode(part)) == part);
  }
  CHECK_THROWS_AS(io::base64_decode("@@@@"), std::runtime_error);
}

TEST_CASE("tensor wire format round-trips shape and values") {
  Tensor t({2, 3, 4});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.125 * static_cast<double>(i) - 1.0;
  const Tensor back = io::tensor_from_bytes(io::tensor_to_bytes(t));
  CHECK(back.shape == t.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
}

TEST_CASE("config: defaults, file parsing, overrides, echo") {
  Config cfg;
  CHECK(cfg.get_size("zoo.q") == 5);
  CHECK(cfg.get_real("zoo.mu") == doctest::Approx(1e-3));
  CHECK(cfg.get_real("objective.alpha") == doctest::Approx(1e-4));
  CHECK(cfg.get_real("select.tau") == doctest::Approx(0.9));
  CHECK(cfg.get_real("select.rho") == doctest::Approx(0.9));
  CHECK(cfg.get_size("online.queue_size") == 1000);

  const char* path = "test_config_tmp.ini";
  {
    std::ofstream os(path);
    os << "# comment\n[zoo]\nq = 9\n mu = 2e-3 ; inline comment\n[run]\nepochs=3\n";
  }
  cfg.load_file(path);
  std::remove(path);
  CHECK(cfg.get_size("zoo.q") == 9);
  CHECK(cfg.get_real("zoo.mu") == doctest::Approx(2e-3));
  CHECK(cfg.get_size("run.epochs") == 3);

  cfg.apply_override("zoo.q=11");
  CHECK(cfg.get_size("zoo.q") == 11);

  const std::string echo = cfg.echo();
  CHECK(echo.find("[zoo]") != std::string::npos);
  CHECK(echo.find("q = 11") != std::string::npos);

  // The echo parses back to the identical configuration.
  {
    std::ofstream os(path);
    os << echo;
  }
  Config cfg2;
  cfg2.load_file(path);
  std::remove(path);
  CHECK(cfg2.values() == cfg.values());
}

TEST_CASE("config rejects unknown keys and bad values") {
  Config cfg;
  CHECK_THROWS_AS(cfg.apply_override("zoo.quux=1"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_override("nonsense"), ConfigError);
  cfg.apply_override("zoo.q=banana");
  CHECK_THROWS_AS(cfg.get_size("zoo.q"), ConfigError);
  cfg.apply_override("run.shuffle=maybe");
  CHECK_THROWS_AS(cfg.get_bool("run.shuffle"), ConfigError);
}

TEST_CASE("typed views validate ranges") {
  Config cfg;
  cfg.apply_override("objective.log_floor=0.5");
  CHECK_THROWS_AS(cfg.run_config(), ConfigError);
  Config cfg2;
  cfg2.apply_override("adaptor.mode=sideways");
  CHECK_THROWS_AS(cfg2.adaptor_spec(), ConfigError);
  Config cfg3;
  cfg3.apply_override("run.batch_size=0");
  CHECK_THROWS_AS(cfg3.run_config(), ConfigError);
}
