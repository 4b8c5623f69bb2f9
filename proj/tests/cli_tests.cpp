#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "bbta/blackbox.hpp"
#include "bbta/serialize.hpp"

// End-to-end checks of the command-line surface: run the built binary,
// then inspect exit codes and the files it writes.

namespace {

namespace fs = std::filesystem;

const char* cli_path() { return BBTA_CLI_PATH; }

struct RunOutput {
  int exit_code = -1;
  std::string stdout_text;
};

RunOutput run_cli(const std::string& args) {
  const std::string cmd = std::string(cli_path()) + " " + args + " 2>/dev/null";
  RunOutput out;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> chunk{};
  std::size_t got = 0;
  while ((got = fread(chunk.data(), 1, chunk.size(), pipe)) > 0)
    out.stdout_text.append(chunk.data(), got);
  const int status = pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// One tiny benchmark shared by the pipeline tests: train once, reuse the
// weights file everywhere.
const std::string kTinyData =
    "--override data.n_train=400 --override data.n_test=64 --override deployed.epochs=6";

struct TrainedFixture {
  fs::path dir = fs::temp_directory_path() / "bbta_cli_tests";
  fs::path weights;

  TrainedFixture() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto out = run_cli("train-deployed --out " + (dir / "train").string() + " " + kTinyData);
    REQUIRE(out.exit_code == 0);
    weights = dir / "train" / "deployed.bbtn";
    REQUIRE(fs::exists(weights));
  }

  std::string adapt_args(const std::string& extra) const {
    return kTinyData + " --override deployed.weights=" + weights.string() +
           " --override run.epochs=2 --override run.batch_size=32 --override zoo.q=2 " + extra;
  }
};

const TrainedFixture& trained() {
  static TrainedFixture f;
  return f;
}

}  // namespace

TEST_CASE("selftest command runs the invariant suites and exits zero") {
  const auto out = run_cli("selftest --out " + (fs::temp_directory_path() / "bbta_selftest").string());
  CHECK(out.exit_code == 0);
  CHECK(out.stdout_text.find("PASS kl_decomposition_identity") != std::string::npos);
  CHECK(out.stdout_text.find("FAIL") == std::string::npos);
}

TEST_CASE("config errors exit with code 2") {
  CHECK(run_cli("adapt-offline --override zoo.nonsense=1").exit_code == 2);
  CHECK(run_cli("adapt-offline " + kTinyData).exit_code == 2);  // missing deployed.weights
  CHECK(run_cli("definitely-not-a-command").exit_code == 2);
}

TEST_CASE("runtime errors exit with code 1") {
  CHECK(run_cli("adapt-offline " + kTinyData +
                " --override deployed.weights=/nonexistent/w.bbtn --override run.epochs=1")
            .exit_code == 1);
}

TEST_CASE("train-deployed writes weights, echo and summary") {
  const TrainedFixture& f = trained();
  const auto echo = slurp(f.dir / "train" / "config_echo.ini");
  CHECK(echo.find("[deployed]") != std::string::npos);
  const auto summary = nlohmann::json::parse(slurp(f.dir / "train" / "summary.json"));
  CHECK(summary["command"] == "train-deployed");
  CHECK(summary["clean_test_accuracy"].get<double>() > 0.9);
  CHECK(summary.contains("build_id"));
  CHECK(summary.contains("wall_seconds"));
  CHECK(summary["config"]["data.n_train"] == "400");
}

TEST_CASE("adapt-offline with zero epochs reports the baseline only") {
  const TrainedFixture& f = trained();
  const auto dir = f.dir / "offline0";
  const auto out =
      run_cli("adapt-offline --out " + dir.string() + " " + f.adapt_args("--override run.epochs=0"));
  REQUIRE(out.exit_code == 0);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["baseline_accuracy"].is_number());
  // No epochs: the metrics stream holds only the header row.
  const auto metrics = slurp(dir / "metrics.csv");
  CHECK(metrics == "run_id,epoch,objective,accuracy,queries\n");
  CHECK(fs::exists(dir / "selection.csv"));
  CHECK(fs::exists(dir / "adaptor.bbtn"));
}

TEST_CASE("adapt-offline echoes overrides into the summary config") {
  const TrainedFixture& f = trained();
  const auto dir = f.dir / "offline_echo";
  const auto out = run_cli("adapt-offline --out " + dir.string() + " " +
                           f.adapt_args("--override zoo.q=5"));
  REQUIRE(out.exit_code == 0);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["config"]["zoo.q"] == "5");
  CHECK(summary["accuracy"]["gaussian_noise"].contains("adapted"));
  CHECK(summary["total_queries"].get<std::uint64_t>() > 0);
}

TEST_CASE("identical seeds give byte-identical metrics across worker pools") {
  const TrainedFixture& f = trained();
  const auto dir1 = f.dir / "det1";
  const auto dir8 = f.dir / "det8";
  REQUIRE(run_cli("adapt-offline --out " + dir1.string() + " --workers 1 --seed 9 " +
                  f.adapt_args("")).exit_code == 0);
  REQUIRE(run_cli("adapt-offline --out " + dir8.string() + " --workers 8 --seed 9 " +
                  f.adapt_args("")).exit_code == 0);
  CHECK(slurp(dir1 / "metrics.csv") == slurp(dir8 / "metrics.csv"));
  // run.workers differs in the echo, metrics must not.
  CHECK(slurp(dir1 / "metrics.csv").find("adapt-offline-s9") != std::string::npos);
}

TEST_CASE("adapt-online and baseline commands produce their artifacts") {
  const TrainedFixture& f = trained();
  const auto online_dir = f.dir / "online";
  const auto out = run_cli("adapt-online --out " + online_dir.string() + " " +
                           f.adapt_args("--override online.epochs_per_batch=1"));
  REQUIRE(out.exit_code == 0);
  const auto summary = nlohmann::json::parse(slurp(online_dir / "summary.json"));
  CHECK(summary["stream_accuracy"].is_number());

  const auto pgd_dir = f.dir / "pgd";
  const auto pgd = run_cli("baseline --out " + pgd_dir.string() + " " +
                           f.adapt_args("--override baseline.method=da-pgd"));
  REQUIRE(pgd.exit_code == 0);
  CHECK(fs::exists(pgd_dir / "adapted.bbtd"));
  const auto direct_dir = f.dir / "direct";
  CHECK(run_cli("baseline --out " + direct_dir.string() + " " +
                f.adapt_args("--override baseline.method=da-direct")).exit_code == 0);
}

TEST_CASE("grad-error command writes the trial table") {
  const TrainedFixture& f = trained();
  const auto dir = f.dir / "graderr";
  const auto out = run_cli(
      "grad-error --out " + dir.string() + " " +
      f.adapt_args("--override graderr.trials=5 --override graderr.n_test=12"));
  REQUIRE(out.exit_code == 0);
  const auto csv = slurp(dir / "graderr_trials.csv");
  CHECK(csv.find("trial,naive_error,robust_error") == 0);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["trials"] == 5);
}

TEST_CASE("eval command measures stored adaptor weights") {
  const TrainedFixture& f = trained();
  const auto adapt_dir = f.dir / "offline_echo";  // produced above
  REQUIRE(fs::exists(adapt_dir / "adaptor.bbtn"));
  const auto dir = f.dir / "eval";
  const auto out = run_cli(
      "eval --out " + dir.string() + " " +
      f.adapt_args("--override adaptor.weights=" + (adapt_dir / "adaptor.bbtn").string()));
  REQUIRE(out.exit_code == 0);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["final_accuracy"].is_number());
}

TEST_CASE("BBTA_OUT_DIR environment variable overrides --out") {
  const TrainedFixture& f = trained();
  const auto env_dir = f.dir / "env_out";
  const std::string cmd = "BBTA_OUT_DIR=" + env_dir.string() + " " + cli_path() +
                          " selftest --out " + (f.dir / "ignored").string() + " >/dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(env_dir / "summary.json"));
  CHECK(!fs::exists(f.dir / "ignored" / "summary.json"));
}

TEST_CASE("serve-model speaks the line-delimited tensor protocol") {
  const TrainedFixture& f = trained();
  // Wrap the CLI child process as a remote black-box model and compare
  // against direct evaluation of the same weights.
  auto remote = bbta::RemoteModel::open({cli_path(), "serve-model", "--weights", f.weights.string()}, 4);
  const bbta::Network net = bbta::io::load_network_file(f.weights.string());
  bbta::Tensor x({3, 1, 16, 16});
  bbta::rng::Stream stream(17, {1});
  for (double& v : x.data) v = stream.uniform();
  const bbta::Tensor via_remote = remote->query(x);
  const bbta::Tensor direct = net.forward(x);
  REQUIRE(via_remote.shape == direct.shape);
  for (std::size_t i = 0; i < direct.numel(); ++i)
    CHECK(via_remote.data[i] == doctest::Approx(direct.data[i]).epsilon(1e-15));
  CHECK(remote->query_count() == 3);
}
