// bbta — test-time data adaptation for query-only classifiers.
//
// Subcommands cover the whole pipeline: train the harness's deployed
// model, adapt a corrupted test set offline or online, run the
// forward-only baselines, measure gradient estimation error, evaluate
// stored weights, run the invariant selftest, and serve a model over
// stdio for out-of-process use.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bbta/bench.hpp"
#include "bbta/config.hpp"
#include "bbta/engine.hpp"
#include "bbta/grad_error.hpp"
#include "bbta/report.hpp"
#include "bbta/selftest.hpp"
#include "bbta/serialize.hpp"

namespace {

using nlohmann::json;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::optional<long long> seed;
  std::optional<long long> workers;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "INI config file");
  cmd->add_option("--override", args.overrides, "dotted key=value override (repeatable)");
  cmd->add_option("--out", args.out_dir, "output directory (env BBTA_OUT_DIR wins)");
  cmd->add_option("--seed", args.seed, "shorthand for --override run.seed=...");
  cmd->add_option("--workers", args.workers, "shorthand for --override run.workers=...");
}

bbta::Config make_config(const CommonArgs& args) {
  bbta::Config cfg;
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  for (const std::string& o : args.overrides) cfg.apply_override(o);
  if (args.seed) cfg.set("run.seed", std::to_string(*args.seed));
  if (args.workers) cfg.set("run.workers", std::to_string(*args.workers));
  return cfg;
}

std::filesystem::path resolve_out_dir(const CommonArgs& args) {
  const char* env = std::getenv("BBTA_OUT_DIR");
  std::filesystem::path dir = env && *env ? env : args.out_dir;
  std::filesystem::create_directories(dir);
  return dir;
}

std::string run_id_of(const bbta::Config& cfg, const std::string& command) {
  const std::string configured = cfg.get_str("run.id");
  if (!configured.empty()) return configured;
  return command + "-s" + cfg.get_str("run.seed");
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

struct Datasets {
  bbta::bench::ShapeDataset train;
  bbta::bench::ShapeDataset test_clean;
  bbta::bench::ShapeDataset test_corrupt;
};

/// Train and test come from one generation pass and a split, so the two
/// splits never overlap; data.file replaces the test split with an
/// imported BBTD tensor (train stays procedural for harness commands).
Datasets make_datasets(const bbta::Config& cfg) {
  Datasets ds;
  const std::size_t n_train = cfg.get_size("data.n_train");
  const std::size_t n_test = cfg.get_size("data.n_test");
  const std::size_t classes = cfg.get_size("data.num_classes");
  const std::size_t side = cfg.get_size("data.side");
  const std::uint64_t seed = cfg.get_size("data.seed");
  const bbta::bench::ShapeDataset all =
      bbta::bench::generate_dataset(n_train + n_test, classes, seed, side);
  std::vector<std::size_t> train_rows(n_train), test_rows(n_test);
  for (std::size_t i = 0; i < n_train; ++i) train_rows[i] = i;
  for (std::size_t i = 0; i < n_test; ++i) test_rows[i] = n_train + i;
  ds.train.images = all.images.gather_rows(train_rows);
  ds.train.num_classes = classes;
  ds.train.side = side;
  for (std::size_t i : train_rows) ds.train.labels.push_back(all.labels[i]);
  if (!cfg.get_str("data.file").empty()) {
    ds.test_clean = bbta::bench::load_dataset_file(cfg.get_str("data.file"));
  } else {
    ds.test_clean.images = all.images.gather_rows(test_rows);
    ds.test_clean.num_classes = classes;
    ds.test_clean.side = side;
    for (std::size_t i : test_rows) ds.test_clean.labels.push_back(all.labels[i]);
  }
  bbta::bench::Corruption corruption;
  corruption.kind = bbta::bench::corruption_from_name(cfg.get_str("corrupt.kind"));
  corruption.severity = static_cast<int>(cfg.get_int("corrupt.severity"));
  ds.test_corrupt = bbta::bench::corrupt(ds.test_clean, corruption, cfg.get_size("corrupt.seed"));
  return ds;
}

std::shared_ptr<bbta::BlackBoxModel> load_deployed(const bbta::Config& cfg,
                                                   std::size_t num_classes) {
  const std::string path = cfg.get_str("deployed.weights");
  if (path.empty())
    throw bbta::ConfigError("deployed.weights must point to a BBTN file for this command");
  return bbta::bench::freeze_deployed(bbta::io::load_network_file(path), num_classes);
}

void write_common_outputs(const std::filesystem::path& dir, const bbta::Config& cfg,
                          const json& summary) {
  bbta::report::write_file((dir / "config_echo.ini").string(), cfg.echo());
  bbta::report::write_file((dir / "summary.json").string(), summary.dump(2) + "\n");
}

json accuracy_table(const std::string& corruption, double baseline, double final_acc) {
  json t = json::object();
  t[corruption] = {{"unadapted", baseline}, {"adapted", final_acc}};
  return t;
}

int cmd_train_deployed(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  const bbta::bench::DeployedTrainConfig dc = cfg.deployed_config();
  bbta::Network net =
      bbta::bench::train_deployed_net(ds.train, dc, cfg.get_size("deployed.seed"));
  bbta::io::save_network_file((dir / "deployed.bbtn").string(), net);
  auto model = bbta::bench::freeze_deployed(std::move(net), ds.train.num_classes);
  const double clean_acc = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_clean);
  const double corrupt_acc = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_corrupt);

  json summary = bbta::report::summary_base("train-deployed", run_id_of(cfg, "train-deployed"),
                                            cfg.values(), model->query_count(), timer.seconds());
  summary["clean_test_accuracy"] = clean_acc;
  summary["corrupt_test_accuracy"] = corrupt_acc;
  summary["weights"] = (dir / "deployed.bbtn").string();
  write_common_outputs(dir, cfg, summary);
  std::cout << "clean test accuracy " << clean_acc << ", corrupted " << corrupt_acc << "\n";
  return 0;
}

int cmd_adapt_offline(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  auto model = load_deployed(cfg, ds.test_corrupt.num_classes);
  const bbta::DataAdaptor adaptor(cfg.adaptor_spec());
  const bbta::RunConfig rc = cfg.run_config();
  const double baseline = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_corrupt);
  const bbta::RunResult result = bbta::soda_offline(*model, adaptor, ds.test_corrupt, rc);

  const std::string run_id = run_id_of(cfg, "adapt-offline");
  bbta::report::write_file((dir / "metrics.csv").string(),
                           bbta::report::metrics_csv(run_id, result.metrics));
  bbta::report::write_file(
      (dir / "selection.csv").string(),
      bbta::report::selection_csv(result.records, result.selection.is_reliable));
  bbta::io::save_network_file((dir / "adaptor.bbtn").string(),
                              adaptor.with_params(result.theta));
  json summary = bbta::report::summary_base("adapt-offline", run_id, cfg.values(),
                                            result.total_queries, timer.seconds());
  summary["baseline_accuracy"] = baseline;
  summary["final_accuracy"] = result.final_accuracy;
  summary["reliable_count"] = result.selection.reliable.size();
  summary["accuracy"] = accuracy_table(cfg.get_str("corrupt.kind"), baseline,
                                       result.final_accuracy);
  write_common_outputs(dir, cfg, summary);
  std::cout << "unadapted " << baseline << " -> adapted " << result.final_accuracy << " ("
            << result.total_queries << " queries)\n";
  return 0;
}

int cmd_adapt_online(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  auto model = load_deployed(cfg, ds.test_corrupt.num_classes);
  const bbta::DataAdaptor adaptor(cfg.adaptor_spec());
  bbta::RunConfig rc = cfg.run_config();
  rc.mode = bbta::RunMode::kOnline;
  const double baseline = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_corrupt);
  const bbta::OnlineResult result = bbta::soda_online(*model, adaptor, ds.test_corrupt, rc);

  const std::string run_id = run_id_of(cfg, "adapt-online");
  bbta::report::write_file((dir / "metrics.csv").string(),
                           bbta::report::metrics_csv(run_id, result.metrics));
  bbta::io::save_network_file((dir / "adaptor.bbtn").string(),
                              adaptor.with_params(result.theta));
  json summary = bbta::report::summary_base("adapt-online", run_id, cfg.values(),
                                            result.total_queries, timer.seconds());
  summary["baseline_accuracy"] = baseline;
  summary["stream_accuracy"] = result.stream_accuracy;
  summary["accuracy"] =
      accuracy_table(cfg.get_str("corrupt.kind"), baseline, result.stream_accuracy);
  write_common_outputs(dir, cfg, summary);
  std::cout << "unadapted " << baseline << " -> online stream " << result.stream_accuracy
            << "\n";
  return 0;
}

int cmd_baseline(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  auto model = load_deployed(cfg, ds.test_corrupt.num_classes);
  const bbta::RunConfig rc = cfg.run_config();
  const std::string method = cfg.get_str("baseline.method");
  const double baseline_acc = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_corrupt);

  const std::string run_id = run_id_of(cfg, "baseline-" + method);
  double final_acc = 0.0;
  std::uint64_t queries = 0;
  std::vector<bbta::EpochMetrics> metrics;
  if (method == "da-pl" || method == "da-direct" || method == "da-zoo-input") {
    bbta::AdaptorSpec spec = cfg.adaptor_spec();
    if (method == "da-direct") spec.mode = bbta::AdaptorMode::kDirect;
    const bbta::DataAdaptor adaptor(spec);
    bbta::RunResult result;
    if (method == "da-pl") result = bbta::baseline_da_pl(*model, adaptor, ds.test_corrupt, rc);
    else if (method == "da-direct")
      result = bbta::baseline_da_direct(*model, adaptor, ds.test_corrupt, rc);
    else result = bbta::baseline_da_zoo_input(*model, adaptor, ds.test_corrupt, rc);
    final_acc = result.final_accuracy;
    queries = result.total_queries;
    metrics = std::move(result.metrics);
    bbta::io::save_network_file((dir / "adaptor.bbtn").string(),
                                adaptor.with_params(result.theta));
  } else if (method == "da-pgd") {
    const bbta::PgdResult result =
        bbta::baseline_da_pgd(*model, ds.test_corrupt, rc, cfg.get_real("pgd.step_size"));
    final_acc = result.final_accuracy;
    queries = result.total_queries;
    metrics = std::move(result.metrics);
    bbta::bench::ShapeDataset adapted = ds.test_corrupt;
    adapted.images = result.adapted;
    bbta::bench::save_dataset_file((dir / "adapted.bbtd").string(), adapted);
  } else {
    throw bbta::ConfigError("baseline.method must be one of da-pl, da-direct, da-pgd, da-zoo-input");
  }

  bbta::report::write_file((dir / "metrics.csv").string(),
                           bbta::report::metrics_csv(run_id, metrics));
  json summary =
      bbta::report::summary_base("baseline", run_id, cfg.values(), queries, timer.seconds());
  summary["method"] = method;
  summary["baseline_accuracy"] = baseline_acc;
  summary["final_accuracy"] = final_acc;
  summary["accuracy"] = accuracy_table(cfg.get_str("corrupt.kind"), baseline_acc, final_acc);
  write_common_outputs(dir, cfg, summary);
  std::cout << method << ": unadapted " << baseline_acc << " -> " << final_acc << "\n";
  return 0;
}

int cmd_grad_error(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  auto model = load_deployed(cfg, ds.test_corrupt.num_classes);

  bbta::AdaptorSpec spec = cfg.adaptor_spec();
  spec.mid_channels = cfg.get_size("graderr.adaptor_mid_channels");
  const bbta::DataAdaptor adaptor(spec);
  const bbta::RunConfig rc = cfg.run_config();
  bbta::NoiseSpec noise;
  noise.flip_rate = cfg.get_real("graderr.flip_rate");
  noise.bias_low_confidence = cfg.get_bool("graderr.bias_low_confidence");
  noise.seed = rc.seed;

  bbta::bench::ShapeDataset small = ds.test_corrupt;
  const std::size_t n_small = std::min(cfg.get_size("graderr.n_test"), small.size());
  std::vector<std::size_t> rows(n_small);
  for (std::size_t i = 0; i < n_small; ++i) rows[i] = i;
  small.images = small.images.gather_rows(rows);
  small.labels.resize(n_small);

  const bbta::GradErrorReport report = bbta::grad_error_experiment(
      *model, adaptor, small, noise, cfg.get_real("graderr.tau"), rc,
      cfg.get_size("graderr.trials"));

  std::string csv = "trial,naive_error,robust_error\n";
  for (std::size_t t = 0; t < report.trials; ++t)
    csv += std::to_string(t) + "," + bbta::report::format_double(report.naive_errors[t]) + "," +
           bbta::report::format_double(report.robust_errors[t]) + "\n";
  bbta::report::write_file((dir / "graderr_trials.csv").string(), csv);

  json summary = bbta::report::summary_base("grad-error", run_id_of(cfg, "grad-error"),
                                            cfg.values(), model->query_count(), timer.seconds());
  summary["trials"] = report.trials;
  summary["naive_mean"] = report.naive_mean;
  summary["naive_se"] = report.naive_se;
  summary["robust_mean"] = report.robust_mean;
  summary["robust_se"] = report.robust_se;
  summary["diff_mean"] = report.diff_mean;
  summary["diff_se"] = report.diff_se;
  write_common_outputs(dir, cfg, summary);
  std::cout << "naive " << report.naive_mean << " +- " << report.naive_se << ", robust "
            << report.robust_mean << " +- " << report.robust_se << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  Datasets ds = make_datasets(cfg);
  auto model = load_deployed(cfg, ds.test_corrupt.num_classes);
  const double baseline = bbta::bench::evaluate(*model, nullptr, nullptr, ds.test_corrupt);
  double adapted_acc = baseline;
  const std::string adaptor_weights = cfg.get_str("adaptor.weights");
  if (!adaptor_weights.empty()) {
    const bbta::DataAdaptor adaptor(cfg.adaptor_spec());
    const bbta::Network net = bbta::io::load_network_file(adaptor_weights);
    if (net.param_count() != adaptor.param_count())
      throw bbta::ConfigError("adaptor.weights does not match the configured adaptor shape");
    const bbta::Tensor theta = net.flatten_params();
    adapted_acc = bbta::bench::evaluate(*model, &adaptor, &theta, ds.test_corrupt);
  }
  json summary = bbta::report::summary_base("eval", run_id_of(cfg, "eval"), cfg.values(),
                                            model->query_count(), timer.seconds());
  summary["baseline_accuracy"] = baseline;
  summary["final_accuracy"] = adapted_acc;
  summary["accuracy"] = accuracy_table(cfg.get_str("corrupt.kind"), baseline, adapted_acc);
  write_common_outputs(dir, cfg, summary);
  std::cout << "unadapted " << baseline << ", adapted " << adapted_acc << "\n";
  return 0;
}

int cmd_selftest(const CommonArgs& args) {
  Timer timer;
  bbta::Config cfg = make_config(args);
  const auto dir = resolve_out_dir(args);
  const std::vector<bbta::selftest::CheckResult> results = bbta::selftest::run_all();
  bool all_pass = true;
  json checks = json::array();
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    checks.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    all_pass = all_pass && r.pass;
  }
  json summary = bbta::report::summary_base("selftest", run_id_of(cfg, "selftest"), cfg.values(),
                                            0, timer.seconds());
  summary["checks"] = checks;
  summary["all_pass"] = all_pass;
  write_common_outputs(dir, cfg, summary);
  return all_pass ? 0 : 1;
}

/// Serves a BBTN network over stdio: one base64 tensor request per line,
/// one base64 probability tensor per line. The counterpart of the
/// remote-model adapter, so external processes can wrap this CLI — and
/// this CLI can wrap external classifiers speaking the same protocol.
int cmd_serve_model(const std::string& weights_path) {
  const bbta::Network net = bbta::io::load_network_file(weights_path);
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    const bbta::Tensor x = bbta::io::tensor_from_bytes(bbta::io::base64_decode(line));
    const bbta::Tensor p = net.forward(x);
    std::cout << bbta::io::base64_encode(bbta::io::tensor_to_bytes(p)) << "\n";
    std::cout.flush();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"test-time data adaptation for query-only classifiers"};
  app.require_subcommand(1);

  CommonArgs train_args, offline_args, online_args, baseline_args, graderr_args, eval_args,
      selftest_args;
  std::string serve_weights;

  add_common(app.add_subcommand("train-deployed", "train and freeze the harness model"),
             train_args);
  add_common(app.add_subcommand("adapt-offline", "offline adaptation over the whole test set"),
             offline_args);
  add_common(app.add_subcommand("adapt-online", "online adaptation over a batch stream"),
             online_args);
  add_common(app.add_subcommand("baseline", "forward-only baselines (baseline.method)"),
             baseline_args);
  add_common(app.add_subcommand("grad-error", "gradient estimation error measurement"),
             graderr_args);
  add_common(app.add_subcommand("eval", "evaluate stored weights"), eval_args);
  add_common(app.add_subcommand("selftest", "run the invariant suites"), selftest_args);
  CLI::App* serve = app.add_subcommand("serve-model", "serve a BBTN model over stdio");
  serve->add_option("--weights", serve_weights, "BBTN weights file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "train-deployed") return cmd_train_deployed(train_args);
    if (command == "adapt-offline") return cmd_adapt_offline(offline_args);
    if (command == "adapt-online") return cmd_adapt_online(online_args);
    if (command == "baseline") return cmd_baseline(baseline_args);
    if (command == "grad-error") return cmd_grad_error(graderr_args);
    if (command == "eval") return cmd_eval(eval_args);
    if (command == "selftest") return cmd_selftest(selftest_args);
    if (command == "serve-model") return cmd_serve_model(serve_weights);
    std::cerr << "{\"error\":\"unknown command\"}\n";
    return 2;
  } catch (const bbta::ConfigError& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"command", command}, {"kind", "config"}}
                     .dump()
              << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"command", command}, {"kind", "runtime"}}
                     .dump()
              << "\n";
    return 1;
  }
}
