// Command-line front end: train, eval, bench, gen-data.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "evnn/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t workers = 0;
  bool dump = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON file mirroring TrainConfig")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run a single seed");
  app->add_option("--out-dir", c.out_dir, "output directory");
  app->add_option("--workers", c.workers, "worker threads per batch");
  app->add_flag("--dump-trajectories", c.dump, "write per-step state trajectories for a few test samples");
}

evnn::TrainConfig resolve(const Common& c) {
  evnn::TrainConfig cfg = c.config.empty() ? evnn::config_from_json(nlohmann::json::object()) : evnn::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.workers > 0) cfg.workers = c.workers;
  return cfg;
}

int cmd_train(const Common& c) {
  const evnn::TrainConfig cfg = resolve(c);
  evnn::TrainHooks hooks;
  hooks.on_epoch = [](const std::string& row) { std::cerr << row << "\n"; };
  std::cerr << evnn::kMetricsHeader << "\n";
  const auto runs = evnn::train(cfg, hooks);
  if (c.dump) {
    const evnn::Splits data = evnn::load_splits(cfg);
    const auto net = evnn::build_network(cfg, data.test.channels, data.test.classes);
    for (const auto& r : runs) {
      const fs::path dir = evnn::seed_dir(cfg, r.seed);
      evnn::write_trajectories(*net, cfg, r.params, data.test, cfg.dump_count, (dir / "trajectories.csv").string());
    }
  }
  std::cout << evnn::format_report(cfg, runs);
  return 0;
}

// Evaluates the checkpoint found in each seed directory on the test split.
int cmd_eval(const Common& c, const std::string& checkpoint_dir) {
  const evnn::TrainConfig cfg = resolve(c);
  const evnn::Splits data = evnn::load_splits(cfg);
  const auto net = evnn::build_network(cfg, data.test.channels, data.test.classes);
  std::vector<evnn::RunResult> runs;
  for (std::uint64_t seed : cfg.seeds) {
    evnn::TrainConfig at = cfg;
    if (!checkpoint_dir.empty()) at.out_dir = checkpoint_dir;
    const std::string dir = evnn::seed_dir(at, seed);
    evnn::RunResult r;
    r.seed = seed;
    r.params = net->init_params(seed);
    evnn::load_checkpoint(r.params, dir);
    r.val = evnn::evaluate(*net, cfg, r.params, data.val, cfg.workers);
    r.test = evnn::evaluate(*net, cfg, r.params, data.test, cfg.workers);
    if (c.dump) evnn::write_trajectories(*net, cfg, r.params, data.test, cfg.dump_count, dir + "/trajectories.csv");
    runs.push_back(std::move(r));
  }
  fs::create_directories(cfg.out_dir);
  const std::string report = evnn::format_report(cfg, runs);
  evnn::write_text((fs::path(cfg.out_dir) / "report.txt").string(), report);
  std::cout << report;
  return 0;
}

int cmd_bench(const Common& c) {
  const evnn::TrainConfig cfg = resolve(c);
  fs::create_directories(cfg.out_dir);
  std::cerr << "batch_size,hidden,step_ms,workers,forward_samples_per_s,forward_backward_samples_per_s\n";
  const auto rows = evnn::bench(cfg, cfg.seeds.front(), [](const evnn::BenchRow& r) {
    std::cerr << evnn::bench_csv({r}).substr(evnn::bench_csv({}).size());
  });
  const std::string csv = evnn::bench_csv(rows);
  evnn::write_text((fs::path(cfg.out_dir) / "bench.csv").string(), csv);
  std::cout << csv;
  return 0;
}

int cmd_gen_data(const Common& c) {
  const evnn::TrainConfig cfg = resolve(c);
  const evnn::Splits s = evnn::load_splits(cfg);
  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  evnn::write_dataset_csv(s.train, (out / (cfg.dataset + "_train.csv")).string());
  evnn::write_dataset_csv(s.val, (out / (cfg.dataset + "_val.csv")).string());
  evnn::write_dataset_csv(s.test, (out / (cfg.dataset + "_test.csv")).string());
  std::cout << "wrote " << s.train.size() << "/" << s.val.size() << "/" << s.test.size() << " samples to " << out.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-based neural network training and simulation"};
  app.require_subcommand(1);
  Common train_opts, eval_opts, bench_opts, gen_opts;
  std::string checkpoint_dir;
  auto* train = app.add_subcommand("train", "train every configured seed and write the report");
  add_common(train, train_opts);
  auto* eval = app.add_subcommand("eval", "evaluate saved checkpoints on the test split");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint-dir", checkpoint_dir, "directory written by train (defaults to --out-dir)");
  auto* bench = app.add_subcommand("bench", "throughput over batch sizes, hidden sizes and step sizes");
  add_common(bench, bench_opts);
  auto* gen = app.add_subcommand("gen-data", "write the dataset splits as CSV");
  add_common(gen, gen_opts);
  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_opts);
    if (*eval) return cmd_eval(eval_opts, checkpoint_dir);
    if (*bench) return cmd_bench(bench_opts);
    if (*gen) return cmd_gen_data(gen_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
