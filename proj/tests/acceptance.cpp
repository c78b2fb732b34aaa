// Acceptance suite: one PASS / FAIL / SKIP line per criterion. Exit status is
// non-zero when any criterion fails; skipped criteria do not fail the run.
//
// Training-scale criteria (5, 7, 8) re-evaluate the checkpoints shipped in
// results/ on the test split and cross-check the stored report; retraining
// them is a matter of running the configs in configs/ through `evnn train`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "evnn/trainer.hpp"
#include "gradcheck.hpp"

using namespace evnn;
namespace fs = std::filesystem;

namespace {

enum class Status { kPass, kFail, kSkip };

struct Outcome {
  Status status;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {Status::kFail, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kFail ? "FAIL" : "SKIP";
  if (o.status == Status::kFail) ++failures;
  std::printf("[%s] %2d %s: %s (%.1f s)\n", tag, id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path kSource = EVNN_SOURCE_DIR;

// ---------------------------------------------------------------------------
// 1. Gradient exactness

Outcome gradient_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset d = generate_yinyang(50, 42);
  struct Case {
    std::string name;
    std::unique_ptr<EvNN> net;
    Readout readout;
    LogitKind kind;
  };
  std::vector<Case> cases;
  cases.push_back({"LIF ttfs", std::make_unique<FFEvNN>(5, std::vector<LayerSpec>{{make_lif(), 10, 14.0, 28.0},
                                                                                  {make_lif(), 3, 14.0, 28.0}}),
                   Readout::kTtfs, LogitKind::kIntegral});
  cases.push_back({"LIF exp", std::make_unique<FFEvNN>(5, std::vector<LayerSpec>{{make_lif(), 10, 14.0, 28.0},
                                                                                 {make_li(), 3, 14.0, 28.0}}),
                   Readout::kState, LogitKind::kExpIntegral});
  cases.push_back({"QIF integral", std::make_unique<FFEvNN>(5, std::vector<LayerSpec>{{make_qif(), 10, 40.0, 80.0},
                                                                                      {make_li(), 3, 40.0, 80.0}}),
                   Readout::kState, LogitKind::kIntegral});
  // Default QIF weights leave TTFS outputs mostly silent, where the gradient
  // is exactly zero; a stronger draw makes them fire.
  cases.push_back({"QIF ttfs", std::make_unique<FFEvNN>(5, std::vector<LayerSpec>{{make_qif(), 10, 150.0, 80.0},
                                                                                  {make_qif(), 3, 150.0, 80.0}}),
                   Readout::kTtfs, LogitKind::kIntegral});
  bool ok = true;
  std::string detail;
  std::uint64_t seed = 100;
  for (auto& c : cases) {
    const auto r = check::grad_check(*c.net, c.net->init_params(seed), d, c.readout, c.kind, 30.0, 20, 1e-3, seed + 1);
    ++seed;
    ok = ok && r.checked == 20 && r.failures.empty();
    detail += c.name + " " + std::to_string(r.checked) + "/20 worst rel " + num(r.worst, 2) + "; ";
    if (!r.failures.empty()) detail += "first failure " + r.failures.front() + "; ";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ok = ok && secs < 60.0;
  return {ok ? Status::kPass : Status::kFail, detail + "runtime " + num(secs, 3) + " s (< 60)"};
}

// ---------------------------------------------------------------------------
// 2, 3. Single LIF neuron against the closed form
//   V(t) = w tau_s / (tau_m - tau_s) (exp(-t/tau_m) - exp(-t/tau_s)),  tau_m 20, tau_s 5.

double oracle_crossing(double w) {
  auto v = [w](double t) { return w * 5.0 / 15.0 * (std::exp(-t / 20.0) - std::exp(-t / 5.0)) - 1.0; };
  double a = 0.0, b = 20.0 * std::log(4.0) / 3.0;  // rising branch ends at the peak
  if (v(b) <= 0.0) throw std::invalid_argument("weight too small to cross");
  while (b - a > 1e-14) {
    const double m = 0.5 * (a + b);
    (v(m) >= 0.0 ? b : a) = m;
  }
  return 0.5 * (a + b);
}

struct EngineSpike {
  double time;
  double dt_dw;
};

EngineSpike engine_crossing(double w, double h) {
  FFEvNN net(1, {{make_lif(), 1, 0.0, 0.0}}, {.step = h, .max_time = 30.0});
  ParamSet ps = net.init_params(0);
  ps.at("layer0.W").data = {w};
  ps.at("layer0.I_c").data = {0.0};
  ad::Tape tape;
  const auto vars = net.bind(tape, ps);
  const TrialOutput out = net.simulate(tape, vars, {{{0, 0.0}}, 0.0}, {});
  if (!out.first_spike[0].valid()) throw std::runtime_error("neuron did not fire");
  tape.backward(out.first_spike[0]);
  return {out.first_spike[0].value(), vars[0].grads()[0]};
}

constexpr double kWeight = 10.0;

Outcome event_time_order() {
  const double exact = oracle_crossing(kWeight);
  const double hs[] = {0.1, 0.05, 0.025};
  double err[3];
  double c = 0.0;
  for (int i = 0; i < 3; ++i) {
    err[i] = std::abs(engine_crossing(kWeight, hs[i]).time - exact);
    c = std::max(c, err[i] / hs[i]);
  }
  const double p1 = std::log2(err[0] / err[1]);
  const double p2 = std::log2(err[1] / err[2]);
  const bool ok = p1 >= 1.0 && p2 >= 1.0;
  return {ok ? Status::kPass : Status::kFail,
          "t* " + num(exact, 10) + " ms, errors " + num(err[0], 3) + " / " + num(err[1], 3) + " / " + num(err[2], 3) +
              ", error ratios " + num(err[0] / err[1], 4) + " and " + num(err[1] / err[2], 4) + ", observed order " +
              num(p1, 4) + " and " + num(p2, 4) + " (>= 1), C = " + num(c, 3)};
}

// The gate compares against the continuous crossing time, so Euler's O(h)
// error in t*(w) shows up here. The detail also compares the reverse pass
// with finite differences of the discrete forward program it differentiates.
Outcome ift_rule() {
  const double delta = 1e-4;
  const double fd = (oracle_crossing(kWeight + delta) - oracle_crossing(kWeight - delta)) / (2.0 * delta);
  const double engine = engine_crossing(kWeight, 0.01).dt_dw;
  const double rel = std::abs(engine - fd) / std::abs(fd);
  const double discrete_fd =
      (engine_crossing(kWeight + delta, 0.01).time - engine_crossing(kWeight - delta, 0.01).time) / (2.0 * delta);
  const double rel_discrete = std::abs(engine - discrete_fd) / std::abs(discrete_fd);
  const double rel_fine = std::abs(engine_crossing(kWeight, 0.001).dt_dw - fd) / std::abs(fd);
  return {rel < 1e-4 ? Status::kPass : Status::kFail,
          "engine dt*/dw " + num(engine, 10) + ", oracle " + num(fd, 10) + ", rel " + num(rel, 3) +
              " (< 1e-4); against finite differences of the engine's own t* rel " + num(rel_discrete, 3) +
              "; against the oracle at h = 0.001 rel " + num(rel_fine, 3)};
}

// ---------------------------------------------------------------------------
// Shipped runs

struct ShippedRun {
  TrainConfig cfg;
  std::vector<double> test_acc;  // percent, re-evaluated
  std::vector<double> max_firing;
  std::string report;
};

ShippedRun reevaluate(const std::string& name) {
  const fs::path dir = kSource / "results" / name;
  if (!fs::exists(dir / "config.json") || !fs::exists(dir / "report.txt"))
    throw std::runtime_error("missing results/" + name + " (config.json, report.txt)");
  ShippedRun r{load_config((dir / "config.json").string()), {}, {}, slurp(dir / "report.txt")};
  const Splits data = load_splits(r.cfg);
  const auto net = build_network(r.cfg, data.train.channels, data.train.classes);
  for (std::uint64_t s : r.cfg.seeds) {
    ParamSet ps = net->init_params(s);
    load_checkpoint(ps, r.cfg.seeds.size() == 1 ? dir.string() : (dir / ("seed_" + std::to_string(s))).string());
    const EvalResult e = evaluate(*net, r.cfg, ps, data.test, 1);
    r.test_acc.push_back(100.0 * e.accuracy);
    r.max_firing.push_back(e.spikes.max_firing);
  }
  return r;
}

// Re-evaluated accuracies must reproduce the report line exactly.
bool matches_report(const ShippedRun& r) {
  return r.report.find("Accuracy [%]  " + format_aggregate(aggregate(r.test_acc))) != std::string::npos;
}

std::string describe(const ShippedRun& r) {
  return std::to_string(r.test_acc.size()) + " seeds, " + std::to_string(r.cfg.epochs) + " epochs, test " +
         format_aggregate(aggregate(r.test_acc)) + " %" + (matches_report(r) ? ", matches report.txt" : ", DIFFERS from report.txt");
}

Outcome amos_invariant() {
  // Freshly initialised network plus every shipped AMOS run.
  TrainConfig c = config_from_json({{"dataset", "yinyang"}, {"model", "lif"}, {"loss", "ttfs"}, {"amos", true}});
  c.test_size = 300;
  const Splits data = load_splits(c);
  const auto net = build_network(c, data.train.channels, data.train.classes);
  const EvalResult fresh = evaluate(*net, c, net->init_params(0), data.test, 1);
  bool ok = fresh.spikes.max_firing == 1.0;
  std::string detail = "fresh init max firing " + detail::fixed(fresh.spikes.max_firing);
  const ShippedRun r = reevaluate("yinyang_lif_ttfs_amos");
  const Aggregate a = aggregate(r.max_firing);
  ok = ok && a.mean == 1.0 && a.std == 0.0 && r.report.find("Max Firing    1.00 ± 0.00 (1.00)") != std::string::npos;
  detail += "; trained LIF TTFS AMOS max firing " + format_aggregate(a) + " over " + std::to_string(a.n) + " seeds";
  return {ok ? Status::kPass : Status::kFail, detail};
}

Outcome threshold(const std::string& name, const ShippedRun& r, double gate, bool median, std::size_t seeds) {
  const Aggregate a = aggregate(r.test_acc);
  const double v = median ? a.median : a.mean;
  const bool ok = v >= gate && matches_report(r) && r.test_acc.size() == seeds;
  return {ok ? Status::kPass : Status::kFail,
          name + " " + (median ? "median " : "mean ") + detail::fixed(v) + " % (>= " + num(gate) + ") [" + describe(r) + "]"};
}

Outcome threshold(const std::string& name, double gate, bool median, std::size_t seeds) {
  return threshold(name, reevaluate(name), gate, median, seeds);
}

Outcome yinyang_accuracy() {
  const struct {
    const char* name;
    double gate;
  } runs[] = {{"yinyang_qif_integral", 98.5}, {"yinyang_lif_exp", 95.5}, {"yinyang_lif_ttfs_amos", 89.0}};
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    const Outcome o = threshold(r.name, r.gate, false, 5);
    ok = ok && o.status == Status::kPass;
    detail += (detail.empty() ? "" : "; ") + o.detail;
  }
  return {ok ? Status::kPass : Status::kFail, detail};
}

// ---------------------------------------------------------------------------
// 6. MNIST reduced scale; needs the IDX files.

Outcome mnist_reduced() {
  const char* dir = std::getenv("EVNN_MNIST_DIR");
  if (!dir || !*dir) return {Status::kSkip, "set EVNN_MNIST_DIR to the directory holding the four IDX files"};
  const ShippedRun r = reevaluate("mnist_lif_exp_reduced");
  const bool reduced = r.cfg.hidden == std::vector<std::size_t>{100} && r.cfg.train_size == 10000 && r.cfg.epochs == 10;
  const Outcome o = threshold("mnist_lif_exp_reduced", r, 90.0, false, 1);
  return {o.status == Status::kPass && reduced ? Status::kPass : Status::kFail,
          std::string(reduced ? "784-100-10, 10k train, 10 epochs: " : "NOT the reduced setup: ") + o.detail};
}

// ---------------------------------------------------------------------------
// 9. Throughput trends

Outcome throughput() {
  TrainConfig c = config_from_json({{"dataset", "yinyang"}, {"model", "lif"}, {"loss", "exp"}});
  c.train_size = 1000;
  c.bench.batch_sizes = {8, 16};
  c.bench.hidden_sizes = {50};
  c.bench.steps = {0.1, 0.05, 0.025};
  const auto rows = bench(c, 0);
  bool fwd_faster = true;
  for (const auto& r : rows) fwd_faster = fwd_faster && r.forward_sps > r.backward_sps;
  // Cost per sample (1 / samples per second) must grow as h shrinks.
  bool cost_grows = true;
  std::string ratios;
  for (std::size_t bs : c.bench.batch_sizes) {
    std::vector<double> cost;
    for (const auto& r : rows)
      if (r.batch_size == bs) cost.push_back(1.0 / r.forward_sps);
    for (std::size_t i = 1; i < cost.size(); ++i) {
      cost_grows = cost_grows && cost[i] > cost[i - 1];
      ratios += (ratios.empty() ? "" : ", ") + num(cost[i] / cost[i - 1], 3);
    }
  }
  return {fwd_faster && cost_grows ? Status::kPass : Status::kFail,
          std::string("forward > forward+backward at every point: ") + (fwd_faster ? "yes" : "no") +
              "; forward cost ratio per halving of h: " + ratios};
}

// ---------------------------------------------------------------------------
// 10. Determinism through the command-line tool

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "evnn_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "config.json");
    os << R"({"dataset": "yinyang", "model": "lif", "loss": "exp", "hidden": [16],
             "train_size": 256, "val_size": 128, "test_size": 128, "batch_size": 32, "epochs": 3})";
  }
  auto run = [&](const std::string& out, int workers) {
    const std::string cmd = std::string(EVNN_CLI) + " train --config " + (dir / "config.json").string() +
                            " --seed 3 --workers " + std::to_string(workers) + " --out-dir " + (dir / out).string() +
                            " > " + (dir / (out + ".log")).string() + " 2>&1";
    if (std::system(cmd.c_str()) != 0) throw std::runtime_error("command failed: " + cmd);
    return slurp(dir / out / "metrics.csv");
  };
  const std::string a = run("a", 1);
  const std::string b = run("b", 1);
  const std::string c = run("c", 2);
  const bool ok = !a.empty() && a == b && a == c;
  return {ok ? Status::kPass : Status::kFail,
          "two `evnn train` runs (seed 3) give " + std::string(a == b ? "byte-identical" : "DIFFERENT") +
              " metrics.csv (" + std::to_string(a.size()) + " bytes); with 2 workers: " +
              (a == c ? "identical" : "DIFFERENT")};
}

}  // namespace

int main() {
  report(1, "gradient exactness", gradient_exactness);
  report(2, "event-time oracle", event_time_order);
  report(3, "IFT rule", ift_rule);
  report(4, "AMOS invariant", amos_invariant);
  report(5, "Yin-Yang accuracy", yinyang_accuracy);
  report(6, "MNIST reduced scale", mnist_reduced);
  report(7, "delayed XOR", [] { return threshold("xor_egru", 95.0, false, 1); });
  report(8, "multi-compartment", [] { return threshold("yinyang_dendritic_integral", 90.0, true, 5); });
  report(9, "throughput trends", throughput);
  report(10, "determinism", determinism);
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
