#pragma once

// Experiment configuration, batched training (AdamW with global-norm
// clipping), evaluation, checkpoints, reports and the throughput benchmark.

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "evnn/adgraph.hpp"
#include "evnn/data.hpp"
#include "evnn/dynamics/dendritic.hpp"
#include "evnn/dynamics/egru.hpp"
#include "evnn/dynamics/eif.hpp"
#include "evnn/dynamics/izhikevich.hpp"
#include "evnn/dynamics/lif.hpp"
#include "evnn/dynamics/qif.hpp"
#include "evnn/dynamics/wrappers.hpp"
#include "evnn/network.hpp"
#include "evnn/objectives.hpp"

namespace evnn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchConfig {
  std::size_t batches = 50;
  std::vector<std::size_t> batch_sizes{16, 32, 64, 128};
  std::vector<std::size_t> hidden_sizes{50};
  std::vector<double> steps{0.1, 0.05, 0.025};
};

struct TrainConfig {
  std::string dataset = "yinyang";  // yinyang | mnist | xor
  std::string encoding = "latency";
  std::vector<std::size_t> hidden{50};
  std::string model = "lif";  // lif | qif | eif | izhikevich | egru | dendritic
  nlohmann::json model_options = nlohmann::json::object();
  bool amos = false;
  double refractory = 0.0;  // ms, 0 disables the wrapper
  bool recurrent = false;   // all-to-all recurrence on the last hidden layer
  std::string loss = "ttfs";  // ttfs | max | integral | exp
  TtfsLossParams ttfs;
  double weight_mean = 14.0;
  double weight_range = 28.0;
  // Leaky-integrator readout weights; default to the hidden-layer values
  // (14 +- 28 behind dendritic neurons).
  double output_weight_mean = 14.0;
  double output_weight_range = 28.0;
  double recurrent_mean = 0.0;
  double recurrent_range = 1.0;
  double step = 0.1;
  double max_time = 30.0;
  double input_time = kMaxInputTime;
  bool checkpoint = false;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  double lr = 0.005;
  double clip = 1.0;
  double weight_decay = 1e-4;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t workers = 1;
  std::string out_dir = "runs/out";
  // Dataset sizes; 0 keeps the default split size.
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
  std::string mnist_dir;
  XorOptions xor_options;
  std::size_t dump_count = 4;
  BenchConfig bench;

  Readout readout() const { return loss == "ttfs" ? Readout::kTtfs : Readout::kState; }
  LogitKind logit_kind() const { return readout() == Readout::kTtfs ? LogitKind::kIntegral : parse_logit_kind(loss); }
};

namespace detail {

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys{
      "dataset", "encoding", "hidden", "model", "model_options", "amos", "refractory", "recurrent",
      "loss", "ttfs", "weight_mean", "weight_range", "output_weight_mean", "output_weight_range", "recurrent_mean", "recurrent_range", "step",
      "max_time", "input_time", "checkpoint", "batch_size", "epochs", "lr", "clip", "weight_decay",
      "seeds", "workers", "out_dir", "train_size", "val_size", "test_size", "mnist_dir", "xor",
      "dump_count", "bench"};
  return keys;
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

// Default weight initialisation per model, U(mean +- range) before the fan-in scaling.
inline std::pair<double, double> default_weights(const std::string& model) {
  if (model == "lif") return {14.0, 28.0};
  if (model == "qif") return {40.0, 80.0};
  if (model == "eif" || model == "izhikevich") return {20.0, 40.0};
  if (model == "egru") return {0.0, 6.0};
  if (model == "dendritic") return {4.0, 8.0};
  throw ConfigError("unknown neuron model '" + model + "'");
}

}  // namespace detail

// Defaults depend on dataset, model and loss, so those are read first and
// every other key overrides the resulting defaults.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    const auto& k = detail::known_keys();
    if (std::find(k.begin(), k.end(), key) == k.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig c;
  detail::take(j, "dataset", c.dataset);
  detail::take(j, "model", c.model);
  detail::take(j, "loss", c.loss);
  if (c.loss != "ttfs") (void)parse_logit_kind(c.loss);
  std::tie(c.weight_mean, c.weight_range) = detail::default_weights(c.model);

  if (c.dataset == "yinyang") {
    c.hidden = c.model == "dendritic" ? std::vector<std::size_t>{} : std::vector<std::size_t>{50};
    c.batch_size = 256;
    c.lr = (c.loss == "ttfs" || c.model == "lif") ? 0.005 : 0.03;
    c.max_time = 30.0;
  } else if (c.dataset == "mnist") {
    c.hidden = {200};
    c.batch_size = 1024;
    c.lr = 0.005;
    c.max_time = 30.0;
  } else if (c.dataset == "xor") {
    c.hidden = {32};
    c.model = j.contains("model") ? c.model : "egru";
    c.recurrent = true;
    c.batch_size = 64;
    c.lr = 0.005;
    c.loss = j.contains("loss") ? c.loss : "exp";
    c.max_time = c.xor_options.t_max;
    std::tie(c.weight_mean, c.weight_range) = detail::default_weights(c.model);
  } else {
    throw ConfigError("unknown dataset '" + c.dataset + "'");
  }
  if (c.loss == "ttfs" && c.model == "lif") c.amos = true;

  detail::take(j, "encoding", c.encoding);
  if (c.encoding != "latency") throw ConfigError("only latency encoding is supported");
  detail::take(j, "hidden", c.hidden);
  if (j.contains("model_options")) {
    if (!j.at("model_options").is_object()) throw ConfigError("model_options must be an object");
    c.model_options = j.at("model_options");
  }
  detail::take(j, "amos", c.amos);
  detail::take(j, "refractory", c.refractory);
  detail::take(j, "recurrent", c.recurrent);
  if (j.contains("ttfs")) {
    const auto& t = j.at("ttfs");
    detail::take(t, "tau0", c.ttfs.tau0);
    detail::take(t, "tau1", c.ttfs.tau1);
    detail::take(t, "alpha", c.ttfs.alpha);
  }
  detail::take(j, "weight_mean", c.weight_mean);
  detail::take(j, "weight_range", c.weight_range);
  if (c.model != "dendritic") std::tie(c.output_weight_mean, c.output_weight_range) = std::pair{c.weight_mean, c.weight_range};
  detail::take(j, "output_weight_mean", c.output_weight_mean);
  detail::take(j, "output_weight_range", c.output_weight_range);
  detail::take(j, "recurrent_mean", c.recurrent_mean);
  detail::take(j, "recurrent_range", c.recurrent_range);
  if (j.contains("xor")) {
    const auto& x = j.at("xor");
    detail::take(x, "t_max", c.xor_options.t_max);
    detail::take(x, "jitter", c.xor_options.jitter);
    detail::take(x, "spikes_per_group", c.xor_options.spikes_per_group);
    if (c.dataset == "xor") c.max_time = c.xor_options.t_max;
  }
  detail::take(j, "step", c.step);
  detail::take(j, "max_time", c.max_time);
  detail::take(j, "input_time", c.input_time);
  detail::take(j, "checkpoint", c.checkpoint);
  detail::take(j, "batch_size", c.batch_size);
  detail::take(j, "epochs", c.epochs);
  detail::take(j, "lr", c.lr);
  detail::take(j, "clip", c.clip);
  detail::take(j, "weight_decay", c.weight_decay);
  detail::take(j, "seeds", c.seeds);
  detail::take(j, "workers", c.workers);
  detail::take(j, "out_dir", c.out_dir);
  detail::take(j, "train_size", c.train_size);
  detail::take(j, "val_size", c.val_size);
  detail::take(j, "test_size", c.test_size);
  detail::take(j, "mnist_dir", c.mnist_dir);
  detail::take(j, "dump_count", c.dump_count);
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    detail::take(b, "batches", c.bench.batches);
    detail::take(b, "batch_sizes", c.bench.batch_sizes);
    detail::take(b, "hidden_sizes", c.bench.hidden_sizes);
    detail::take(b, "steps", c.bench.steps);
  }

  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.workers == 0) throw ConfigError("workers must be positive");
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (!(c.step > 0.0) || !(c.max_time > 0.0)) throw ConfigError("step and max_time must be positive");
  if (!(c.lr >= 0.0) || !(c.clip > 0.0) || !(c.weight_decay >= 0.0)) throw ConfigError("invalid optimiser settings");
  if (c.refractory < 0.0) throw ConfigError("refractory period must be >= 0");
  if (c.recurrent && c.hidden.empty()) throw ConfigError("recurrence needs a hidden layer");
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset;
  j["encoding"] = c.encoding;
  j["hidden"] = c.hidden;
  j["model"] = c.model;
  j["model_options"] = c.model_options;
  j["amos"] = c.amos;
  j["refractory"] = c.refractory;
  j["recurrent"] = c.recurrent;
  j["loss"] = c.loss;
  j["ttfs"] = {{"tau0", c.ttfs.tau0}, {"tau1", c.ttfs.tau1}, {"alpha", c.ttfs.alpha}};
  j["weight_mean"] = c.weight_mean;
  j["weight_range"] = c.weight_range;
  j["output_weight_mean"] = c.output_weight_mean;
  j["output_weight_range"] = c.output_weight_range;
  j["recurrent_mean"] = c.recurrent_mean;
  j["recurrent_range"] = c.recurrent_range;
  j["step"] = c.step;
  j["max_time"] = c.max_time;
  j["input_time"] = c.input_time;
  j["checkpoint"] = c.checkpoint;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["clip"] = c.clip;
  j["weight_decay"] = c.weight_decay;
  j["seeds"] = c.seeds;
  j["workers"] = c.workers;
  j["out_dir"] = c.out_dir;
  j["train_size"] = c.train_size;
  j["val_size"] = c.val_size;
  j["test_size"] = c.test_size;
  j["mnist_dir"] = c.mnist_dir;
  j["xor"] = {{"t_max", c.xor_options.t_max},
              {"jitter", c.xor_options.jitter},
              {"spikes_per_group", c.xor_options.spikes_per_group}};
  j["dump_count"] = c.dump_count;
  j["bench"] = {{"batches", c.bench.batches},
                {"batch_sizes", c.bench.batch_sizes},
                {"hidden_sizes", c.bench.hidden_sizes},
                {"steps", c.bench.steps}};
  return j;
}

// ---------------------------------------------------------------------------
// Model and network construction

namespace detail {

inline double opt_num(const nlohmann::json& o, const char* key, double fallback) {
  return o.contains(key) ? o.at(key).get<double>() : fallback;
}

}  // namespace detail

inline ModelPtr make_model(const std::string& name, const nlohmann::json& o, std::size_t fan_in) {
  using detail::opt_num;
  if (name == "lif") {
    Lif::Options m;
    m.tau_mem = opt_num(o, "tau_mem", m.tau_mem);
    m.tau_syn = opt_num(o, "tau_syn", m.tau_syn);
    m.threshold = opt_num(o, "threshold", m.threshold);
    m.v_reset = opt_num(o, "v_reset", m.v_reset);
    return make_lif(m);
  }
  if (name == "qif") {
    Qif::Options m;
    m.tau_mem = opt_num(o, "tau_mem", m.tau_mem);
    m.tau_syn = opt_num(o, "tau_syn", m.tau_syn);
    return make_qif(m);
  }
  if (name == "eif") {
    Eif::Options m;
    m.tau_mem = opt_num(o, "tau_mem", m.tau_mem);
    m.tau_syn = opt_num(o, "tau_syn", m.tau_syn);
    m.v_t = opt_num(o, "v_t", m.v_t);
    m.delta_t = opt_num(o, "delta_t", m.delta_t);
    m.v_peak = opt_num(o, "v_peak", m.v_peak);
    return make_eif(m);
  }
  if (name == "izhikevich") {
    Izhikevich::Options m;
    m.a = opt_num(o, "a", m.a);
    m.b = opt_num(o, "b", m.b);
    m.c = opt_num(o, "c", m.c);
    m.d = opt_num(o, "d", m.d);
    m.tau_syn = opt_num(o, "tau_syn", m.tau_syn);
    return make_izhikevich(m);
  }
  if (name == "egru") {
    Egru::Options m;
    m.tau_mem = opt_num(o, "tau_mem", m.tau_mem);
    m.tau_syn = opt_num(o, "tau_syn", m.tau_syn);
    m.threshold = opt_num(o, "threshold", m.threshold);
    m.threshold_min = opt_num(o, "threshold_min", m.threshold_min);
    return make_egru(m);
  }
  if (name == "dendritic") {
    Dendritic::Options m;
    m.fan_in = fan_in;
    m.dendrites = o.contains("dendrites") ? o.at("dendrites").get<std::size_t>() : m.dendrites;
    m.tau_soma = opt_num(o, "tau_soma", m.tau_soma);
    m.tau_dendrite = opt_num(o, "tau_dendrite", m.tau_dendrite);
    m.tau_synapse = opt_num(o, "tau_synapse", m.tau_synapse);
    m.v_max = opt_num(o, "v_max", m.v_max);
    m.v_th = opt_num(o, "v_th", m.v_th);
    m.threshold = opt_num(o, "threshold", m.threshold);
    m.coupling_mean = opt_num(o, "coupling_mean", m.coupling_mean);
    m.coupling_range = opt_num(o, "coupling_range", m.coupling_range);
    return make_dendritic(m);
  }
  throw ConfigError("unknown neuron model '" + name + "'");
}

inline ModelPtr wrap_model(ModelPtr m, const TrainConfig& c) {
  if (c.refractory > 0.0) m = wrap_refractory(std::move(m), c.refractory);
  if (c.amos) m = wrap_amos(std::move(m));
  return m;
}

// Hidden layers use the configured model. The ttfs output layer uses the
// same model; the state readout appends leaky integrators.
inline std::unique_ptr<EvNN> build_network(const TrainConfig& c, std::size_t in, std::size_t classes) {
  std::vector<LayerSpec> layers;
  std::size_t fan = in;
  for (std::size_t h : c.hidden) {
    layers.push_back({wrap_model(make_model(c.model, c.model_options, fan), c), h, c.weight_mean, c.weight_range});
    fan = h;
  }
  const bool ttfs = c.readout() == Readout::kTtfs;
  if (c.model == "dendritic") {
    // One multi-compartment neuron per class, fed directly by the inputs.
    if (!c.hidden.empty()) throw ConfigError("the dendritic experiment has no hidden layers");
    layers.push_back({wrap_model(make_model("dendritic", c.model_options, in), c), classes, c.weight_mean,
                      c.weight_range});
    if (!ttfs) layers.push_back({make_li(), classes, c.output_weight_mean, c.output_weight_range});
  } else if (ttfs) {
    layers.push_back({wrap_model(make_model(c.model, c.model_options, fan), c), classes, c.weight_mean,
                      c.weight_range});
  } else {
    layers.push_back({make_li(), classes, c.output_weight_mean, c.output_weight_range});
  }
  NetworkOptions no;
  no.step = c.step;
  no.max_time = c.max_time;
  no.checkpoint = c.checkpoint;
  if (c.recurrent) {
    RecurrentSpec r{c.hidden.size() - 1, c.recurrent_mean, c.recurrent_range};
    return std::make_unique<RecEvNN>(in, std::move(layers), r, no);
  }
  return std::make_unique<FFEvNN>(in, std::move(layers), no);
}

// ---------------------------------------------------------------------------
// Data

inline Splits load_splits(const TrainConfig& c) {
  auto trim = [](Dataset& d, std::size_t n) {
    if (n > 0 && n < d.samples.size()) d.samples.resize(n);
  };
  Splits s;
  if (c.dataset == "yinyang") {
    s = {generate_yinyang(c.train_size ? c.train_size : 5000, 42, c.input_time),
         generate_yinyang(c.val_size ? c.val_size : 1000, 41, c.input_time),
         generate_yinyang(c.test_size ? c.test_size : 1000, 40, c.input_time)};
  } else if (c.dataset == "xor") {
    s = {generate_delayed_xor(c.train_size ? c.train_size : 5000, 1, c.xor_options),
         generate_delayed_xor(c.val_size ? c.val_size : 1000, 2, c.xor_options),
         generate_delayed_xor(c.test_size ? c.test_size : 1000, 3, c.xor_options)};
  } else if (c.dataset == "mnist") {
    // An empty mnist_dir falls back to $EVNN_MNIST_DIR.
    const char* env = std::getenv("EVNN_MNIST_DIR");
    const std::string dir = !c.mnist_dir.empty() ? c.mnist_dir : env ? env : "";
    if (dir.empty()) throw ConfigError("mnist_dir (or EVNN_MNIST_DIR) must point at the IDX files");
    namespace fs = std::filesystem;
    auto find = [&](const std::string& stem) {
      for (const std::string& suffix : {"", ".gz"}) {
        const fs::path p = fs::path(dir) / (stem + suffix);
        if (fs::exists(p)) return p.string();
      }
      throw ConfigError("missing " + stem + "[.gz] in " + dir);
    };
    const MnistImages train_img = read_mnist_images(find("train-images-idx3-ubyte"));
    const auto train_lab = read_mnist_labels(find("train-labels-idx1-ubyte"));
    const MnistImages test_img = read_mnist_images(find("t10k-images-idx3-ubyte"));
    const auto test_lab = read_mnist_labels(find("t10k-labels-idx1-ubyte"));
    // The tail of the training file is held out for validation (5000 by default).
    const std::size_t n = train_img.count;
    const std::size_t n_val = c.val_size ? c.val_size : 5000;
    if (n_val >= n) throw ConfigError("validation split needs fewer than " + std::to_string(n) + " images");
    const std::size_t n_fit = n - n_val;
    s.train = mnist_dataset(train_img, train_lab, 0, c.train_size ? std::min(n_fit, c.train_size) : n_fit);
    s.val = mnist_dataset(train_img, train_lab, n_fit, n);
    s.test = mnist_dataset(test_img, test_lab, 0, test_img.count);
    trim(s.test, c.test_size);
    return s;
  } else {
    throw ConfigError("unknown dataset '" + c.dataset + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Optimiser

inline double global_norm(const std::vector<double>& g) {
  double s = 0.0;
  for (double v : g) s += v * v;
  return std::sqrt(s);
}

// Rescales g in place so that its L2 norm is at most c; returns the norm before clipping.
inline double clip_global_norm(std::vector<double>& g, double c) {
  const double n = global_norm(g);
  if (n > c) {
    const double k = c / n;
    for (double& v : g) v *= k;
  }
  return n;
}

struct AdamWOptions {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Moments are flat and laid out like ParamSet::tensors concatenated.
struct OptimizerState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
  double weight_decay = 1e-4;
};

inline OptimizerState make_optimizer_state(const ParamSet& ps, double weight_decay) {
  return {std::vector<double>(ps.total(), 0.0), std::vector<double>(ps.total(), 0.0), 0, weight_decay};
}

// One bias-corrected Adam step with decoupled decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// followed by projection onto each tensor's lower bound.
inline void adamw_step(ParamSet& ps, const std::vector<double>& grad, OptimizerState& st, const AdamWOptions& o) {
  if (grad.size() != ps.total() || st.m.size() != grad.size() || st.v.size() != grad.size())
    throw std::invalid_argument("adamw_step: gradient and moments must match the parameters");
  ++st.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.step));
  std::size_t k = 0;
  for (auto& t : ps.tensors) {
    for (std::size_t i = 0; i < t.size(); ++i, ++k) {
      const double g = grad[k];
      st.m[k] = o.beta1 * st.m[k] + (1.0 - o.beta1) * g;
      st.v[k] = o.beta2 * st.v[k] + (1.0 - o.beta2) * g * g;
      const double mh = st.m[k] / c1;
      const double vh = st.v[k] / c2;
      t.data[i] -= o.lr * (mh / (std::sqrt(vh) + o.eps) + st.weight_decay * t.data[i]);
      if (t.data[i] < t.lower_bound) t.data[i] = t.lower_bound;
    }
  }
}

// ---------------------------------------------------------------------------
// Per-trial work

struct TrialResult {
  double loss = 0.0;
  std::size_t prediction = 0;
  std::size_t label = 0;
  std::vector<std::uint32_t> counts;  // flattened over layers
  double first_output = kSilent;
  std::size_t grazing = 0;
  bool failed = false;
  std::string error;
};

struct TrialSetup {
  const EvNN* net = nullptr;
  const TrainConfig* cfg = nullptr;
  std::vector<TrajectoryRow>* trajectory = nullptr;
};

inline Var trial_loss(const TrainConfig& c, ad::Tape& tape, const TrialOutput& out, std::size_t label) {
  if (c.readout() == Readout::kTtfs) return ttfs_loss(clamp_silent(tape, out.first_spike, c.max_time), label, c.ttfs);
  return state_loss(state_logits(out, c.logit_kind()), label);
}

// Runs one trial on `tape`; when grad is non-null the flat parameter
// gradient is added to it.
inline TrialResult run_trial(const TrialSetup& s, const ParamSet& ps, const Sample& sample, ad::Tape& tape,
                             std::vector<double>* grad) {
  TrialResult r;
  r.label = sample.label;
  tape.clear();
  try {
    const std::vector<Var> vars = s.net->bind(tape, ps);
    SimOptions so;
    so.readout = s.cfg->readout();
    so.trajectory = s.trajectory;
    const TrialOutput out = s.net->simulate(tape, vars, sample.input(), so);
    const Var loss = trial_loss(*s.cfg, tape, out, sample.label);
    r.loss = loss.value();
    r.prediction = classify(out, so.readout, s.cfg->logit_kind());
    for (const auto& layer : out.spike_counts) r.counts.insert(r.counts.end(), layer.begin(), layer.end());
    if (so.readout == Readout::kTtfs)
      r.first_output = *std::min_element(out.first_spike_time.begin(), out.first_spike_time.end());
    r.grazing = out.grazing_events;
    if (grad && std::isfinite(r.loss)) {
      tape.backward(loss);
      std::size_t k = 0;
      for (std::size_t t = 0; t < vars.size(); ++t) {
        const auto g = vars[t].grads();
        const auto& mask = ps.tensors[t].grad_mask;
        for (std::size_t i = 0; i < g.size(); ++i, ++k) (*grad)[k] += mask.empty() ? g[i] : g[i] * mask[i];
      }
    }
  } catch (const SimulationError& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

// Fixed-size chunks summed in order keep reductions independent of the
// worker count.
inline constexpr std::size_t kReduceChunk = 8;

namespace detail {

inline ad::Tape& worker_tape() {
  thread_local ad::Tape tape;
  return tape;
}

// Runs fn(chunk) for every chunk index on up to `workers` threads.
inline void parallel_chunks(std::size_t chunks, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = next++; c < chunks; c = next++) fn(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

struct BatchResult {
  std::vector<TrialResult> trials;
  std::vector<double> grad;  // mean over the batch
  double loss = 0.0;         // mean over trials that did not fail
  std::size_t failed = 0;
};

// Runs the given samples; with want_grad the mean gradient is reduced in
// a fixed order. Workers only read `ps`.
inline BatchResult run_batch(const TrialSetup& s, const ParamSet& ps, const std::vector<const Sample*>& batch,
                             bool want_grad, std::size_t workers) {
  BatchResult out;
  out.trials.resize(batch.size());
  const std::size_t chunks = (batch.size() + kReduceChunk - 1) / kReduceChunk;
  std::vector<std::vector<double>> partial(want_grad ? chunks : 0);
  detail::parallel_chunks(chunks, workers, [&](std::size_t c) {
    ad::Tape& tape = detail::worker_tape();
    std::vector<double>* g = nullptr;
    if (want_grad) {
      partial[c].assign(ps.total(), 0.0);
      g = &partial[c];
    }
    const std::size_t end = std::min(batch.size(), (c + 1) * kReduceChunk);
    for (std::size_t i = c * kReduceChunk; i < end; ++i) out.trials[i] = run_trial(s, ps, *batch[i], tape, g);
  });
  double sum = 0.0;
  for (const auto& t : out.trials) {
    if (t.failed) {
      ++out.failed;
      continue;
    }
    sum += t.loss;
  }
  const std::size_t ok = batch.size() - out.failed;
  out.loss = ok > 0 ? sum / static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN();
  if (want_grad) {
    out.grad.assign(ps.total(), 0.0);
    for (const auto& p : partial)
      for (std::size_t k = 0; k < p.size(); ++k) out.grad[k] += p[k];
    if (ok > 0)
      for (double& v : out.grad) v /= static_cast<double>(ok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  SpikeMetrics spikes;
  std::size_t grazing = 0;
  std::size_t failed = 0;
  std::size_t samples = 0;
  std::vector<std::size_t> predictions;
};

inline std::vector<std::uint8_t> hidden_mask(const EvNN& net) {
  std::vector<std::uint8_t> mask;
  for (std::size_t l = 0; l < net.layers().size(); ++l)
    mask.insert(mask.end(), net.layers()[l].size, l + 1 < net.layers().size() ? 1 : 0);
  return mask;
}

inline EvalResult summarize(const EvNN& net, const std::vector<TrialResult>& trials) {
  EvalResult e;
  e.samples = trials.size();
  std::vector<std::vector<std::uint32_t>> counts;
  std::vector<double> first;
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& t : trials) {
    e.predictions.push_back(t.failed ? std::numeric_limits<std::size_t>::max() : t.prediction);
    if (t.failed) {
      ++e.failed;
      continue;
    }
    loss += t.loss;
    if (t.prediction == t.label) ++correct;
    counts.push_back(t.counts);
    first.push_back(t.first_output);
    e.grazing += t.grazing;
  }
  // Failed trials count as misclassified.
  e.accuracy = trials.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(trials.size());
  const std::size_t ok = trials.size() - e.failed;
  e.loss = ok > 0 ? loss / static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN();
  e.spikes = spike_metrics(counts, hidden_mask(net), first);
  return e;
}

inline EvalResult evaluate(const EvNN& net, const TrainConfig& c, const ParamSet& ps, const Dataset& d,
                           std::size_t workers = 1) {
  std::vector<const Sample*> all;
  all.reserve(d.samples.size());
  for (const auto& s : d.samples) all.push_back(&s);
  const TrialSetup setup{&net, &c, nullptr};
  return summarize(net, run_batch(setup, ps, all, false, workers).trials);
}

// ---------------------------------------------------------------------------
// Checkpoints: text manifest (name, shape, byte offset, count) plus a flat
// little-endian f64 payload.

namespace detail {

inline void put_le(std::ostream& os, double v) {
  std::uint64_t u = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline double get_le(const unsigned char* b) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace detail

inline void save_checkpoint(const ParamSet& ps, const std::string& dir, const std::string& stem = "checkpoint") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream bin(fs::path(dir) / (stem + ".bin"), std::ios::binary);
  std::ofstream man(fs::path(dir) / (stem + ".manifest"));
  if (!bin || !man) throw std::runtime_error("cannot write checkpoint in " + dir);
  man << "evnn-checkpoint 1\n";
  man << "tensors " << ps.tensors.size() << " values " << ps.total() << "\n";
  std::size_t offset = 0;
  for (const auto& t : ps.tensors) {
    man << t.name << " shape";
    for (std::size_t d : t.shape) man << ' ' << d;
    man << " offset " << offset << " count " << t.size() << "\n";
    for (double v : t.data) detail::put_le(bin, v);
    offset += 8 * t.size();
  }
  if (!bin || !man) throw std::runtime_error("checkpoint write failed in " + dir);
}

// Loads into `ps`, which must already have the network's layout; names and
// shapes are checked against the manifest.
inline void load_checkpoint(ParamSet& ps, const std::string& dir, const std::string& stem = "checkpoint") {
  namespace fs = std::filesystem;
  const fs::path man_path = fs::path(dir) / (stem + ".manifest");
  const fs::path bin_path = fs::path(dir) / (stem + ".bin");
  std::ifstream man(man_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!man || !bin) throw std::runtime_error("missing checkpoint in " + dir);
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::string line;
  std::getline(man, line);
  if (line != "evnn-checkpoint 1") throw std::runtime_error(man_path.string() + ": unknown header '" + line + "'");
  std::getline(man, line);
  std::size_t count = 0, values = 0;
  if (std::sscanf(line.c_str(), "tensors %zu values %zu", &count, &values) != 2)
    throw std::runtime_error(man_path.string() + ": malformed size line");
  if (count != ps.tensors.size())
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " tensors, network expects " +
                             std::to_string(ps.tensors.size()));
  if (payload.size() != 8 * values)
    throw std::runtime_error(bin_path.string() + ": expected " + std::to_string(8 * values) + " bytes, got " +
                             std::to_string(payload.size()));
  for (auto& t : ps.tensors) {
    if (!std::getline(man, line)) throw std::runtime_error(man_path.string() + ": truncated");
    std::istringstream ls(line);
    std::string name, word;
    ls >> name >> word;
    std::vector<std::size_t> shape;
    std::size_t offset = 0, n = 0;
    while (ls >> word) {
      if (word == "offset") {
        ls >> offset;
      } else if (word == "count") {
        ls >> n;
      } else {
        shape.push_back(std::stoul(word));
      }
    }
    if (name != t.name || shape != t.shape || n != t.size())
      throw std::runtime_error("checkpoint tensor '" + name + "' does not match network tensor '" + t.name + "'");
    if (offset + 8 * n > payload.size()) throw std::runtime_error("checkpoint tensor '" + name + "' out of range");
    for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::get_le(payload.data() + offset + 8 * i);
  }
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string fmt(double v, int precision = 10) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

inline std::string fixed(double v, int decimals = 2) {
  if (std::isnan(v)) return "--";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace detail

struct Aggregate {
  double mean = 0.0, std = 0.0, median = 0.0;
  std::size_t n = 0;
};

// Sample standard deviation (n - 1); NaN entries are skipped.
inline Aggregate aggregate(std::vector<double> v) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  Aggregate a;
  a.n = v.size();
  if (v.empty()) {
    a.mean = a.std = a.median = std::numeric_limits<double>::quiet_NaN();
    return a;
  }
  double s = 0.0;
  for (double x : v) s += x;
  a.mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - a.mean) * (x - a.mean);
  a.std = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  a.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return a;
}

// "mean ± std (median)"
inline std::string format_aggregate(const Aggregate& a, int decimals = 2) {
  if (a.n == 0) return "--";
  return detail::fixed(a.mean, decimals) + " ± " + detail::fixed(a.std, decimals) + " (" +
         detail::fixed(a.median, decimals) + ")";
}

struct RunResult {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  EvalResult val;
  EvalResult test;
  ParamSet params;
};

inline std::string format_report(const TrainConfig& c, const std::vector<RunResult>& runs) {
  std::ostringstream os;
  os << "dataset " << c.dataset << "  model " << c.model << (c.amos ? " (AMOS)" : "")
     << (c.refractory > 0.0 ? " refractory " + detail::fmt(c.refractory) + " ms" : "") << "  loss " << c.loss << "\n";
  os << "architecture";
  os << " in";
  for (std::size_t h : c.hidden) os << "-" << h;
  os << "-out  step " << detail::fmt(c.step) << " ms  max_time " << detail::fmt(c.max_time) << " ms\n";
  os << "epochs " << c.epochs << "  batch " << c.batch_size << "  lr " << detail::fmt(c.lr) << "  clip "
     << detail::fmt(c.clip) << "  weight_decay " << detail::fmt(c.weight_decay) << "\n\n";
  os << "seed  best_epoch  val_acc[%]  test_acc[%]  max_firing  dead  fire_count  ttfs[ms]\n";
  std::vector<double> acc, mf, dead, fc, tt;
  for (const auto& r : runs) {
    os << r.seed << "  " << r.best_epoch << "  " << detail::fixed(100.0 * r.val.accuracy) << "  "
       << detail::fixed(100.0 * r.test.accuracy) << "  " << detail::fixed(r.test.spikes.max_firing) << "  "
       << detail::fixed(r.test.spikes.dead_neurons) << "  " << detail::fixed(r.test.spikes.fire_count) << "  "
       << detail::fixed(r.test.spikes.mean_ttfs) << "\n";
    acc.push_back(100.0 * r.test.accuracy);
    mf.push_back(r.test.spikes.max_firing);
    dead.push_back(r.test.spikes.dead_neurons);
    fc.push_back(r.test.spikes.fire_count);
    tt.push_back(r.test.spikes.mean_ttfs);
  }
  os << "\nTest set at best validation epoch, mean ± std (median) over " << runs.size() << " seed(s)\n";
  os << "Accuracy [%]  " << format_aggregate(aggregate(acc)) << "\n";
  os << "Max Firing    " << format_aggregate(aggregate(mf)) << "\n";
  os << "Dead Neurons  " << format_aggregate(aggregate(dead)) << "\n";
  os << "Fire Count    " << format_aggregate(aggregate(fc)) << "\n";
  os << "TTFS [ms]     " << format_aggregate(aggregate(tt)) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Training

inline const char* kMetricsHeader =
    "epoch,train_loss,train_accuracy,val_loss,val_accuracy,max_firing,dead_neurons,fire_count,mean_ttfs,"
    "grazing_events,failed_trials";

inline std::string metrics_row(std::size_t epoch, double train_loss, double train_acc, const EvalResult& v,
                               std::size_t failed) {
  using detail::fmt;
  std::ostringstream os;
  os << epoch << ',' << fmt(train_loss) << ',' << fmt(train_acc) << ',' << fmt(v.loss) << ',' << fmt(v.accuracy)
     << ',' << fmt(v.spikes.max_firing) << ',' << fmt(v.spikes.dead_neurons) << ',' << fmt(v.spikes.fire_count) << ','
     << fmt(v.spikes.mean_ttfs) << ',' << v.grazing << ',' << failed;
  return os.str();
}

// Fisher-Yates on a 64-bit Mersenne twister; the permutation is a pure
// function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + epoch);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct TrainHooks {
  // Called after every epoch with the metrics row (without newline).
  std::function<void(const std::string&)> on_epoch;
};

// Trains one seed and writes metrics.csv, timing.csv and the best
// checkpoint into out_dir. Wall-clock time is kept out of metrics.csv so
// that the log is a pure function of (config, seed).
inline RunResult train_seed(const TrainConfig& c, std::uint64_t seed, const Splits& data, const std::string& out_dir,
                            const TrainHooks& hooks = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto net = build_network(c, data.train.channels, data.train.classes);
  ParamSet ps = net->init_params(seed);
  OptimizerState st = make_optimizer_state(ps, c.weight_decay);
  AdamWOptions ao;
  ao.lr = c.lr;
  ao.weight_decay = c.weight_decay;

  std::ofstream metrics(fs::path(out_dir) / "metrics.csv");
  std::ofstream timing(fs::path(out_dir) / "timing.csv");
  if (!metrics || !timing) throw std::runtime_error("cannot write logs in " + out_dir);
  metrics << kMetricsHeader << "\n";
  timing << "epoch,wall_seconds\n";

  RunResult best;
  best.seed = seed;
  best.params = ps;
  best.val = evaluate(*net, c, ps, data.val, c.workers);
  const std::string row0 = metrics_row(0, std::numeric_limits<double>::quiet_NaN(),
                                       std::numeric_limits<double>::quiet_NaN(), best.val, best.val.failed);
  metrics << row0 << "\n" << std::flush;
  timing << "0,0\n";
  if (hooks.on_epoch) hooks.on_epoch(row0);

  const TrialSetup setup{net.get(), &c, nullptr};
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    const auto order = epoch_order(data.train.samples.size(), seed, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, failed = 0;
    for (std::size_t b = 0; b < order.size(); b += c.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + c.batch_size); ++i)
        batch.push_back(&data.train.samples[order[i]]);
      BatchResult r = run_batch(setup, ps, batch, true, c.workers);
      if (!std::isfinite(r.loss) || !std::isfinite(global_norm(r.grad))) {
        throw TrainingError("non-finite loss or gradient at seed " + std::to_string(seed) + ", epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(b / c.batch_size) +
                            " (loss " + detail::fmt(r.loss) + ", failed trials " + std::to_string(r.failed) + ")");
      }
      for (const auto& t : r.trials) {
        if (t.failed) continue;
        loss_sum += t.loss;
        ++seen;
        if (t.prediction == t.label) ++correct;
      }
      failed += r.failed;
      clip_global_norm(r.grad, c.clip);
      adamw_step(ps, r.grad, st, ao);
    }
    const EvalResult val = evaluate(*net, c, ps, data.val, c.workers);
    if (val.accuracy > best.val.accuracy) {
      best.val = val;
      best.params = ps;
      best.best_epoch = epoch;
    }
    const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    const std::string row = metrics_row(epoch, loss_sum / n, static_cast<double>(correct) / n, val, failed + val.failed);
    metrics << row << "\n" << std::flush;
    timing << epoch << ',' << detail::fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 6)
           << "\n" << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  best.test = evaluate(*net, c, best.params, data.test, c.workers);
  save_checkpoint(best.params, out_dir);
  return best;
}

inline std::string seed_dir(const TrainConfig& c, std::uint64_t seed) {
  if (c.seeds.size() == 1) return c.out_dir;
  return (std::filesystem::path(c.out_dir) / ("seed_" + std::to_string(seed))).string();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

// Trains every configured seed and writes the aggregate report.
inline std::vector<RunResult> train(const TrainConfig& c, const TrainHooks& hooks = {}) {
  const Splits data = load_splits(c);
  std::filesystem::create_directories(c.out_dir);
  write_text((std::filesystem::path(c.out_dir) / "config.json").string(), config_to_json(c).dump(2) + "\n");
  std::vector<RunResult> runs;
  for (std::uint64_t seed : c.seeds) runs.push_back(train_seed(c, seed, data, seed_dir(c, seed), hooks));
  write_text((std::filesystem::path(c.out_dir) / "report.txt").string(), format_report(c, runs));
  return runs;
}

// ---------------------------------------------------------------------------
// Trajectories

inline void write_trajectories(const EvNN& net, const TrainConfig& c, const ParamSet& ps, const Dataset& d,
                               std::size_t count, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "sample,time_ms,layer,neuron,channel,value\n";
  ad::Tape tape;
  for (std::size_t i = 0; i < std::min(count, d.samples.size()); ++i) {
    std::vector<TrajectoryRow> rows;
    const TrialSetup s{&net, &c, &rows};
    run_trial(s, ps, d.samples[i], tape, nullptr);
    for (const auto& r : rows)
      os << i << ',' << detail::fmt(r.time, 12) << ',' << r.layer << ',' << r.neuron << ',' << r.channel << ','
         << detail::fmt(r.value, 12) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Throughput benchmark

struct BenchRow {
  std::size_t batch_size = 0;
  std::size_t hidden = 0;
  double step = 0.0;
  std::size_t workers = 1;
  double forward_sps = 0.0;   // samples per second, forward only
  double backward_sps = 0.0;  // samples per second, forward + backward
};

// Times `batches` random batches per point on freshly initialised networks.
inline std::vector<BenchRow> bench(const TrainConfig& base, std::uint64_t seed,
                                   const std::function<void(const BenchRow&)>& on_row = {}) {
  const Splits data = load_splits(base);
  std::vector<BenchRow> rows;
  for (double h : base.bench.steps) {
    for (std::size_t hidden : base.bench.hidden_sizes) {
      TrainConfig c = base;
      c.step = h;
      if (!c.hidden.empty()) c.hidden.back() = hidden;
      const auto net = build_network(c, data.train.channels, data.train.classes);
      const ParamSet ps = net->init_params(seed);
      const TrialSetup setup{net.get(), &c, nullptr};
      for (std::size_t bs : c.bench.batch_sizes) {
        std::mt19937_64 rng(seed + bs);
        std::vector<std::vector<const Sample*>> batches(c.bench.batches);
        for (auto& b : batches)
          for (std::size_t i = 0; i < bs; ++i)
            b.push_back(&data.train.samples[static_cast<std::size_t>(unit_uniform(rng) * data.train.samples.size())]);
        auto time_all = [&](bool grad) {
          const auto t0 = std::chrono::steady_clock::now();
          for (const auto& b : batches) run_batch(setup, ps, b, grad, c.workers);
          return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        };
        const double total = static_cast<double>(bs * c.bench.batches);
        BenchRow r{bs, hidden, h, c.workers, total / time_all(false), total / time_all(true)};
        rows.push_back(r);
        if (on_row) on_row(r);
      }
    }
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "batch_size,hidden,step_ms,workers,forward_samples_per_s,forward_backward_samples_per_s\n";
  for (const auto& r : rows)
    os << r.batch_size << ',' << r.hidden << ',' << detail::fmt(r.step) << ',' << r.workers << ','
       << detail::fmt(r.forward_sps, 6) << ',' << detail::fmt(r.backward_sps, 6) << "\n";
  return os.str();
}

}  // namespace evnn
