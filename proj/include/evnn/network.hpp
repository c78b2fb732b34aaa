#pragma once

// Layered event-driven networks. A trial pops boundary times from a spike
// buffer ordered by (time, insertion sequence), integrates all layers up to
// the next boundary, and either handles a detected spike (reset plus
// propagation with zero delay) or applies the buffered input events.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evnn/adgraph.hpp"
#include "evnn/dynamics/neuron_model.hpp"
#include "evnn/solver.hpp"

namespace evnn {

inline constexpr double kSilent = std::numeric_limits<double>::infinity();

// A named parameter array. grad_mask (when non-empty) multiplies gradients;
// lower_bound is enforced after every optimiser step.
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad_mask;
  double lower_bound = -std::numeric_limits<double>::infinity();

  std::size_t size() const { return data.size(); }
};

struct ParamSet {
  std::vector<Tensor> tensors;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::out_of_range("no parameter named " + name);
  }
  Tensor& at(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).at(name)); }
};

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform_pm(std::mt19937_64& rng, double mean, double range) {
  return mean + range * (2.0 * unit_uniform(rng) - 1.0);
}

struct LayerSpec {
  ModelPtr model;
  std::size_t size = 0;
  // Incoming weights ~ U(mean +- range) / fan_in.
  double weight_mean = 0.0;
  double weight_range = 1.0;
};

struct RecurrentSpec {
  std::size_t layer = 0;
  double weight_mean = 0.0;
  double weight_range = 1.0;
};

struct NetworkOptions {
  double step = 0.1;
  double max_time = 30.0;
  bool checkpoint = false;
  std::size_t max_events = 1000000;
};

struct InputSpike {
  std::size_t channel = 0;
  double time = 0.0;  // +inf: omitted
};

struct TrialInput {
  std::vector<InputSpike> spikes;
  // Readout integrals ignore everything before this time.
  double window_start = 0.0;
};

enum class Readout { kTtfs, kState };

struct TrajectoryRow {
  double time = 0.0;
  std::size_t layer = 0;
  std::size_t neuron = 0;
  std::string channel;
  double value = 0.0;
};

struct SimOptions {
  Readout readout = Readout::kTtfs;
  // Observation times for the state readout; the trial end is always observed.
  std::vector<double> observe;
  // Exponential logit rate; <= 0 selects 1 / max_time.
  double lambda = 0.0;
  bool differentiable_inputs = false;
  std::vector<TrajectoryRow>* trajectory = nullptr;
};

struct EventRecord {
  enum class Kind : std::uint8_t { kInput, kInternal };
  double time_value = 0.0;
  Var time;
  Kind kind = Kind::kInput;
  std::size_t target = 0;  // receiving layer
  std::size_t source = 0;  // input channel or presynaptic neuron
  bool recurrent = false;
  std::uint64_t seq = 0;
};

// Min-queue on (time, insertion sequence).
class SpikeBuffer {
 public:
  void push(EventRecord r) {
    r.seq = next_seq_++;
    q_.push(std::move(r));
  }
  bool empty() const { return q_.empty(); }
  std::size_t size() const { return q_.size(); }
  const EventRecord& top() const { return q_.top(); }
  EventRecord pop() {
    EventRecord r = q_.top();
    q_.pop();
    return r;
  }

 private:
  struct Later {
    bool operator()(const EventRecord& a, const EventRecord& b) const {
      if (a.time_value != b.time_value) return a.time_value > b.time_value;
      return a.seq > b.seq;
    }
  };
  std::priority_queue<EventRecord, std::vector<EventRecord>, Later> q_;
  std::uint64_t next_seq_ = 0;
};

struct Observation {
  double time = 0.0;
  State state;  // output layer channels
};

struct TrialOutput {
  // Time-to-first-spike readout: one entry per output neuron.
  std::vector<Var> first_spike;          // invalid when silent
  std::vector<double> first_spike_time;  // kSilent when silent
  // State readout accumulators, one entry per output neuron.
  Var z_int, z_exp, z_max;
  std::vector<Observation> observations;
  // Spikes per layer and neuron; in ttfs mode counted up to and including
  // the first output spike.
  std::vector<std::vector<std::uint32_t>> spike_counts;
  std::vector<Var> input_times;
  std::size_t events = 0;
  std::size_t grazing_events = 0;
  double end_time = 0.0;
};

class EvNN {
 public:
  EvNN(std::size_t in_size, std::vector<LayerSpec> layers, NetworkOptions opt,
       std::optional<RecurrentSpec> recurrent = std::nullopt)
      : in_size_(in_size), layers_(std::move(layers)), opt_(opt), rec_(recurrent) {
    if (layers_.empty()) throw std::invalid_argument("network needs at least one layer");
    if (in_size_ == 0) throw std::invalid_argument("network needs at least one input channel");
    if (!(opt_.step > 0.0) || !(opt_.max_time > 0.0)) throw std::invalid_argument("step and max_time must be positive");
    if (rec_ && rec_->layer >= layers_.size()) throw std::invalid_argument("recurrent layer out of range");
    std::size_t k = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& spec = layers_[l];
      if (!spec.model || spec.size == 0) throw std::invalid_argument("layer " + std::to_string(l) + " is empty");
      weight_index_.push_back(k++);
      recurrent_index_.push_back(rec_ && rec_->layer == l ? k++ : kNone);
      model_param_begin_.push_back(k);
      k += spec.model->params().size();
    }
    param_count_ = k;
  }
  virtual ~EvNN() = default;

  std::size_t in_size() const { return in_size_; }
  std::size_t out_size() const { return layers_.back().size; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const NetworkOptions& options() const { return opt_; }
  const std::optional<RecurrentSpec>& recurrent() const { return rec_; }
  std::size_t fan_in(std::size_t l) const { return l == 0 ? in_size_ : layers_[l - 1].size; }
  std::size_t rows(std::size_t l) const { return layers_[l].model->weight_slots() * layers_[l].size; }

  ParamSet init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ParamSet ps;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& spec = layers_[l];
      const std::string prefix = "layer" + std::to_string(l) + ".";
      Tensor w{prefix + "W", {rows(l), fan_in(l)}, {}, {}};
      w.data.resize(rows(l) * fan_in(l));
      const double scale = 1.0 / static_cast<double>(fan_in(l));
      for (double& v : w.data) v = uniform_pm(rng, spec.weight_mean, spec.weight_range) * scale;
      ps.tensors.push_back(std::move(w));
      if (recurrent_index_[l] != kNone) {
        const std::size_t n = spec.size;
        Tensor r{prefix + "R", {rows(l), n}, {}, {}};
        r.data.resize(rows(l) * n);
        r.grad_mask.assign(rows(l) * n, 1.0);
        const double rs = 1.0 / static_cast<double>(n);
        for (double& v : r.data) v = uniform_pm(rng, rec_->weight_mean, rec_->weight_range) * rs;
        for (std::size_t s = 0; s < spec.model->weight_slots(); ++s)
          for (std::size_t i = 0; i < n; ++i) {
            r.data[(s * n + i) * n + i] = 0.0;
            r.grad_mask[(s * n + i) * n + i] = 0.0;
          }
        ps.tensors.push_back(std::move(r));
      }
      const auto specs = spec.model->params();
      const auto lengths = spec.model->param_lengths(spec.size);
      for (std::size_t j = 0; j < specs.size(); ++j) {
        Tensor t{prefix + specs[j].name, {lengths[j]}, {}, {}};
        t.data.resize(lengths[j]);
        for (double& v : t.data) v = uniform_pm(rng, specs[j].init_mean, specs[j].init_range);
        t.lower_bound = specs[j].min_value;
        ps.tensors.push_back(std::move(t));
      }
    }
    if (ps.tensors.size() != param_count_) throw std::logic_error("parameter layout mismatch");
    return ps;
  }

  // One leaf per tensor, in ParamSet order.
  std::vector<Var> bind(ad::Tape& tape, const ParamSet& ps) const {
    if (ps.tensors.size() != param_count_) throw std::invalid_argument("parameter set does not fit this network");
    std::vector<Var> out;
    out.reserve(ps.tensors.size());
    for (const auto& t : ps.tensors) out.push_back(tape.leaf(t.data));
    return out;
  }

  TrialOutput simulate(ad::Tape& tape, std::span<const Var> params, const TrialInput& in,
                       const SimOptions& so = {}) const {
    if (params.size() != param_count_) throw std::invalid_argument("parameter count does not fit this network");
    const bool ttfs = so.readout == Readout::kTtfs;
    const std::size_t out = layers_.size() - 1;
    const double t_end = opt_.max_time;

    System sys;
    sys.pops.reserve(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto b = params.begin() + static_cast<std::ptrdiff_t>(model_param_begin_[l]);
      std::vector<Var> mp(b, b + static_cast<std::ptrdiff_t>(layers_[l].model->params().size()));
      sys.pops.push_back(make_population(tape, layers_[l].model, layers_[l].size, std::move(mp)));
    }
    if (!ttfs) {
      Accumulator a;
      a.population = out;
      a.channel = 0;
      a.lambda = so.lambda > 0.0 ? so.lambda : 1.0 / t_end;
      a.window_start = in.window_start;
      a.z_int = tape.constant_fill(out_size(), 0.0);
      a.z_exp = tape.constant_fill(out_size(), 0.0);
      a.z_max = sys.pops[out].state[0];
      sys.acc = a;
    }

    TrialOutput result;
    result.first_spike.assign(out_size(), Var{});
    result.first_spike_time.assign(out_size(), kSilent);
    std::vector<std::vector<std::uint32_t>> counts(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) counts[l].assign(layers_[l].size, 0);
    std::optional<std::vector<std::vector<std::uint32_t>>> snapshot;

    SpikeBuffer buffer;
    for (const auto& sp : in.spikes) {
      if (sp.channel >= in_size_) throw std::out_of_range("input channel " + std::to_string(sp.channel));
      if (std::isnan(sp.time) || sp.time < 0.0) throw std::invalid_argument("input spike time must be >= 0");
      if (std::isinf(sp.time)) continue;
      EventRecord r;
      r.time_value = sp.time;
      r.time = so.differentiable_inputs ? tape.leaf(sp.time) : tape.constant(sp.time);
      if (so.differentiable_inputs) result.input_times.push_back(r.time);
      r.kind = EventRecord::Kind::kInput;
      r.target = 0;
      r.source = sp.channel;
      buffer.push(std::move(r));
    }

    std::vector<double> observe;
    if (!ttfs) {
      for (double o : so.observe)
        if (o >= 0.0 && o < t_end) observe.push_back(o);
      std::sort(observe.begin(), observe.end());
      observe.push_back(t_end);
    }

    SolverOptions sopt;
    sopt.step = opt_.step;
    sopt.checkpoint = opt_.checkpoint;
    auto dump = [&so](double t, const System& s) {
      if (so.trajectory) append_rows(*so.trajectory, t, s);
    };
    if (so.trajectory) sopt.observer = dump;

    Var t = tape.constant(0.0);
    dump(0.0, sys);
    std::size_t obs_i = 0;
    std::size_t fired = 0;
    while (true) {
      double tb = t_end;
      if (obs_i < observe.size()) tb = std::min(tb, observe[obs_i]);
      const bool from_buffer = !buffer.empty() && buffer.top().time_value <= tb;
      if (from_buffer) tb = buffer.top().time_value;
      const Var boundary = from_buffer ? buffer.top().time : tape.constant(tb);

      SegmentResult seg = integrate_segment(sys, t, boundary, sopt);
      t = seg.t;
      if (seg.hit) {
        if (++result.events > opt_.max_events) {
          throw SimulationError("event limit exceeded at t = " + std::to_string(t.value()) + " ms");
        }
        if (seg.hit->grazing) ++result.grazing_events;
        const std::vector<Spike> spikes = apply_event(sys, *seg.hit);
        bool output_spiked = false;
        for (const Spike& sp : spikes) {
          ++counts[sp.population][sp.neuron];
          if (sp.population == out) {
            output_spiked = true;
            if (!result.first_spike[sp.neuron].valid()) {
              result.first_spike[sp.neuron] = seg.hit->time;
              result.first_spike_time[sp.neuron] = seg.hit->time.value();
              ++fired;
            }
          }
          if (sp.population + 1 < layers_.size()) {
            buffer.push(internal(seg.hit->time, sp.population + 1, sp.neuron, false));
          }
          if (recurrent_index_[sp.population] != kNone) {
            buffer.push(internal(seg.hit->time, sp.population, sp.neuron, true));
          }
        }
        dump(t.value(), sys);
        if (ttfs && output_spiked && !snapshot) snapshot = counts;
        if (ttfs && fired == out_size()) break;
        continue;
      }

      while (obs_i < observe.size() && observe[obs_i] <= t.value()) {
        result.observations.push_back({observe[obs_i], sys.pops[out].state});
        ++obs_i;
      }
      bool applied = false;
      while (!buffer.empty() && buffer.top().time_value <= t.value()) {
        const EventRecord r = buffer.pop();
        deliver(sys, params, r);
        applied = true;
      }
      if (applied) dump(t.value(), sys);
      if (t.value() >= t_end) break;
    }

    result.end_time = t.value();
    result.spike_counts = (ttfs && snapshot) ? std::move(*snapshot) : std::move(counts);
    if (sys.acc) {
      result.z_int = sys.acc->z_int;
      result.z_exp = sys.acc->z_exp;
      result.z_max = sys.acc->z_max;
    }
    return result;
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  static EventRecord internal(Var time, std::size_t target, std::size_t source, bool recurrent) {
    EventRecord r;
    r.time_value = time.value();
    r.time = time;
    r.kind = EventRecord::Kind::kInternal;
    r.target = target;
    r.source = source;
    r.recurrent = recurrent;
    return r;
  }

  void deliver(System& sys, std::span<const Var> params, const EventRecord& r) const {
    const std::size_t l = r.target;
    const Var m = params[r.recurrent ? recurrent_index_[l] : weight_index_[l]];
    const Var w = ad::column(m, rows(l), r.source);
    auto& pop = sys.pops[l];
    pop.state = pop.model->input_spike(pop.state, w, r.source, pop.params);
  }

  static void append_rows(std::vector<TrajectoryRow>& rows, double t, const System& s) {
    for (std::size_t l = 0; l < s.pops.size(); ++l) {
      const auto& pop = s.pops[l];
      for (std::size_t c = 0; c < pop.state.size(); ++c) {
        const auto v = pop.state[c].values();
        const bool wide = v.size() > pop.size;
        for (std::size_t k = 0; k < v.size(); ++k) {
          std::string name = pop.channels[c].name;
          if (wide) name += "[" + std::to_string(k / pop.size) + "]";
          rows.push_back({t, l, k % pop.size, std::move(name), v[k]});
        }
      }
    }
    if (s.acc) {
      const std::pair<const char*, Var> acc[] = {{"z_int", s.acc->z_int}, {"z_exp", s.acc->z_exp}, {"z_max", s.acc->z_max}};
      for (const auto& [name, var] : acc) {
        const auto v = var.values();
        for (std::size_t k = 0; k < v.size(); ++k) rows.push_back({t, s.acc->population, k, name, v[k]});
      }
    }
  }

  std::size_t in_size_;
  std::vector<LayerSpec> layers_;
  NetworkOptions opt_;
  std::optional<RecurrentSpec> rec_;
  std::vector<std::size_t> weight_index_;
  std::vector<std::size_t> recurrent_index_;
  std::vector<std::size_t> model_param_begin_;
  std::size_t param_count_ = 0;
};

// Strictly feed-forward stack.
class FFEvNN : public EvNN {
 public:
  FFEvNN(std::size_t in_size, std::vector<LayerSpec> layers, NetworkOptions opt = {})
      : EvNN(in_size, std::move(layers), opt) {}
};

// Feed-forward stack with all-to-all recurrence (no self-connections) on one layer.
class RecEvNN : public EvNN {
 public:
  RecEvNN(std::size_t in_size, std::vector<LayerSpec> layers, RecurrentSpec recurrent, NetworkOptions opt = {})
      : EvNN(in_size, std::move(layers), opt, recurrent) {}
};

inline TrialOutput ttfs(const EvNN& net, ad::Tape& tape, std::span<const Var> params, const TrialInput& in) {
  return net.simulate(tape, params, in, {});
}

inline TrialOutput state_at_t(const EvNN& net, ad::Tape& tape, std::span<const Var> params, const TrialInput& in,
                              std::vector<double> observe = {}) {
  SimOptions so;
  so.readout = Readout::kState;
  so.observe = std::move(observe);
  return net.simulate(tape, params, in, so);
}

struct SpikeMetrics {
  double max_firing = 0.0;    // mean over samples of the per-sample maximum count
  double dead_neurons = 0.0;  // hidden neurons silent on every sample
  double fire_count = 0.0;    // mean total spikes per sample
  double mean_ttfs = std::numeric_limits<double>::quiet_NaN();
};

// counts[s][k]: spikes of neuron k in sample s. `hidden` selects the neurons
// eligible for the dead count. first_output_times holds each sample's
// earliest output spike (ttfs readout only, kSilent when none).
inline SpikeMetrics spike_metrics(const std::vector<std::vector<std::uint32_t>>& counts,
                                  const std::vector<std::uint8_t>& hidden,
                                  const std::vector<double>& first_output_times = {}) {
  SpikeMetrics m;
  if (counts.empty()) return m;
  const std::size_t n = counts.front().size();
  std::vector<std::uint8_t> ever(n, 0);
  double max_sum = 0.0, total = 0.0;
  for (const auto& c : counts) {
    if (c.size() != n) throw std::invalid_argument("spike_metrics: ragged counts");
    std::uint32_t mx = 0;
    for (std::size_t k = 0; k < n; ++k) {
      mx = std::max(mx, c[k]);
      total += c[k];
      if (c[k] > 0) ever[k] = 1;
    }
    max_sum += mx;
  }
  const double samples = static_cast<double>(counts.size());
  m.max_firing = max_sum / samples;
  m.fire_count = total / samples;
  for (std::size_t k = 0; k < n; ++k)
    if (k < hidden.size() && hidden[k] && !ever[k]) m.dead_neurons += 1.0;
  double sum = 0.0;
  std::size_t fired = 0;
  for (double t : first_output_times) {
    if (std::isfinite(t)) {
      sum += t;
      ++fired;
    }
  }
  if (fired > 0) m.mean_ttfs = sum / static_cast<double>(fired);
  return m;
}

}  // namespace evnn
