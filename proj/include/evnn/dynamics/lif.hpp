#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Current-based leaky integrate-and-fire neuron:
//   tau_syn dI/dt = -I + I_c
//   tau_mem dV/dt = -V + I
// Spikes at V = threshold, resets V to v_reset. With an infinite threshold
// and no bias it is the leaky integrator used as a readout.
class Lif final : public NeuronModel {
 public:
  struct Options {
    double tau_mem = 20.0;
    double tau_syn = 5.0;
    double threshold = 1.0;
    double v_reset = 0.0;
    bool bias = true;
    double bias_mean = 0.0025;
    double bias_range = 0.005;
  };

  Lif() : Lif(Options{}) {}
  explicit Lif(Options o) : o_(o) {
    if (!(o.tau_mem > 0.0) || !(o.tau_syn > 0.0)) throw std::invalid_argument("LIF time constants must be positive");
    if (!(o.threshold > o.v_reset)) throw std::invalid_argument("LIF threshold must exceed the reset voltage");
  }

  const Options& options() const { return o_; }

  std::string name() const override { return leaky_integrator() ? "li" : "lif"; }
  std::vector<ChannelSpec> channels() const override { return {{"V"}, {"I"}}; }
  std::vector<ParamSpec> params() const override {
    if (!o_.bias) return {};
    return {{"I_c", 1, o_.bias_mean, o_.bias_range}};
  }
  bool can_spike() const override { return !leaky_integrator(); }
  bool leaky_integrator() const { return std::isinf(o_.threshold); }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, 0.0), tape.constant_fill(n, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    const Var& v = y[0];
    const Var& i = y[1];
    Var dv = (i - v) * (1.0 / o_.tau_mem);
    Var di = o_.bias ? (p[0] - i) * (1.0 / o_.tau_syn) : i * (-1.0 / o_.tau_syn);
    return {dv, di};
  }

  Var spike_condition(Var, const State& y, Params) const override {
    if (leaky_integrator()) return y[0].tape()->constant_fill(y[0].size(), kNeverSpikes);
    return y[0] - o_.threshold;
  }

  State input_spike(const State& y, Var w, std::size_t, Params) const override { return {y[0], y[1] + w}; }

  State reset_spiked(Var, const State& y, const Mask& mask, Params) const override {
    if (!any_set(mask)) return y;
    return {masked_set(y[0], mask, o_.v_reset), y[1]};
  }

 private:
  Options o_;
};

inline ModelPtr make_lif(Lif::Options o = {}) { return std::make_shared<Lif>(o); }

// Leaky integrator readout: never fires, no bias current.
inline ModelPtr make_li(double tau_mem = 20.0, double tau_syn = 5.0) {
  Lif::Options o;
  o.tau_mem = tau_mem;
  o.tau_syn = tau_syn;
  o.threshold = std::numeric_limits<double>::infinity();
  o.bias = false;
  return std::make_shared<Lif>(o);
}

}  // namespace evnn
