#pragma once

#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Exponential integrate-and-fire neuron:
//   tau_mem dV/dt = -(V - E_L) + delta_T exp((V - v_T) / delta_T) + I + I_c
//   tau_syn dI/dt = -I
// The exponential runs away past v_T; a spike is registered at v_peak.
class Eif final : public NeuronModel {
 public:
  struct Options {
    double tau_mem = 20.0;
    double tau_syn = 5.0;
    double e_leak = 0.0;
    double v_t = 1.0;
    double delta_t = 0.2;
    double v_peak = 2.98;
    double v_reset = 0.0;
    double bias_mean = 0.0025;
    double bias_range = 0.005;
  };

  Eif() : Eif(Options{}) {}
  explicit Eif(Options o) : o_(o) {
    if (!(o.delta_t > 0.0)) throw std::invalid_argument("EIF slope factor must be positive");
    if (!(o.v_peak > o.v_t)) throw std::invalid_argument("EIF cut-off must lie above the exponential threshold");
    if (!(o.tau_mem > 0.0) || !(o.tau_syn > 0.0)) throw std::invalid_argument("EIF time constants must be positive");
  }

  std::string name() const override { return "eif"; }
  std::vector<ChannelSpec> channels() const override { return {{"V"}, {"I"}}; }
  std::vector<ParamSpec> params() const override { return {{"I_c", 1, o_.bias_mean, o_.bias_range}}; }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, o_.e_leak), tape.constant_fill(n, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    const Var& v = y[0];
    const Var spike_current = ad::exp((v - o_.v_t) * (1.0 / o_.delta_t)) * o_.delta_t;
    const Var dv = ((spike_current - (v - o_.e_leak)) + (y[1] + p[0])) * (1.0 / o_.tau_mem);
    return {dv, y[1] * (-1.0 / o_.tau_syn)};
  }

  Var spike_condition(Var, const State& y, Params) const override { return y[0] - o_.v_peak; }

  State input_spike(const State& y, Var w, std::size_t, Params) const override { return {y[0], y[1] + w}; }

  State reset_spiked(Var, const State& y, const Mask& mask, Params) const override {
    if (!any_set(mask)) return y;
    return {masked_set(y[0], mask, o_.v_reset), y[1]};
  }

 private:
  Options o_;
};

inline ModelPtr make_eif(Eif::Options o = {}) { return std::make_shared<Eif>(o); }

}  // namespace evnn
