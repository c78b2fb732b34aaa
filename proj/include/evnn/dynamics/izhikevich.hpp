#pragma once

#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Two-variable Izhikevich neuron with an exponentially decaying synaptic
// current, in mV and ms:
//   dv/dt = 0.04 v^2 + 5 v + 140 - u + I + I_c
//   du/dt = a (b v - u)
//   tau_syn dI/dt = -I
// On v = v_peak: v <- c, u <- u + d.
class Izhikevich final : public NeuronModel {
 public:
  struct Options {
    double a = 0.02;
    double b = 0.2;
    double c = -65.0;
    double d = 4.0;
    double v_peak = 30.0;
    double tau_syn = 3.0;
    double bias_mean = 3.0;
    double bias_range = 0.5;
  };

  Izhikevich() : Izhikevich(Options{}) {}
  explicit Izhikevich(Options o) : o_(o) {
    if (!(o.tau_syn > 0.0)) throw std::invalid_argument("Izhikevich tau_syn must be positive");
    if (!(o.v_peak > o.c)) throw std::invalid_argument("Izhikevich peak must exceed the reset voltage");
  }

  const Options& options() const { return o_; }

  std::string name() const override { return "izhikevich"; }
  std::vector<ChannelSpec> channels() const override { return {{"v"}, {"u"}, {"I"}}; }
  std::vector<ParamSpec> params() const override { return {{"I_c", 1, o_.bias_mean, o_.bias_range}}; }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, o_.c), tape.constant_fill(n, o_.b * o_.c), tape.constant_fill(n, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    const Var& v = y[0];
    const Var& u = y[1];
    // 0.04 v^2 + 5 v + 140 = v (0.04 v + 5) + 140
    const Var dv = (v * (v * 0.04 + 5.0) + 140.0) - u + (y[2] + p[0]);
    const Var du = (v * o_.b - u) * o_.a;
    return {dv, du, y[2] * (-1.0 / o_.tau_syn)};
  }

  Var spike_condition(Var, const State& y, Params) const override { return y[0] - o_.v_peak; }

  State input_spike(const State& y, Var w, std::size_t, Params) const override { return {y[0], y[1], y[2] + w}; }

  State reset_spiked(Var, const State& y, const Mask& mask, Params) const override {
    if (!any_set(mask)) return y;
    return {masked_set(y[0], mask, o_.c), ad::where(mask, y[1] + o_.d, y[1]), y[2]};
  }

 private:
  Options o_;
};

inline ModelPtr make_izhikevich(Izhikevich::Options o = {}) { return std::make_shared<Izhikevich>(o); }

}  // namespace evnn
