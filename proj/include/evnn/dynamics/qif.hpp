#pragma once

#include <numbers>
#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Quadratic integrate-and-fire neuron in phase form (theta neuron), phase in
// [0, 1]. The total input J = I + I_c drives
//   2 pi tau_mem dphi/dt = (1 - cos 2 pi phi) + (1 + cos 2 pi phi) J
//   tau_syn dI/dt = -I
// Spikes at phi = 1 and resets to phi = 0.
class Qif final : public NeuronModel {
 public:
  struct Options {
    double tau_mem = 20.0;
    double tau_syn = 5.0;
    double bias_mean = 0.0025;
    double bias_range = 0.005;
  };

  Qif() : Qif(Options{}) {}
  explicit Qif(Options o) : o_(o) {
    if (!(o.tau_mem > 0.0) || !(o.tau_syn > 0.0)) throw std::invalid_argument("QIF time constants must be positive");
  }

  std::string name() const override { return "qif"; }
  std::vector<ChannelSpec> channels() const override { return {{"phi"}, {"I"}}; }
  std::vector<ParamSpec> params() const override { return {{"I_c", 1, o_.bias_mean, o_.bias_range}}; }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, 0.0), tape.constant_fill(n, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    constexpr double kTwoPi = 2.0 * std::numbers::pi;
    const Var c = ad::cos(y[0] * kTwoPi);
    const Var drive = y[1] + p[0];
    // (1 - c) + (1 + c) J = (1 + J) + c (J - 1)
    const Var dphi = ((drive + 1.0) + c * (drive - 1.0)) * (1.0 / (kTwoPi * o_.tau_mem));
    const Var di = y[1] * (-1.0 / o_.tau_syn);
    return {dphi, di};
  }

  Var spike_condition(Var, const State& y, Params) const override { return y[0] - 1.0; }

  State input_spike(const State& y, Var w, std::size_t, Params) const override { return {y[0], y[1] + w}; }

  State reset_spiked(Var, const State& y, const Mask& mask, Params) const override {
    if (!any_set(mask)) return y;
    return {masked_set(y[0], mask, 0.0), y[1]};
  }

 private:
  Options o_;
};

inline ModelPtr make_qif(Qif::Options o = {}) { return std::make_shared<Qif>(o); }

}  // namespace evnn
