#pragma once

#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Multi-compartment neuron: a soma coupled to D active dendrites, each
// dendrite fed by one exponentially decaying current per input synapse.
//   tau_S dv_S/dt = -v_S + sum_d g_d M(v_d) (v_S - v_max) + I_c
//   tau_D dv_d/dt = -v_d + sum_i I_id
//   tau_id dI_id/dt = -I_id
//   M(v) = sigmoid(s1 (v - v_th)) sigmoid(-s2 (v - v_th))
// All time constants and couplings are trainable. Layouts are slot-major:
// v_d is (D, n), I is (D, n, fan_in).
class Dendritic final : public NeuronModel {
 public:
  struct Options {
    std::size_t dendrites = 7;
    std::size_t fan_in = 5;
    double tau_soma = 10.0;
    double tau_dendrite = 10.0;
    double tau_synapse = 5.0;
    double v_max = 2.0;
    double slope_rise = 10.0;
    double slope_fall = 10.0;
    double v_th = 0.5;
    double threshold = 1.0;
    double v_reset = 0.0;
    double coupling_mean = 0.0;
    double coupling_range = 1.0;  // divided by the dendrite count
    double bias_mean = 0.0025;
    double bias_range = 0.005;
  };

  static constexpr double kMinTau = 0.5;

  Dendritic() : Dendritic(Options{}) {}
  explicit Dendritic(Options o) : o_(o) {
    if (o.fan_in == 0) throw std::invalid_argument("dendritic neuron needs at least one input synapse");
    if (!(o.threshold > o.v_reset)) throw std::invalid_argument("dendritic threshold must exceed the reset voltage");
  }

  const Options& options() const { return o_; }

  std::string name() const override { return "dendritic"; }
  std::vector<ChannelSpec> channels() const override {
    return {{"v_S"}, {"v_d", o_.dendrites}, {"I", o_.dendrites * o_.fan_in}};
  }
  std::vector<ParamSpec> params() const override {
    const double d = o_.dendrites == 0 ? 1.0 : static_cast<double>(o_.dendrites);
    return {{"I_c", 1, o_.bias_mean, o_.bias_range},
            {"tau_S", 1, o_.tau_soma, 0.0, kMinTau},
            {"tau_D", o_.dendrites, o_.tau_dendrite, 0.0, kMinTau},
            {"tau_sigma", o_.dendrites * o_.fan_in, o_.tau_synapse, 0.0, kMinTau},
            {"g", o_.dendrites, o_.coupling_mean / d, o_.coupling_range / d}};
  }
  std::size_t weight_slots() const override { return o_.dendrites; }

  // Voltage-dependent dendritic activation.
  Var activation(Var v) const {
    const Var x = v - o_.v_th;
    return ad::sigmoid(x * o_.slope_rise) * ad::sigmoid(x * (-o_.slope_fall));
  }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, 0.0), tape.constant_fill(n * o_.dendrites, 0.0),
            tape.constant_fill(n * o_.dendrites * o_.fan_in, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    const Var& vs = y[0];
    Var drive = p[0] - vs;
    if (o_.dendrites > 0) {
      const Var& vd = y[1];
      const Var coupling = p[4] * activation(vd) * (ad::tile(vs, o_.dendrites) - o_.v_max);
      drive = drive + ad::fold_sum(coupling, o_.dendrites);
      const Var dvd = (ad::group_sum(y[2], o_.fan_in) - vd) / p[2];
      const Var di = -y[2] / p[3];
      return {drive / p[1], dvd, di};
    }
    return {drive / p[1], Var{}, Var{}};
  }

  Var spike_condition(Var, const State& y, Params) const override { return y[0] - o_.threshold; }

  State input_spike(const State& y, Var w, std::size_t source, Params) const override {
    if (o_.dendrites == 0) return y;
    if (source >= o_.fan_in) throw std::out_of_range("dendritic input source out of range");
    return {y[0], y[1], ad::add_at(y[2], w, source, o_.fan_in)};
  }

  State reset_spiked(Var, const State& y, const Mask& mask, Params) const override {
    if (!any_set(mask)) return y;
    return {masked_set(y[0], mask, o_.v_reset), y[1], y[2]};
  }

 private:
  Options o_;
};

inline ModelPtr make_dendritic(Dendritic::Options o = {}) { return std::make_shared<Dendritic>(o); }

}  // namespace evnn
