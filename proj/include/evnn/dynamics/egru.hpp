#pragma once

#include <stdexcept>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

// Continuous-time event-based GRU cell. Incoming binary spikes jump three
// synaptic traces (candidate, update, reset), which relax with tau_syn. The
// gates read the traces:
//   u = sigmoid(a_u + b_u)   r = sigmoid(a_r + b_r)   z = tanh(r * a_z + b_z)
//   tau_mem dc/dt = -c + u * z
// A unit emits a spike when c reaches its (trainable) threshold and the
// threshold is subtracted from c. Only spikes leave the cell, never c.
class Egru final : public NeuronModel {
 public:
  enum Slot : std::size_t { kCandidate = 0, kUpdate = 1, kReset = 2 };

  struct Options {
    double tau_mem = 20.0;
    double tau_syn = 5.0;
    double threshold = 0.2;
    double threshold_min = 1e-3;  // projection floor for the trained threshold
    double update_bias = 0.0;
    double reset_bias = 0.0;
    double candidate_bias = 0.0;
  };

  Egru() : Egru(Options{}) {}
  explicit Egru(Options o) : o_(o) {
    if (!(o.tau_mem > 0.0) || !(o.tau_syn > 0.0)) throw std::invalid_argument("EGRU time constants must be positive");
    if (!(o.threshold_min > 0.0) || o.threshold < o.threshold_min)
      throw std::invalid_argument("EGRU threshold must be at least threshold_min > 0");
  }

  std::string name() const override { return "egru"; }
  std::vector<ChannelSpec> channels() const override { return {{"c"}, {"a_z"}, {"a_u"}, {"a_r"}}; }
  std::vector<ParamSpec> params() const override {
    return {{"theta", 1, o_.threshold, 0.0, o_.threshold_min},
            {"b_z", 1, o_.candidate_bias, 0.0},
            {"b_u", 1, o_.update_bias, 0.0},
            {"b_r", 1, o_.reset_bias, 0.0}};
  }
  std::size_t weight_slots() const override { return 3; }

  State init_state(ad::Tape& tape, std::size_t n, Params) const override {
    return {tape.constant_fill(n, 0.0), tape.constant_fill(n, 0.0), tape.constant_fill(n, 0.0),
            tape.constant_fill(n, 0.0)};
  }

  State dynamics(Var, const State& y, Params p) const override {
    const Var u = ad::sigmoid(y[2] + p[2]);
    const Var r = ad::sigmoid(y[3] + p[3]);
    const Var z = ad::tanh(r * y[1] + p[1]);
    const Var dc = (u * z - y[0]) * (1.0 / o_.tau_mem);
    const double k = -1.0 / o_.tau_syn;
    return {dc, y[1] * k, y[2] * k, y[3] * k};
  }

  Var spike_condition(Var, const State& y, Params p) const override { return y[0] - p[0]; }

  State input_spike(const State& y, Var w, std::size_t, Params) const override {
    const std::size_t n = y[0].size();
    return {y[0], y[1] + ad::slice(w, kCandidate * n, n), y[2] + ad::slice(w, kUpdate * n, n),
            y[3] + ad::slice(w, kReset * n, n)};
  }

  State reset_spiked(Var, const State& y, const Mask& mask, Params p) const override {
    if (!any_set(mask)) return y;
    State out = y;
    out[0] = ad::where(mask, y[0] - p[0], y[0]);
    return out;
  }

 private:
  Options o_;
};

inline ModelPtr make_egru(Egru::Options o = {}) { return std::make_shared<Egru>(o); }

}  // namespace evnn
