#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evnn/adgraph.hpp"

namespace evnn {

using ad::Var;

// One Var per channel. A channel of width k holds k * n entries laid out
// slot-major (entry for slot r of neuron i lives at r * n + i).
using State = std::vector<Var>;
// Trainable per-population quantities, in the order of NeuronModel::params().
using Params = std::span<const Var>;
using Mask = std::vector<std::uint8_t>;

struct ChannelSpec {
  std::string name;
  std::size_t width = 1;
  // Bookkeeping channels (spike flags, refractory clocks) carry no gradient
  // and are never integrated.
  bool differentiable = true;
};

struct ParamSpec {
  std::string name;
  std::size_t width = 1;
  double init_mean = 0.0;
  double init_range = 0.0;  // uniform on [mean - range, mean + range]
  // Projected onto after every optimiser step (time constants, thresholds).
  double min_value = -std::numeric_limits<double>::infinity();
};

inline constexpr double kNeverSpikes = -1.0;

// The five-method neuron interface. Implementations are immutable and may be
// shared across concurrently simulated trials.
class NeuronModel {
 public:
  virtual ~NeuronModel() = default;

  virtual std::string name() const = 0;
  virtual std::vector<ChannelSpec> channels() const = 0;
  virtual std::vector<ParamSpec> params() const { return {}; }
  // Number of weights a single presynaptic spike carries per neuron.
  virtual std::size_t weight_slots() const { return 1; }
  virtual bool can_spike() const { return true; }
  // Length of each params() entry for a population of n neurons.
  virtual std::vector<std::size_t> param_lengths(std::size_t n) const {
    std::vector<std::size_t> out;
    for (const auto& p : params()) out.push_back(p.width * n);
    return out;
  }

  virtual State init_state(ad::Tape& tape, std::size_t n, Params p) const = 0;
  // d/dt of every channel. An invalid Var means the channel is constant.
  virtual State dynamics(Var t, const State& y, Params p) const = 0;
  // One real per neuron; a spike is an upward zero crossing.
  virtual Var spike_condition(Var t, const State& y, Params p) const = 0;
  // `w` holds weight_slots() * n entries for presynaptic source `source`.
  virtual State input_spike(const State& y, Var w, std::size_t source, Params p) const = 0;
  virtual State reset_spiked(Var t, const State& y, const Mask& mask, Params p) const = 0;
};

using ModelPtr = std::shared_ptr<const NeuronModel>;

inline std::size_t channel_width_total(const NeuronModel& m) {
  std::size_t w = 0;
  for (const auto& c : m.channels()) w += c.width;
  return w;
}

// a where mask is false, `value` where it is true.
inline Var masked_set(Var a, const Mask& mask, double value) {
  return ad::where(mask, a.tape()->constant(value), a);
}

inline bool any_set(const Mask& mask) {
  for (auto m : mask)
    if (m) return true;
  return false;
}

}  // namespace evnn
