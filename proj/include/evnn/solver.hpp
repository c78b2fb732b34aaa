#pragma once

// Fixed-step Euler integration between boundary times with spike detection.
//
// A segment advances every population from t_start to t_end. After each step
// the spike conditions are probed speculatively (nothing is left on the tape);
// on an upward zero crossing the event time is located on the step's linear
// interpolant and recorded as a custom node whose adjoint is the implicit
// function theorem rule. The committed state at the event is the interpolant
// itself, so gradients are exact for the discretised program.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evnn/adgraph.hpp"
#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Population {
  ModelPtr model;
  std::size_t size = 0;
  State state;
  std::vector<Var> params;
  std::vector<ChannelSpec> channels;
  bool spiking = true;
};

inline Population make_population(ad::Tape& tape, ModelPtr model, std::size_t n, std::vector<Var> params) {
  Population p;
  p.size = n;
  p.params = std::move(params);
  p.channels = model->channels();
  p.spiking = model->can_spike();
  p.state = model->init_state(tape, n, p.params);
  if (p.state.size() != p.channels.size()) throw std::logic_error(model->name() + ": init_state channel count mismatch");
  p.model = std::move(model);
  return p;
}

// Readout integrals of one channel of one population:
//   z_int' = V,  z_exp' = exp(-lambda (t - window_start)) V,  z_max = running max of V
// All three only change for t >= window_start.
struct Accumulator {
  std::size_t population = 0;
  std::size_t channel = 0;
  double lambda = 0.0;
  double window_start = 0.0;
  Var z_int, z_exp, z_max;
};

struct System {
  std::vector<Population> pops;
  std::optional<Accumulator> acc;

  bool any_spiking() const {
    for (const auto& p : pops)
      if (p.spiking) return true;
    return false;
  }
};

// Committed trajectory on one step: y(t_n + s) = y_n + s f_n for s in [0, length].
struct StepInterpolant {
  Var t_n;
  std::vector<State> y;
  std::vector<State> f;
  State acc_y;
  State acc_f;
  double length = 0.0;
};

struct SolverOptions {
  double step = 0.1;
  bool checkpoint = false;
  // Neurons whose condition lies within this distance of zero at the event
  // fire together.
  double simultaneity = 1e-9;
  double grazing = 1e-8;
  std::function<void(double, const System&)> observer;
};

struct EventHit {
  Var time;
  std::vector<Mask> masks;  // one per population
  bool immediate = false;   // condition was already non-negative at segment start
  bool grazing = false;
  double denominator = 0.0;
  double residual = 0.0;  // max |g| over masked neurons
};

struct SegmentResult {
  Var t;
  std::optional<EventHit> hit;
};

struct Spike {
  std::size_t population = 0;
  std::size_t neuron = 0;
};

// ---- implicit function theorem rule ----

// Partials of the crossing neuron's condition g at (t*, y-), plus the
// interpolant slope and the located offset sigma = t* - t_n.
struct EventPartials {
  double g_t = 0.0;
  std::vector<std::vector<double>> g_y;
  std::vector<std::vector<double>> f;
  std::vector<std::vector<double>> g_theta;
  double sigma = 0.0;
};

struct EventCotangents {
  double t_n = 0.0;
  std::vector<std::vector<double>> y_n;
  std::vector<std::vector<double>> f_n;
  std::vector<std::vector<double>> theta;
  double denominator = 0.0;
  bool grazing = false;
};

// g(t_n + sigma, y_n + sigma f_n; theta) = 0 defines sigma. With
// D = g_t + g_y . f_n:
//   dsigma/dt_n = -g_t / D, dsigma/dy_n = -g_y / D,
//   dsigma/df_n = -sigma g_y / D, dsigma/dtheta = -g_theta / D.
// D == 0 yields zero cotangents; |D| <= eps only sets the grazing flag.
inline EventCotangents event_time_adjoint(double cotangent, const EventPartials& p, double eps = 1e-8) {
  EventCotangents out;
  double d = p.g_t;
  for (std::size_t c = 0; c < p.g_y.size(); ++c)
    for (std::size_t i = 0; i < p.g_y[c].size(); ++i) d += p.g_y[c][i] * p.f[c][i];
  out.denominator = d;
  out.grazing = std::abs(d) <= eps;
  const double k = d == 0.0 ? 0.0 : -cotangent / d;
  out.t_n = k * p.g_t;
  out.y_n.resize(p.g_y.size());
  out.f_n.resize(p.g_y.size());
  for (std::size_t c = 0; c < p.g_y.size(); ++c) {
    out.y_n[c].resize(p.g_y[c].size());
    out.f_n[c].resize(p.g_y[c].size());
    for (std::size_t i = 0; i < p.g_y[c].size(); ++i) {
      out.y_n[c][i] = k * p.g_y[c][i];
      out.f_n[c][i] = k * p.sigma * p.g_y[c][i];
    }
  }
  out.theta.resize(p.g_theta.size());
  for (std::size_t j = 0; j < p.g_theta.size(); ++j) {
    out.theta[j].resize(p.g_theta[j].size());
    for (std::size_t i = 0; i < p.g_theta[j].size(); ++i) out.theta[j][i] = k * p.g_theta[j][i];
  }
  return out;
}

namespace detail {

inline bool integrated(const Population& p, std::size_t c, const State& f) {
  return p.channels[c].differentiable && c < f.size() && f[c].valid();
}

// Spike conditions of all spiking populations at (t, ys); leaves no nodes.
inline void conditions(System& sys, double t, const std::vector<State>& ys, ad::Tape& tape,
                       std::vector<std::vector<double>>& out) {
  const std::size_t m = tape.mark();
  const Var tv = tape.constant(t);
  out.resize(sys.pops.size());
  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    auto& pop = sys.pops[p];
    if (!pop.spiking) {
      out[p].clear();
      continue;
    }
    const Var g = pop.model->spike_condition(tv, ys[p], pop.params);
    if (g.size() != pop.size) throw std::logic_error(pop.model->name() + ": spike condition has wrong size");
    out[p].assign(g.values().begin(), g.values().end());
  }
  tape.rewind(m);
}

struct ProbeResult {
  double max = -std::numeric_limits<double>::infinity();
  std::size_t pop = 0;
  std::size_t neuron = 0;
};

inline ProbeResult reduce_max(const std::vector<std::vector<double>>& g) {
  ProbeResult r;
  for (std::size_t p = 0; p < g.size(); ++p)
    for (std::size_t i = 0; i < g[p].size(); ++i)
      if (g[p][i] > r.max) r = {g[p][i], p, i};
  return r;
}

// Conditions on the interpolant at offset s. Channel values are formed as
// y + s * f, the same expression the committed axpy evaluates.
inline ProbeResult probe(System& sys, const StepInterpolant& ip, double s, double t_value,
                         std::vector<std::vector<double>>& g) {
  ad::Tape& tape = *ip.t_n.tape();
  const std::size_t m = tape.mark();
  std::vector<State> ys(sys.pops.size());
  std::vector<double> buf;
  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    const auto& pop = sys.pops[p];
    if (!pop.spiking) continue;
    ys[p].resize(pop.state.size());
    for (std::size_t c = 0; c < pop.state.size(); ++c) {
      if (!integrated(pop, c, ip.f[p])) {
        ys[p][c] = ip.y[p][c];
        continue;
      }
      const auto y = ip.y[p][c].values();
      const auto f = ip.f[p][c].values();
      buf.resize(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) buf[i] = y[i] + s * f[i];
      ys[p][c] = tape.constant(buf);
    }
  }
  conditions(sys, t_value, ys, tape, g);
  tape.rewind(m);
  return reduce_max(g);
}

inline void check_finite(const System& sys, double t) {
  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    const auto& pop = sys.pops[p];
    for (std::size_t c = 0; c < pop.state.size(); ++c) {
      const auto v = pop.state[c].values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i]) || !pop.channels[c].differentiable) continue;
        std::ostringstream os;
        os << "non-finite state: population " << p << " (" << pop.model->name() << "), neuron " << i % pop.size
           << ", channel " << pop.channels[c].name << " = " << v[i] << " at t = " << t << " ms";
        throw SimulationError(os.str());
      }
    }
  }
}

inline Var acc_value(const System& sys) { return sys.pops[sys.acc->population].state[sys.acc->channel]; }

inline bool acc_open(const System& sys, double t) { return sys.acc && t >= sys.acc->window_start; }

// Derivatives (z_int', z_exp') at the start of a step, or invalid when closed.
inline State acc_slopes(const System& sys, Var t) {
  if (!acc_open(sys, t.value())) return {};
  const Var v = acc_value(sys);
  const Var w = ad::exp((t - sys.acc->window_start) * (-sys.acc->lambda));
  return {v, v * w};
}

inline void acc_advance(System& sys, const State& slopes, const std::function<Var(Var, Var)>& step) {
  if (slopes.empty()) return;
  sys.acc->z_int = step(sys.acc->z_int, slopes[0]);
  sys.acc->z_exp = step(sys.acc->z_exp, slopes[1]);
}

inline void acc_track_max(System& sys, double t) {
  if (!acc_open(sys, t)) return;
  sys.acc->z_max = ad::maximum(sys.acc->z_max, acc_value(sys));
}

}  // namespace detail

// Locates the earliest upward crossing on the interpolant, records the event
// time with the implicit-function adjoint and moves the system to y-.
// Requires every condition negative at s = 0 and some condition
// non-negative at s = length.
inline EventHit localize_event(System& sys, const StepInterpolant& ip, const SolverOptions& opt) {
  ad::Tape& tape = *ip.t_n.tape();
  const double t0 = ip.t_n.value();
  std::vector<std::vector<double>> g;

  // The maximum over neurons of linear-in-s conditions is convex, so the
  // bracket holds a single root. Illinois iteration, bisection fallback.
  double a = 0.0, b = ip.length;
  double fa = detail::probe(sys, ip, a, t0, g).max;
  double fb = detail::probe(sys, ip, b, t0 + b, g).max;
  if (!(fa < 0.0) || !(fb >= 0.0)) throw std::logic_error("localize_event: no sign change in bracket");
  double s = b;
  int side = 0;
  for (int it = 0; it < 200; ++it) {
    if (fb == 0.0) {
      s = b;
      break;
    }
    double c = b - fb * (b - a) / (fb - fa);
    if (!(c > a && c < b)) c = 0.5 * (a + b);
    const double fc = detail::probe(sys, ip, c, t0 + c, g).max;
    if (fc >= 0.0) {
      b = c;
      fb = fc;
      if (side == 1) fa *= 0.5;
      side = 1;
    } else {
      a = c;
      fa = fc;
      if (side == -1) fb *= 0.5;
      side = -1;
    }
    s = b;
    if (std::abs(fc) <= 1e-13 || b - a <= 1e-14) {
      if (std::abs(fc) <= 1e-13) s = c;
      break;
    }
  }
  const detail::ProbeResult at = detail::probe(sys, ip, s, t0 + s, g);

  // Local partials of the crossing neuron's condition at (t*, y-).
  const auto& cp = sys.pops[at.pop];
  EventPartials partials;
  partials.sigma = s;
  std::vector<std::size_t> diff_channels;
  for (std::size_t c = 0; c < cp.state.size(); ++c)
    if (detail::integrated(cp, c, ip.f[at.pop])) diff_channels.push_back(c);
  {
    const std::size_t m = tape.mark();
    const Var tl = tape.leaf(t0 + s);
    State yl(cp.state.size());
    std::vector<double> buf;
    for (std::size_t c = 0; c < cp.state.size(); ++c) {
      if (!detail::integrated(cp, c, ip.f[at.pop])) {
        yl[c] = ip.y[at.pop][c];
        continue;
      }
      const auto y = ip.y[at.pop][c].values();
      const auto f = ip.f[at.pop][c].values();
      buf.resize(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) buf[i] = y[i] + s * f[i];
      yl[c] = tape.leaf(buf);
    }
    std::vector<Var> pl;
    pl.reserve(cp.params.size());
    for (const Var& v : cp.params) pl.push_back(tape.leaf(v.values()));
    const Var gk = ad::index(cp.model->spike_condition(tl, yl, pl), at.neuron);
    std::vector<ad::Seed> seed(1);
    seed[0].var = gk;
    seed[0].cotangent = {1.0};
    tape.backward(seed, m);
    partials.g_t = tl.grad();
    for (std::size_t c : diff_channels) {
      const auto gr = yl[c].grads();
      partials.g_y.emplace_back(gr.begin(), gr.end());
      if (partials.g_y.back().size() != yl[c].size()) partials.g_y.back().assign(yl[c].size(), 0.0);
      partials.f.push_back(ad::to_vector(ip.f[at.pop][c].values()));
    }
    for (const Var& v : pl) {
      const auto gr = v.grads();
      partials.g_theta.emplace_back(gr.begin(), gr.end());
      if (partials.g_theta.back().size() != v.size()) partials.g_theta.back().assign(v.size(), 0.0);
    }
    tape.rewind(m);
  }

  std::vector<Var> inputs;
  inputs.push_back(ip.t_n);
  for (std::size_t c : diff_channels) inputs.push_back(ip.y[at.pop][c]);
  for (std::size_t c : diff_channels) inputs.push_back(ip.f[at.pop][c]);
  for (const Var& v : cp.params) inputs.push_back(v);
  const EventCotangents probe_d = event_time_adjoint(1.0, partials, opt.grazing);
  const std::size_t nc = diff_channels.size();
  auto forward = [s](const std::vector<std::span<const double>>&) { return std::vector<std::vector<double>>{{s}}; };
  auto adjoint = [partials = std::move(partials), nc, eps = opt.grazing](const ad::AdjointArgs& args) {
    const EventCotangents d = event_time_adjoint(args.cotangents[0][0], partials, eps);
    std::vector<std::vector<double>> out;
    out.reserve(1 + 2 * nc + d.theta.size());
    out.push_back({d.t_n});
    for (auto& v : d.y_n) out.push_back(v);
    for (auto& v : d.f_n) out.push_back(v);
    for (auto& v : d.theta) out.push_back(v);
    return out;
  };
  const Var sigma = ad::custom_adjoint(forward, std::move(adjoint), inputs)[0];
  const Var t_star = ip.t_n + sigma;

  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    auto& pop = sys.pops[p];
    for (std::size_t c = 0; c < pop.state.size(); ++c)
      if (detail::integrated(pop, c, ip.f[p])) pop.state[c] = ad::axpy(ip.y[p][c], sigma, ip.f[p][c]);
  }
  detail::acc_advance(sys, ip.acc_f, [&](Var z, Var dz) { return ad::axpy(z, sigma, dz); });
  detail::acc_track_max(sys, t_star.value());

  EventHit hit;
  hit.time = t_star;
  hit.denominator = probe_d.denominator;
  hit.grazing = probe_d.grazing;
  hit.masks.resize(sys.pops.size());
  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    hit.masks[p].assign(sys.pops[p].size, 0);
    if (!sys.pops[p].spiking) continue;
    for (std::size_t i = 0; i < g[p].size(); ++i) {
      if (g[p][i] >= -opt.simultaneity) {
        hit.masks[p][i] = 1;
        hit.residual = std::max(hit.residual, std::abs(g[p][i]));
      }
    }
  }
  return hit;
}

namespace detail {

inline SegmentResult plain_segment(System& sys, Var t_start, Var t_end, const SolverOptions& opt) {
  if (!(opt.step > 0.0)) throw std::invalid_argument("solver step must be positive");
  if (t_end.value() < t_start.value()) throw std::invalid_argument("segment end precedes its start");
  ad::Tape& tape = *t_start.tape();
  const bool spiking = sys.any_spiking();
  std::vector<std::vector<double>> g;

  if (spiking) {
    std::vector<State> ys;
    for (const auto& p : sys.pops) ys.push_back(p.state);
    conditions(sys, t_start.value(), ys, tape, g);
    if (reduce_max(g).max >= 0.0) {
      EventHit hit;
      hit.time = t_start;
      hit.immediate = true;
      hit.masks.resize(sys.pops.size());
      for (std::size_t p = 0; p < sys.pops.size(); ++p) {
        hit.masks[p].assign(sys.pops[p].size, 0);
        for (std::size_t i = 0; i < g[p].size(); ++i) {
          if (g[p][i] >= 0.0) hit.masks[p][i] = 1;
        }
      }
      return {t_start, hit};
    }
  }

  Var t = t_start;
  while (true) {
    const double remaining = t_end.value() - t.value();
    if (remaining <= 0.0) return {t_end, std::nullopt};
    const bool last = remaining <= opt.step * (1.0 + 1e-9);

    StepInterpolant ip;
    ip.t_n = t;
    ip.length = last ? remaining : opt.step;
    ip.y.reserve(sys.pops.size());
    ip.f.reserve(sys.pops.size());
    for (auto& pop : sys.pops) {
      ip.y.push_back(pop.state);
      ip.f.push_back(pop.model->dynamics(t, pop.state, pop.params));
    }
    ip.acc_f = acc_slopes(sys, t);

    const double t1v = last ? t_end.value() : t.value() + opt.step;
    if (spiking && probe(sys, ip, ip.length, t1v, g).max >= 0.0) {
      EventHit hit = localize_event(sys, ip, opt);
      if (opt.observer) opt.observer(hit.time.value(), sys);
      return {hit.time, std::move(hit)};
    }

    Var t1;
    std::function<Var(Var, Var)> advance;
    if (last) {
      const Var len = t_end - t;
      advance = [len](Var y, Var f) { return ad::axpy(y, len, f); };
      t1 = t_end;
    } else {
      const double h = opt.step;
      advance = [h](Var y, Var f) { return ad::axpy(y, h, f); };
      t1 = t + h;
    }
    for (std::size_t p = 0; p < sys.pops.size(); ++p) {
      auto& pop = sys.pops[p];
      for (std::size_t c = 0; c < pop.state.size(); ++c)
        if (integrated(pop, c, ip.f[p])) pop.state[c] = advance(ip.y[p][c], ip.f[p][c]);
    }
    acc_advance(sys, ip.acc_f, advance);
    t = t1;
    acc_track_max(sys, t.value());
    check_finite(sys, t.value());
    if (opt.observer) opt.observer(t.value(), sys);
    if (last) return {t, std::nullopt};
  }
}

inline ad::Tape& scratch_tape() {
  thread_local ad::Tape tape;
  return tape;
}

// Flattened view of a system for the checkpoint node:
// [t_start, t_end, per population (channels..., params...), z_int, z_exp, z_max].
struct Layout {
  std::vector<std::size_t> channels;
  std::vector<std::size_t> params;
  bool acc = false;
};

inline Layout layout_of(const System& sys) {
  Layout l;
  for (const auto& p : sys.pops) {
    l.channels.push_back(p.state.size());
    l.params.push_back(p.params.size());
  }
  l.acc = sys.acc.has_value();
  return l;
}

// Rebuilds `proto` on `tape` from flat values; every array becomes a leaf.
inline System rebuild(const System& proto, const Layout& l, ad::Tape& tape,
                      const std::vector<std::span<const double>>& in, Var& t_start, Var& t_end) {
  std::size_t k = 0;
  t_start = tape.leaf(in[k++]);
  t_end = tape.leaf(in[k++]);
  System s;
  s.pops.reserve(proto.pops.size());
  for (std::size_t p = 0; p < proto.pops.size(); ++p) {
    Population pop;
    pop.model = proto.pops[p].model;
    pop.size = proto.pops[p].size;
    pop.channels = proto.pops[p].channels;
    pop.spiking = proto.pops[p].spiking;
    for (std::size_t c = 0; c < l.channels[p]; ++c) pop.state.push_back(tape.leaf(in[k++]));
    for (std::size_t j = 0; j < l.params[p]; ++j) pop.params.push_back(tape.leaf(in[k++]));
    s.pops.push_back(std::move(pop));
  }
  if (l.acc) {
    Accumulator a = *proto.acc;
    a.z_int = tape.leaf(in[k++]);
    a.z_exp = tape.leaf(in[k++]);
    a.z_max = tape.leaf(in[k++]);
    s.acc = a;
  }
  return s;
}

inline std::vector<Var> outputs_of(const System& s, Var t) {
  std::vector<Var> out{t};
  for (const auto& p : s.pops)
    for (const Var& v : p.state) out.push_back(v);
  if (s.acc) {
    out.push_back(s.acc->z_int);
    out.push_back(s.acc->z_exp);
    out.push_back(s.acc->z_max);
  }
  return out;
}

// Same result as plain_segment, but only the segment boundary is kept on the
// caller's tape; interior steps are recomputed on a scratch tape during the
// reverse sweep.
inline SegmentResult checkpointed_segment(System& sys, Var t_start, Var t_end, const SolverOptions& opt) {
  const Layout layout = layout_of(sys);
  std::vector<Var> inputs{t_start, t_end};
  for (const auto& p : sys.pops) {
    inputs.insert(inputs.end(), p.state.begin(), p.state.end());
    inputs.insert(inputs.end(), p.params.begin(), p.params.end());
  }
  if (sys.acc) {
    inputs.push_back(sys.acc->z_int);
    inputs.push_back(sys.acc->z_exp);
    inputs.push_back(sys.acc->z_max);
  }

  SolverOptions inner = opt;
  inner.checkpoint = false;
  std::optional<EventHit> hit_info;
  const System proto = sys;

  auto forward = [&](const std::vector<std::span<const double>>& in) {
    ad::Tape& tape = scratch_tape();
    tape.clear();
    Var ts, te;
    System s = rebuild(proto, layout, tape, in, ts, te);
    SegmentResult r = plain_segment(s, ts, te, inner);
    std::vector<std::vector<double>> out;
    for (const Var& v : outputs_of(s, r.t)) out.push_back(ad::to_vector(v.values()));
    if (r.hit) {
      hit_info = std::move(r.hit);
      hit_info->time = Var{};
    }
    tape.clear();
    return out;
  };

  SolverOptions replay_opt = inner;
  replay_opt.observer = nullptr;
  auto adjoint = [proto, layout, replay_opt](const ad::AdjointArgs& args) {
    ad::Tape& tape = scratch_tape();
    tape.clear();
    Var ts, te;
    System s = rebuild(proto, layout, tape, args.inputs, ts, te);
    SegmentResult r = plain_segment(s, ts, te, replay_opt);
    const std::vector<Var> outs = outputs_of(s, r.t);
    std::vector<ad::Seed> seeds;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      const auto& cot = args.cotangents[k];
      bool nonzero = false;
      for (double c : cot) nonzero = nonzero || c != 0.0;
      if (nonzero) seeds.push_back({outs[k], ad::to_vector(cot)});
    }
    std::vector<std::vector<double>> grads(args.inputs.size());
    if (!seeds.empty()) tape.backward(seeds);
    for (std::size_t k = 0; k < args.inputs.size(); ++k) {
      const Var leaf(&tape, static_cast<std::uint32_t>(k));
      const auto g = seeds.empty() ? std::span<const double>{} : leaf.grads();
      if (g.size() == args.inputs[k].size()) grads[k] = ad::to_vector(g);
      else grads[k].assign(args.inputs[k].size(), 0.0);
    }
    tape.clear();
    return grads;
  };

  const std::vector<Var> outs = ad::custom_adjoint(forward, std::move(adjoint), inputs);
  std::size_t k = 0;
  const Var t = outs[k++];
  for (auto& p : sys.pops)
    for (Var& v : p.state) v = outs[k++];
  if (sys.acc) {
    sys.acc->z_int = outs[k++];
    sys.acc->z_exp = outs[k++];
    sys.acc->z_max = outs[k++];
  }
  if (!hit_info) return {t, std::nullopt};
  hit_info->time = t;
  return {t, std::move(hit_info)};
}

}  // namespace detail

// Advances `sys` from t_start towards t_end. Stops early at the first spike,
// leaving the system at the pre-reset state y-.
inline SegmentResult integrate_segment(System& sys, Var t_start, Var t_end, const SolverOptions& opt) {
  if (opt.checkpoint) return detail::checkpointed_segment(sys, t_start, t_end, opt);
  return detail::plain_segment(sys, t_start, t_end, opt);
}

// Resets every masked neuron and lists the spikes in (population, neuron) order.
inline std::vector<Spike> apply_event(System& sys, const EventHit& hit) {
  std::vector<Spike> spikes;
  for (std::size_t p = 0; p < sys.pops.size(); ++p) {
    auto& pop = sys.pops[p];
    const Mask& mask = hit.masks[p];
    if (!any_set(mask)) continue;
    pop.state = pop.model->reset_spiked(hit.time, pop.state, mask, pop.params);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) spikes.push_back({p, i});
  }
  return spikes;
}

}  // namespace evnn
