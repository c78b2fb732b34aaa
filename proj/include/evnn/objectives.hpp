#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evnn/adgraph.hpp"
#include "evnn/network.hpp"

namespace evnn {

struct TtfsLossParams {
  double tau0 = 0.5;
  double tau1 = 6.4;
  double alpha = 0.003;
};

enum class LogitKind { kMax, kIntegral, kExpIntegral };

inline LogitKind parse_logit_kind(const std::string& s) {
  if (s == "max") return LogitKind::kMax;
  if (s == "integral" || s == "int") return LogitKind::kIntegral;
  if (s == "exp" || s == "exp-integral" || s == "exp_integral") return LogitKind::kExpIntegral;
  throw std::invalid_argument("unknown logit kind '" + s + "'");
}

// First-spike times with silent outputs replaced by max_time. The clamped
// entries are constants, so they pass no gradient.
inline Var clamp_silent(ad::Tape& tape, const std::vector<Var>& first_spike, double max_time) {
  if (first_spike.empty()) throw std::invalid_argument("no output times");
  std::vector<Var> parts;
  parts.reserve(first_spike.size());
  for (const Var& v : first_spike) parts.push_back(v.valid() ? v : tape.constant(max_time));
  return ad::concat(parts);
}

// -log softmax(-t / tau0)[target] + alpha (exp(t_target / tau1) - 1)
inline Var ttfs_loss(Var times, std::size_t target, const TtfsLossParams& p = {}) {
  if (!(p.tau0 > 0.0) || !(p.tau1 > 0.0)) throw std::invalid_argument("ttfs loss time constants must be positive");
  if (target >= times.size()) throw std::out_of_range("target class " + std::to_string(target));
  const Var logits = times * (-1.0 / p.tau0);
  const Var ce = ad::logsumexp(logits) - ad::index(logits, target);
  if (p.alpha == 0.0) return ce;
  const Var reg = (ad::exp(ad::index(times, target) * (1.0 / p.tau1)) - 1.0) * p.alpha;
  return ce + reg;
}

inline Var state_logits(const TrialOutput& out, LogitKind kind) {
  const Var z = kind == LogitKind::kMax ? out.z_max : kind == LogitKind::kIntegral ? out.z_int : out.z_exp;
  if (!z.valid()) throw std::logic_error("trial was not simulated with the state readout");
  return z;
}

// -log softmax(z)[target]
inline Var state_loss(Var logits, std::size_t target) {
  if (target >= logits.size()) throw std::out_of_range("target class " + std::to_string(target));
  return ad::logsumexp(logits) - ad::index(logits, target);
}

// Cross-entropy on the exponentially weighted integral that only accumulates
// from the trial's window start (the first cue spike) onwards.
inline Var xor_windowed_loss(const TrialOutput& out, std::size_t target) {
  return state_loss(state_logits(out, LogitKind::kExpIntegral), target);
}

// Earliest time wins; ties (including all silent) go to the lowest index.
inline std::size_t argmin_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return best;
}

// Largest value wins; ties go to the lowest index.
inline std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t classify(const TrialOutput& out, Readout mode, LogitKind kind = LogitKind::kIntegral) {
  if (mode == Readout::kTtfs) return argmin_first(out.first_spike_time);
  return argmax_first(state_logits(out, kind).values());
}

}  // namespace evnn
