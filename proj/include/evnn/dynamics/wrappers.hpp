#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "evnn/dynamics/neuron_model.hpp"

namespace evnn {

namespace detail {

inline State head(const State& y, std::size_t n) { return State(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n)); }

inline State with_tail(State base, const State& y, std::size_t from) {
  base.insert(base.end(), y.begin() + static_cast<std::ptrdiff_t>(from), y.end());
  return base;
}

}  // namespace detail

// At Most One Spike: once a neuron has fired its spike condition is pinned
// negative for the rest of the trial. Appends a non-differentiable flag.
class Amos final : public NeuronModel {
 public:
  explicit Amos(ModelPtr base) : base_(std::move(base)), base_channels_(base_->channels().size()) {}

  std::string name() const override { return "amos(" + base_->name() + ")"; }
  std::vector<ChannelSpec> channels() const override {
    auto c = base_->channels();
    c.push_back({"spiked", 1, false});
    return c;
  }
  std::vector<ParamSpec> params() const override { return base_->params(); }
  std::vector<std::size_t> param_lengths(std::size_t n) const override { return base_->param_lengths(n); }
  std::size_t weight_slots() const override { return base_->weight_slots(); }
  bool can_spike() const override { return base_->can_spike(); }

  State init_state(ad::Tape& tape, std::size_t n, Params p) const override {
    State y = base_->init_state(tape, n, p);
    y.push_back(tape.constant_fill(n, 0.0));
    return y;
  }

  State dynamics(Var t, const State& y, Params p) const override {
    State d = base_->dynamics(t, detail::head(y, base_channels_), p);
    d.emplace_back();
    return d;
  }

  Var spike_condition(Var t, const State& y, Params p) const override {
    const Var g = base_->spike_condition(t, detail::head(y, base_channels_), p);
    const auto flags = y[base_channels_].values();
    Mask fired(flags.size());
    bool any = false;
    for (std::size_t i = 0; i < flags.size(); ++i) {
      fired[i] = flags[i] > 0.5;
      any = any || fired[i];
    }
    if (!any) return g;
    return ad::where(fired, g.tape()->constant(kNeverSpikes), g);
  }

  State input_spike(const State& y, Var w, std::size_t source, Params p) const override {
    return detail::with_tail(base_->input_spike(detail::head(y, base_channels_), w, source, p), y, base_channels_);
  }

  State reset_spiked(Var t, const State& y, const Mask& mask, Params p) const override {
    if (!any_set(mask)) return y;
    State out = base_->reset_spiked(t, detail::head(y, base_channels_), mask, p);
    const auto flags = y[base_channels_].values();
    std::vector<double> next(flags.begin(), flags.end());
    for (std::size_t i = 0; i < next.size(); ++i)
      if (mask[i]) next[i] = 1.0;
    out.push_back(y[0].tape()->constant(next));
    return out;
  }

 private:
  ModelPtr base_;
  std::size_t base_channels_;
};

// Absolute refractory period: for t_ref after a spike the spike condition is
// pinned negative. Dynamics and input integration are unaffected. The
// refractory clock is bookkeeping and carries no gradient.
class Refractory final : public NeuronModel {
 public:
  Refractory(ModelPtr base, double t_ref)
      : base_(std::move(base)), base_channels_(base_->channels().size()), t_ref_(t_ref) {
    if (t_ref < 0.0) throw std::invalid_argument("refractory period must be non-negative");
  }

  double period() const { return t_ref_; }

  std::string name() const override { return "refractory(" + base_->name() + ")"; }
  std::vector<ChannelSpec> channels() const override {
    auto c = base_->channels();
    c.push_back({"refractory_until", 1, false});
    return c;
  }
  std::vector<ParamSpec> params() const override { return base_->params(); }
  std::vector<std::size_t> param_lengths(std::size_t n) const override { return base_->param_lengths(n); }
  std::size_t weight_slots() const override { return base_->weight_slots(); }
  bool can_spike() const override { return base_->can_spike(); }

  State init_state(ad::Tape& tape, std::size_t n, Params p) const override {
    State y = base_->init_state(tape, n, p);
    y.push_back(tape.constant_fill(n, -std::numeric_limits<double>::infinity()));
    return y;
  }

  State dynamics(Var t, const State& y, Params p) const override {
    State d = base_->dynamics(t, detail::head(y, base_channels_), p);
    d.emplace_back();
    return d;
  }

  // min(g, t - until): strictly negative inside the period and continuous in
  // t when it ends, so a neuron still above threshold fires exactly at the
  // end of the period instead of at an arbitrary solver step.
  Var spike_condition(Var t, const State& y, Params p) const override {
    const Var g = base_->spike_condition(t, detail::head(y, base_channels_), p);
    const auto until = y[base_channels_].values();
    const auto gv = g.values();
    const double now = t.value();
    Mask use_clock(until.size());
    bool any = false;
    for (std::size_t i = 0; i < until.size(); ++i) {
      use_clock[i] = std::isfinite(until[i]) && now - until[i] < gv[i];
      any = any || use_clock[i];
    }
    if (!any) return g;
    return ad::where(use_clock, t - y[base_channels_], g);
  }

  State input_spike(const State& y, Var w, std::size_t source, Params p) const override {
    return detail::with_tail(base_->input_spike(detail::head(y, base_channels_), w, source, p), y, base_channels_);
  }

  State reset_spiked(Var t, const State& y, const Mask& mask, Params p) const override {
    if (!any_set(mask)) return y;
    State out = base_->reset_spiked(t, detail::head(y, base_channels_), mask, p);
    const auto until = y[base_channels_].values();
    std::vector<double> next(until.begin(), until.end());
    for (std::size_t i = 0; i < next.size(); ++i)
      if (mask[i]) next[i] = t.value() + t_ref_;
    out.push_back(y[0].tape()->constant(next));
    return out;
  }

 private:
  ModelPtr base_;
  std::size_t base_channels_;
  double t_ref_;
};

// Heterogeneous population: contiguous index ranges, each driven by its own
// model. Channels and parameters of the parts are concatenated, so their
// namespaces never overlap. All parts must agree on weight_slots().
class MultiNeuronModel final : public NeuronModel {
 public:
  struct Part {
    ModelPtr model;
    std::size_t begin = 0;
    std::size_t end = 0;
  };

  explicit MultiNeuronModel(std::vector<Part> parts) : parts_(std::move(parts)) {
    if (parts_.empty()) throw std::invalid_argument("multi-neuron model needs at least one part");
    std::size_t expect = 0;
    for (const auto& part : parts_) {
      if (part.begin != expect || part.end <= part.begin)
        throw std::invalid_argument("partition must cover contiguous, non-empty ranges starting at 0");
      if (part.model->weight_slots() != parts_.front().model->weight_slots())
        throw std::invalid_argument("all parts must use the same number of weight slots");
      expect = part.end;
      channel_offsets_.push_back(channel_count_);
      channel_count_ += part.model->channels().size();
      param_offsets_.push_back(param_count_);
      param_count_ += part.model->params().size();
    }
    size_ = expect;
  }

  std::size_t size() const { return size_; }
  const std::vector<Part>& parts() const { return parts_; }

  std::string name() const override {
    std::string s = "multi(";
    for (std::size_t k = 0; k < parts_.size(); ++k) s += (k ? "," : "") + parts_[k].model->name();
    return s + ")";
  }
  std::vector<ChannelSpec> channels() const override {
    std::vector<ChannelSpec> out;
    for (std::size_t k = 0; k < parts_.size(); ++k)
      for (auto c : parts_[k].model->channels()) {
        c.name = "p" + std::to_string(k) + "." + c.name;
        out.push_back(c);
      }
    return out;
  }
  // Each part's parameters are sized for that part only.
  std::vector<ParamSpec> params() const override {
    std::vector<ParamSpec> out;
    for (std::size_t k = 0; k < parts_.size(); ++k)
      for (auto p : parts_[k].model->params()) {
        p.name = "p" + std::to_string(k) + "." + p.name;
        out.push_back(p);
      }
    return out;
  }
  std::vector<std::size_t> param_lengths(std::size_t) const override {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < parts_.size(); ++k)
      for (std::size_t len : parts_[k].model->param_lengths(width(k))) out.push_back(len);
    return out;
  }
  std::size_t weight_slots() const override { return parts_.front().model->weight_slots(); }
  bool can_spike() const override {
    for (const auto& part : parts_)
      if (part.model->can_spike()) return true;
    return false;
  }

  State init_state(ad::Tape& tape, std::size_t n, Params p) const override {
    if (n != size_) throw std::invalid_argument("multi-neuron model initialised with the wrong size");
    State out;
    for (std::size_t k = 0; k < parts_.size(); ++k) {
      State s = parts_[k].model->init_state(tape, width(k), part_params(p, k));
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  State dynamics(Var t, const State& y, Params p) const override {
    State out;
    for (std::size_t k = 0; k < parts_.size(); ++k) {
      State d = parts_[k].model->dynamics(t, part_state(y, k), part_params(p, k));
      out.insert(out.end(), d.begin(), d.end());
    }
    return out;
  }

  Var spike_condition(Var t, const State& y, Params p) const override {
    std::vector<Var> parts;
    for (std::size_t k = 0; k < parts_.size(); ++k)
      parts.push_back(parts_[k].model->spike_condition(t, part_state(y, k), part_params(p, k)));
    if (parts.size() == 1) return parts.front();
    return ad::concat(parts);
  }

  State input_spike(const State& y, Var w, std::size_t source, Params p) const override {
    const std::size_t slots = weight_slots();
    State out;
    for (std::size_t k = 0; k < parts_.size(); ++k) {
      Var wk = w;
      if (parts_.size() > 1) {
        // gather the slot-major block of this part
        std::vector<Var> blocks;
        for (std::size_t s = 0; s < slots; ++s) blocks.push_back(ad::slice(w, s * size_ + parts_[k].begin, width(k)));
        wk = blocks.size() == 1 ? blocks.front() : ad::concat(blocks);
      }
      State s = parts_[k].model->input_spike(part_state(y, k), wk, source, part_params(p, k));
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  State reset_spiked(Var t, const State& y, const Mask& mask, Params p) const override {
    if (!any_set(mask)) return y;
    State out;
    for (std::size_t k = 0; k < parts_.size(); ++k) {
      Mask mk(mask.begin() + static_cast<std::ptrdiff_t>(parts_[k].begin),
              mask.begin() + static_cast<std::ptrdiff_t>(parts_[k].end));
      State s = part_state(y, k);
      if (any_set(mk)) s = parts_[k].model->reset_spiked(t, s, mk, part_params(p, k));
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

 private:
  std::size_t width(std::size_t k) const { return parts_[k].end - parts_[k].begin; }
  State part_state(const State& y, std::size_t k) const {
    const std::size_t b = channel_offsets_[k];
    const std::size_t e = b + parts_[k].model->channels().size();
    return State(y.begin() + static_cast<std::ptrdiff_t>(b), y.begin() + static_cast<std::ptrdiff_t>(e));
  }
  Params part_params(Params p, std::size_t k) const {
    return p.subspan(param_offsets_[k], parts_[k].model->params().size());
  }

  std::vector<Part> parts_;
  std::vector<std::size_t> channel_offsets_;
  std::vector<std::size_t> param_offsets_;
  std::size_t channel_count_ = 0;
  std::size_t param_count_ = 0;
  std::size_t size_ = 0;
};

inline ModelPtr wrap_amos(ModelPtr base) { return std::make_shared<Amos>(std::move(base)); }
inline ModelPtr wrap_refractory(ModelPtr base, double t_ref) {
  return std::make_shared<Refractory>(std::move(base), t_ref);
}
inline ModelPtr multi_neuron(std::vector<MultiNeuronModel::Part> parts) {
  return std::make_shared<MultiNeuronModel>(std::move(parts));
}

}  // namespace evnn
