#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"

using namespace evnn;

namespace {

// Output held at V = 1 forever; never fires, ignores input.
class Constant final : public NeuronModel {
 public:
  std::string name() const override { return "constant"; }
  std::vector<ChannelSpec> channels() const override { return {{"V"}}; }
  bool can_spike() const override { return false; }
  State init_state(ad::Tape& tape, std::size_t n, Params) const override { return {tape.constant_fill(n, 1.0)}; }
  State dynamics(Var, const State&, Params) const override { return {Var{}}; }
  Var spike_condition(Var, const State& y, Params) const override {
    return y[0].tape()->constant_fill(y[0].size(), kNeverSpikes);
  }
  State input_spike(const State& y, Var, std::size_t, Params) const override { return y; }
  State reset_spiked(Var, const State& y, const Mask&, Params) const override { return y; }
};

FFEvNN fig4_net(ModelPtr neuron = wrap_amos(make_lif())) {
  return FFEvNN(5, {{neuron, 20, 14.0, 28.0}, {neuron, 3, 14.0, 28.0}}, {.step = 0.1, .max_time = 30.0});
}

// Keeps the tape alive alongside the output, whose Vars live on it.
struct Sim {
  ad::Tape tape;
  TrialOutput out;
  Sim(const EvNN& net, const ParamSet& ps, const TrialInput& in, SimOptions so = {}) {
    const auto vars = net.bind(tape, ps);
    out = net.simulate(tape, vars, in, so);
  }
};

// A single LIF neuron driven by one input of weight w at t = 0 reaches
// V(t) = w tau_s / (tau_m - tau_s) (exp(-t/tau_m) - exp(-t/tau_s)).
double analytic_lif_crossing(double w) {
  auto v = [w](double t) { return w * 5.0 / 15.0 * (std::exp(-t / 20.0) - std::exp(-t / 5.0)) - 1.0; };
  double a = 0.0, b = 20.0 * std::log(4.0) / 3.0;  // the response peaks at b
  while (b - a > 1e-13) {
    const double m = 0.5 * (a + b);
    (v(m) >= 0.0 ? b : a) = m;
  }
  return 0.5 * (a + b);
}

double single_lif_spike(double w, double step) {
  FFEvNN net(1, {{make_lif(), 1, 0.0, 0.0}}, {.step = step, .max_time = 30.0});
  ParamSet ps = net.init_params(0);
  ps.at("layer0.W").data = {w};
  ps.at("layer0.I_c").data = {0.0};
  return Sim(net, ps, {{{0, 0.0}}, 0.0}).out.first_spike_time[0];
}

}  // namespace

TEST(SpikeBuffer, OrdersByTimeThenInsertion) {
  SpikeBuffer b;
  const double times[] = {3.0, 1.0, 3.0, 2.0, 1.0};
  for (std::size_t i = 0; i < 5; ++i) {
    EventRecord r;
    r.time_value = times[i];
    r.source = i;
    b.push(r);
  }
  std::vector<std::size_t> order;
  while (!b.empty()) order.push_back(b.pop().source);
  EXPECT_EQ(order, (std::vector<std::size_t>{1, 4, 3, 0, 2}));
}

TEST(Network, Fig4ConstructionReturnsOneTimePerOutput) {
  const FFEvNN net = fig4_net();
  const ParamSet ps = net.init_params(0);
  const Dataset d = generate_yinyang(4, 42);
  for (const auto& s : d.samples) {
    const Sim out_sim(net, ps, s.input());
    const TrialOutput& out = out_sim.out;
    ASSERT_EQ(out.first_spike_time.size(), 3u);
    for (double t : out.first_spike_time) EXPECT_TRUE(std::isinf(t) || (t > 0.0 && t <= 30.0));
  }
}

TEST(Network, ZeroWeightsAndBiasLeaveOutputsSilent) {
  const FFEvNN net = fig4_net(make_lif());
  ParamSet ps = net.init_params(0);
  for (auto& t : ps.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
  const Sim out_sim(net, ps, generate_yinyang(1, 42).samples[0].input());
  const TrialOutput& out = out_sim.out;
  for (double t : out.first_spike_time) EXPECT_EQ(t, kSilent);
  for (const auto& layer : out.spike_counts)
    for (auto c : layer) EXPECT_EQ(c, 0u);
  EXPECT_EQ(out.end_time, 30.0);
}

TEST(Network, InitialisationFollowsFanIn) {
  const FFEvNN net = fig4_net();
  const ParamSet ps = net.init_params(3);
  const auto& w0 = ps.at("layer0.W");
  EXPECT_EQ(w0.shape, (std::vector<std::size_t>{20, 5}));
  for (double w : w0.data) {
    EXPECT_GE(w, (14.0 - 28.0) / 5.0);
    EXPECT_LE(w, (14.0 + 28.0) / 5.0);
  }
  for (double w : ps.at("layer1.W").data) EXPECT_LE(std::abs(w - 14.0 / 20.0), 28.0 / 20.0);
  for (double c : ps.at("layer0.I_c").data) EXPECT_LE(std::abs(c - 0.0025), 0.005);
  const ParamSet again = net.init_params(3);
  EXPECT_EQ(again.at("layer0.W").data, w0.data);
}

TEST(Network, SingleLifOutputMatchesClosedForm) {
  const double exact = analytic_lif_crossing(20.0);
  EXPECT_NEAR(single_lif_spike(20.0, 0.1), exact, 0.1);
  const double fine = single_lif_spike(20.0, 0.01);
  EXPECT_NEAR(fine, exact, 0.01);
  EXPECT_LT(std::abs(fine - exact), std::abs(single_lif_spike(20.0, 0.1) - exact));
}

TEST(Network, HiddenSpikePropagatesWeightColumnAtItsTime) {
  // One hidden LIF driven hard by the input; the output is a leaky integrator
  // whose current must jump by exactly the hidden -> output weight.
  FFEvNN net(1, {{make_lif(), 1, 0.0, 0.0}, {make_li(), 2, 0.0, 0.0}}, {.step = 0.1, .max_time = 30.0});
  ParamSet ps = net.init_params(0);
  ps.at("layer0.W").data = {20.0};
  ps.at("layer0.I_c").data = {0.0};
  ps.at("layer1.W").data = {0.7, -0.4};
  std::vector<TrajectoryRow> rows;
  SimOptions so;
  so.readout = Readout::kState;
  so.trajectory = &rows;
  const Sim out_sim(net, ps, {{{0, 0.0}}, 0.0}, so);
  const TrialOutput& out = out_sim.out;
  ASSERT_GE(out.spike_counts[0][0], 1u);
  const double t_spike = single_lif_spike(20.0, 0.1);
  std::vector<double> currents;
  for (const auto& r : rows)
    if (r.layer == 1 && r.channel == "I" && r.time == t_spike) currents.push_back(r.value);
  // Rows at t*: pre-delivery (still zero) then post-delivery.
  ASSERT_GE(currents.size(), 4u);
  EXPECT_EQ(currents[currents.size() - 2], 0.7);
  EXPECT_EQ(currents[currents.size() - 1], -0.4);
}

TEST(Network, RecurrentDiagonalIsMasked) {
  RecEvNN net(9, {{make_egru(), 8, 0.0, 6.0}, {make_li(), 2, 0.0, 6.0}}, {.layer = 0, .weight_mean = 0.0, .weight_range = 6.0},
              {.step = 0.1, .max_time = 60.0});
  const ParamSet ps = net.init_params(1);
  const Tensor& r = ps.at("layer0.R");
  const std::size_t n = 8;
  ASSERT_EQ(r.grad_mask.size(), r.data.size());
  for (std::size_t row = 0; row < r.shape[0]; ++row) {
    for (std::size_t col = 0; col < n; ++col) {
      const bool diag = row % n == col;
      if (diag) {
        EXPECT_EQ(r.data[row * n + col], 0.0);
        EXPECT_EQ(r.grad_mask[row * n + col], 0.0);
      } else {
        EXPECT_EQ(r.grad_mask[row * n + col], 1.0);
      }
    }
  }
}

TEST(Network, InputOrderDoesNotMatterForDistinctTimes) {
  const FFEvNN net = fig4_net(make_lif());
  const ParamSet ps = net.init_params(2);
  const Sample s = generate_yinyang(1, 7).samples[0];
  TrialInput shuffled = s.input();
  std::reverse(shuffled.spikes.begin(), shuffled.spikes.end());
  const Sim a_sim(net, ps, s.input());
  const TrialOutput& a = a_sim.out;
  const Sim b_sim(net, ps, shuffled);
  const TrialOutput& b = b_sim.out;
  EXPECT_EQ(a.first_spike_time, b.first_spike_time);
  EXPECT_EQ(a.spike_counts, b.spike_counts);
}

TEST(Network, LaterInputsDoNotChangeEarlierState) {
  FFEvNN net(5, {{make_lif(), 20, 14.0, 28.0}, {make_li(), 3, 14.0, 28.0}}, {.step = 0.1, .max_time = 30.0});
  const ParamSet ps = net.init_params(4);
  TrialInput a{{{0, 0.0}, {1, 5.0}, {2, 12.0}, {3, 25.0}}, 0.0};
  TrialInput b = a;
  b.spikes[3].time = 27.0;
  SimOptions so;
  so.readout = Readout::kState;
  so.observe = {5.0, 12.0, 20.0, 24.9, 26.0};
  const Sim sa(net, ps, a, so), sb(net, ps, b, so);
  const TrialOutput &oa = sa.out, &ob = sb.out;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_EQ(ad::to_vector(oa.observations[i].state[c].values()), ad::to_vector(ob.observations[i].state[c].values()));
  EXPECT_NE(ad::to_vector(oa.observations[4].state[1].values()), ad::to_vector(ob.observations[4].state[1].values()));
}

TEST(Network, ObservationAtZeroIsInitialState) {
  FFEvNN net(5, {{make_lif(), 4, 14.0, 28.0}, {make_li(), 3, 14.0, 28.0}});
  const ParamSet ps = net.init_params(0);
  SimOptions so;
  so.readout = Readout::kState;
  so.observe = {0.0};
  const Sim out_sim(net, ps, generate_yinyang(1, 1).samples[0].input(), so);
  const TrialOutput& out = out_sim.out;
  ASSERT_EQ(out.observations.size(), 2u);
  EXPECT_EQ(out.observations[0].time, 0.0);
  for (const auto& c : out.observations[0].state)
    for (double v : c.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.observations[1].time, 30.0);
}

TEST(Network, AccumulatorsOfConstantOutput) {
  const double T = 30.0, h = 0.1;
  FFEvNN net(1, {{std::make_shared<Constant>(), 2, 0.0, 0.0}}, {.step = h, .max_time = T});
  const ParamSet ps = net.init_params(0);
  SimOptions so;
  so.readout = Readout::kState;
  const Sim out_sim(net, ps, {}, so);
  const TrialOutput& out = out_sim.out;
  const double lambda = 1.0 / T;
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(out.z_int[k], T, 1e-9);
    EXPECT_NEAR(out.z_exp[k], (1.0 - std::exp(-lambda * T)) / lambda, h);
    EXPECT_NEAR(out.z_exp[k], (1.0 - std::exp(-1.0)) * T, h);
    EXPECT_EQ(out.z_max[k], 1.0);
  }
}

TEST(Network, AccumulatorWindowGatesIntegration) {
  FFEvNN net(1, {{std::make_shared<Constant>(), 1, 0.0, 0.0}}, {.step = 0.1, .max_time = 30.0});
  const ParamSet ps = net.init_params(0);
  SimOptions so;
  so.readout = Readout::kState;
  const Sim out_sim(net, ps, {{}, 30.0}, so);
  const TrialOutput& out = out_sim.out;
  EXPECT_NEAR(out.z_int[0], 0.0, 1e-12);
  EXPECT_NEAR(out.z_exp[0], 0.0, 1e-12);
  const Sim half_sim(net, ps, {{}, 20.0}, so);
  const TrialOutput& half = half_sim.out;
  EXPECT_NEAR(half.z_int[0], 10.0, 1e-9);
}

TEST(Network, IntegralAccumulatorMatchesTrajectory) {
  FFEvNN net(5, {{make_lif(), 20, 14.0, 28.0}, {make_li(), 3, 14.0, 28.0}}, {.step = 0.1, .max_time = 30.0});
  const ParamSet ps = net.init_params(5);
  std::vector<TrajectoryRow> rows;
  SimOptions so;
  so.readout = Readout::kState;
  so.trajectory = &rows;
  const Sim out_sim(net, ps, generate_yinyang(1, 3).samples[0].input(), so);
  const TrialOutput& out = out_sim.out;
  // Euler on z' = V is the left Riemann sum over committed points; it must
  // match a trapezoid rule on the dumped trajectory to first order in h.
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<std::pair<double, double>> v;
    for (const auto& r : rows)
      if (r.layer == 1 && r.neuron == k && r.channel == "V") v.emplace_back(r.time, r.value);
    double left = 0.0, trap = 0.0, vmax = 0.0;
    for (std::size_t i = 1; i < v.size(); ++i) {
      const double dt = v[i].first - v[i - 1].first;
      left += dt * v[i - 1].second;
      trap += 0.5 * dt * (v[i - 1].second + v[i].second);
      vmax = std::max(vmax, std::abs(v[i].second));
    }
    EXPECT_NEAR(out.z_int[k], left, 1e-9 * std::max(1.0, std::abs(left)));
    EXPECT_NEAR(out.z_int[k], trap, 0.1 * vmax);
    double mx = -INFINITY;
    for (const auto& p : v) mx = std::max(mx, p.second);
    EXPECT_EQ(out.z_max[k], mx);
  }
}

TEST(Network, SilencedNeuronPassesNoGradient) {
  const FFEvNN net = fig4_net(make_lif());
  ParamSet ps = net.init_params(6);
  const std::size_t n = 4;
  auto& w1 = ps.at("layer1.W");
  for (std::size_t row = 0; row < 3; ++row) w1.data[row * 20 + n] = 0.0;
  const Dataset d = generate_yinyang(8, 42);
  for (const auto& s : d.samples) {
    const auto e = check::trial_loss_eval(net, ps, s, Readout::kTtfs, LogitKind::kIntegral, 30.0, true);
    // layer0.W row n, then layer0.I_c[n]
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(e.grad[n * 5 + c], 0.0);
    EXPECT_EQ(e.grad[100 + n], 0.0);
  }
}

TEST(Network, GradientMatchesFiniteDifferences) {
  const Dataset d = generate_yinyang(50, 42);
  FFEvNN lif(5, {{make_lif(), 10, 14.0, 28.0}, {make_lif(), 3, 14.0, 28.0}});
  const auto r = check::grad_check(lif, lif.init_params(3), d, Readout::kTtfs, LogitKind::kIntegral, 30.0, 10, 1e-3, 11);
  EXPECT_EQ(r.checked, 10u);
  EXPECT_TRUE(r.failures.empty()) << r.failures.front();
  FFEvNN qif(5, {{make_qif(), 10, 40.0, 80.0}, {make_li(), 3, 40.0, 80.0}});
  const auto q = check::grad_check(qif, qif.init_params(3), d, Readout::kState, LogitKind::kExpIntegral, 30.0, 10, 1e-3, 12);
  EXPECT_EQ(q.checked, 10u);
  EXPECT_TRUE(q.failures.empty()) << q.failures.front();
}

TEST(Network, RepeatedTrialsAreBitIdentical) {
  const FFEvNN net = fig4_net(make_lif());
  const ParamSet ps = net.init_params(8);
  const Sample s = generate_yinyang(1, 9).samples[0];
  const auto a = check::trial_loss_eval(net, ps, s, Readout::kTtfs, LogitKind::kIntegral, 30.0, true);
  const auto b = check::trial_loss_eval(net, ps, s, Readout::kTtfs, LogitKind::kIntegral, 30.0, true);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(SpikeMetrics, DefinitionExample) {
  const auto m = spike_metrics({{2, 0, 3}}, {1, 1, 1});
  EXPECT_EQ(m.max_firing, 3.0);
  EXPECT_EQ(m.fire_count, 5.0);
  EXPECT_EQ(m.dead_neurons, 1.0);
  EXPECT_TRUE(std::isnan(m.mean_ttfs));
}

TEST(SpikeMetrics, SilentNetwork) {
  const std::vector<std::vector<std::uint32_t>> counts(4, std::vector<std::uint32_t>(23, 0));
  std::vector<std::uint8_t> hidden(23, 1);
  for (std::size_t k = 20; k < 23; ++k) hidden[k] = 0;
  const auto m = spike_metrics(counts, hidden, {kSilent, kSilent, kSilent, kSilent});
  EXPECT_EQ(m.dead_neurons, 20.0);
  EXPECT_EQ(m.fire_count, 0.0);
  EXPECT_EQ(m.max_firing, 0.0);
  EXPECT_TRUE(std::isnan(m.mean_ttfs));
}

TEST(SpikeMetrics, MeanOfPerSampleMaximaAndFirstSpikes) {
  const auto m = spike_metrics({{1, 0}, {3, 1}}, {1, 1}, {10.0, kSilent});
  EXPECT_EQ(m.max_firing, 2.0);
  EXPECT_EQ(m.fire_count, 2.5);
  EXPECT_EQ(m.dead_neurons, 0.0);
  EXPECT_EQ(m.mean_ttfs, 10.0);
}

TEST(SpikeMetrics, AmosNetworkFiresAtMostOnce) {
  const FFEvNN net = fig4_net();
  const ParamSet ps = net.init_params(0);
  const Dataset d = generate_yinyang(30, 40);
  std::vector<std::vector<std::uint32_t>> counts;
  for (const auto& s : d.samples) {
    const Sim out_sim(net, ps, s.input());
    const TrialOutput& out = out_sim.out;
    std::vector<std::uint32_t> flat;
    for (const auto& l : out.spike_counts) flat.insert(flat.end(), l.begin(), l.end());
    counts.push_back(flat);
  }
  const auto m = spike_metrics(counts, std::vector<std::uint8_t>(23, 1));
  EXPECT_EQ(m.max_firing, 1.0);
}
