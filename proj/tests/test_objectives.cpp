#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "evnn/objectives.hpp"

using namespace evnn;

namespace {

double ttfs_value(const std::vector<double>& t, std::size_t target, TtfsLossParams p = {}) {
  ad::Tape tape;
  return ttfs_loss(tape.leaf(t), target, p).value();
}

std::vector<double> ttfs_grad(const std::vector<double>& t, std::size_t target, TtfsLossParams p = {}) {
  ad::Tape tape;
  const Var v = tape.leaf(t);
  tape.backward(ttfs_loss(v, target, p));
  return ad::to_vector(v.grads());
}

double state_value(const std::vector<double>& z, std::size_t target) {
  ad::Tape tape;
  return state_loss(tape.leaf(z), target).value();
}

}  // namespace

TEST(TtfsLoss, ReferenceValue) {
  // Cross-entropy is ~2e-9 here; the regularizer dominates.
  const double reg = 0.003 * (std::exp(10.0 / 6.4) - 1.0);
  const double ce = std::log(1.0 + std::exp(-20.0) + std::exp(-40.0));
  EXPECT_NEAR(ttfs_value({10.0, 20.0, 30.0}, 0), reg + ce, 1e-15);
  EXPECT_NEAR(ttfs_value({10.0, 20.0, 30.0}, 0), 0.011312, 5e-7);
}

TEST(TtfsLoss, EqualTimesWithoutRegularizerGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) {
    const std::vector<double> t(c, 12.5);
    EXPECT_NEAR(ttfs_value(t, 1, {.tau0 = 0.5, .tau1 = 6.4, .alpha = 0.0}), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(TtfsLoss, RegularizerSlopeAtZero) {
  const TtfsLossParams p;
  const TtfsLossParams ce_only{.tau0 = p.tau0, .tau1 = p.tau1, .alpha = 0.0};
  const std::vector<double> t{0.0, 5.0, 7.0};
  const double full = ttfs_grad(t, 0, p)[0];
  const double ce = ttfs_grad(t, 0, ce_only)[0];
  EXPECT_NEAR(full - ce, p.alpha / p.tau1, 1e-15);
  EXPECT_NEAR(ttfs_value(t, 0, p) - ttfs_value(t, 0, ce_only), 0.0, 1e-15);
}

TEST(TtfsLoss, StableForLargeTimes) {
  const double v = ttfs_value({30.0, 30.0, 0.5}, 0);
  EXPECT_TRUE(std::isfinite(v));
  // logits (-60, -60, -1): the cross-entropy is 59 + log(1 + 2 e^-59).
  EXPECT_NEAR(v, 59.0 + std::log1p(2.0 * std::exp(-59.0)) + 0.003 * (std::exp(30.0 / 6.4) - 1.0), 1e-12);
}

TEST(TtfsLoss, GradientSigns) {
  const TtfsLossParams p;
  const TtfsLossParams ce_only{.tau0 = p.tau0, .tau1 = p.tau1, .alpha = 0.0};
  // Target not uniquely earliest: cross-entropy pulls it earlier and pushes the
  // others later.
  for (const auto& t : std::vector<std::vector<double>>{{8.0, 6.0, 9.0}, {5.0, 5.0, 5.0}, {20.0, 1.0, 3.0}}) {
    const auto g = ttfs_grad(t, 0, ce_only);
    EXPECT_GT(g[0], 0.0);
    EXPECT_LT(g[1], 0.0);
    EXPECT_LT(g[2], 0.0);
    const auto gr = ttfs_grad(t, 0, p);
    EXPECT_NEAR(gr[0] - g[0], p.alpha / p.tau1 * std::exp(t[0] / p.tau1), 1e-14);
  }
}

TEST(TtfsLoss, RejectsBadInput) {
  ad::Tape tape;
  const Var t = tape.leaf(std::vector<double>{1.0, 2.0});
  EXPECT_THROW(ttfs_loss(t, 2), std::out_of_range);
  EXPECT_THROW(ttfs_loss(t, 0, {.tau0 = 0.0}), std::invalid_argument);
}

TEST(TtfsLoss, ClampedSilentOutputsPassNoGradient) {
  ad::Tape tape;
  const Var fired = tape.leaf(4.0);
  const Var t = clamp_silent(tape, {fired, Var{}, Var{}}, 30.0);
  EXPECT_EQ(ad::to_vector(t.values()), (std::vector<double>{4.0, 30.0, 30.0}));
  tape.backward(ttfs_loss(t, 1));
  EXPECT_NE(fired.grad(), 0.0);
}

TEST(StateLoss, ReferenceValue) {
  EXPECT_NEAR(state_value({5.0, 0.0, 0.0}, 0), std::log(1.0 + 2.0 * std::exp(-5.0)), 1e-15);
  // 0.0133859, quoted truncated to six places.
  EXPECT_NEAR(state_value({5.0, 0.0, 0.0}, 0), 0.013385, 1e-6);
}

TEST(StateLoss, UniformLogitsGiveLogC) {
  EXPECT_NEAR(state_value({0.3, 0.3, 0.3}, 2), std::log(3.0), 1e-15);
  EXPECT_NEAR(state_value(std::vector<double>(10, -7.0), 4), std::log(10.0), 1e-14);
}

TEST(StateLoss, ShiftInvariance) {
  const std::vector<double> z{0.7, -1.2, 2.5, 0.1};
  const double base = state_value(z, 1);
  for (double c : {-100.0, -3.0, 1e-3, 50.0, 700.0}) {
    std::vector<double> s = z;
    for (double& v : s) v += c;
    EXPECT_NEAR(state_value(s, 1), base, 1e-12 * base);
  }
}

TEST(Classify, ArgminAndArgmaxWithLowestIndexTies) {
  const std::vector<double> times{12.0, 9.0, 30.0};
  EXPECT_EQ(argmin_first(times), 1u);
  const std::vector<double> logits{0.1, 0.9, 0.2};
  EXPECT_EQ(argmax_first(logits), 1u);
  const std::vector<double> silent(3, kSilent);
  EXPECT_EQ(argmin_first(silent), 0u);
  const std::vector<double> tie{3.0, 1.0, 1.0};
  EXPECT_EQ(argmin_first(tie), 1u);
  const std::vector<double> tie_max{2.0, 2.0, 1.0};
  EXPECT_EQ(argmax_first(tie_max), 0u);
}

TEST(Classify, FromTrialOutput) {
  ad::Tape tape;
  TrialOutput out;
  out.first_spike_time = {12.0, 9.0, 30.0};
  out.z_int = tape.leaf(std::vector<double>{0.1, 0.9, 0.2});
  out.z_exp = tape.leaf(std::vector<double>{3.0, 0.9, 0.2});
  out.z_max = tape.leaf(std::vector<double>{0.0, 0.0, 1.0});
  EXPECT_EQ(classify(out, Readout::kTtfs), 1u);
  EXPECT_EQ(classify(out, Readout::kState, LogitKind::kIntegral), 1u);
  EXPECT_EQ(classify(out, Readout::kState, LogitKind::kExpIntegral), 0u);
  EXPECT_EQ(classify(out, Readout::kState, LogitKind::kMax), 2u);
  EXPECT_THROW(state_logits(TrialOutput{}, LogitKind::kMax), std::logic_error);
}

TEST(LogitKind, Parsing) {
  EXPECT_EQ(parse_logit_kind("max"), LogitKind::kMax);
  EXPECT_EQ(parse_logit_kind("integral"), LogitKind::kIntegral);
  EXPECT_EQ(parse_logit_kind("exp"), LogitKind::kExpIntegral);
  EXPECT_THROW(parse_logit_kind("mean"), std::invalid_argument);
}

TEST(XorWindowedLoss, EmptyWindowAndSymmetricOutputsGiveLog2) {
  ad::Tape tape;
  TrialOutput out;
  out.z_exp = tape.leaf(std::vector<double>{0.0, 0.0});
  EXPECT_NEAR(xor_windowed_loss(out, 1).value(), std::log(2.0), 1e-15);
  out.z_exp = tape.leaf(std::vector<double>{4.2, 4.2});
  EXPECT_NEAR(xor_windowed_loss(out, 0).value(), std::log(2.0), 1e-15);
  out.z_exp = tape.leaf(std::vector<double>{0.5, 3.0});
  EXPECT_LT(xor_windowed_loss(out, 1).value(), std::log(2.0));
}
