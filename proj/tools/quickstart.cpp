// Minimal end-to-end example: a 5-20-3 AMOS LIF network trained with the
// time-to-first-spike loss on a small Yin-Yang subset.

#include <cstdio>
#include <vector>

#include "evnn/trainer.hpp"

int main() {
  using namespace evnn;
  const Dataset train = generate_yinyang(512, 42);
  const Dataset test = generate_yinyang(256, 40);

  ModelPtr neuron = wrap_amos(make_lif());
  FFEvNN net(5, {{neuron, 20, 14.0, 28.0}, {neuron, 3, 14.0, 28.0}}, {.step = 0.1, .max_time = 30.0});
  ParamSet params = net.init_params(0);

  TrainConfig cfg;  // only readout, loss constants and max_time are read here
  cfg.loss = "ttfs";
  cfg.max_time = 30.0;
  const TrialSetup setup{&net, &cfg, nullptr};

  OptimizerState state = make_optimizer_state(params, 1e-4);
  AdamWOptions adam;
  adam.lr = 0.005;

  for (std::size_t epoch = 1; epoch <= 5; ++epoch) {
    const auto order = epoch_order(train.size(), 0, epoch);
    double loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += 32) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + 32); ++i) batch.push_back(&train.samples[order[i]]);
      BatchResult r = run_batch(setup, params, batch, true, 1);
      loss += r.loss * static_cast<double>(batch.size());
      clip_global_norm(r.grad, 1.0);
      adamw_step(params, r.grad, state, adam);
    }
    const EvalResult e = evaluate(net, cfg, params, test);
    std::printf("epoch %zu  train loss %.4f  test accuracy %.3f  max firing %.2f\n", epoch,
                loss / static_cast<double>(train.size()), e.accuracy, e.spikes.max_firing);
  }
}
