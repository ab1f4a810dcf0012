#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "egot2/nn.hpp"

namespace egot2 {

struct FitOptions {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

// Epoch-shuffled minibatch AdamW. `loss_of(tape, i)` builds sample i's loss on the tape;
// the batch loss is the mean over the batch. Returns the mean training loss per epoch.
template <class S, class LossFn>
std::vector<double> fit(const std::vector<Parameter<S>*>& params, std::size_t n, const FitOptions& o, LossFn&& loss_of) {
  AdamW<S> opt(params, {o.lr, o.weight_decay});
  std::vector<double> curve;
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(o.seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
    double total = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(o.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(o.batch_size));
      opt.zero_grad();
      ag::Tape<S> tape;
      std::vector<ag::Var<S>> losses;
      for (std::size_t b = start; b < end; ++b) losses.push_back(loss_of(tape, order[b]));
      ag::Var<S> loss = ag::scale(ag::sum(losses), S(1) / static_cast<S>(end - start));
      total += static_cast<double>(loss.value()(0, 0)) * static_cast<double>(end - start);
      tape.backward(loss);
      opt.step();
    }
    curve.push_back(n ? total / static_cast<double>(n) : 0.0);
  }
  return curve;
}

}  // namespace egot2
