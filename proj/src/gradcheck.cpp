// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "shardtrain/error.hpp"
#include "shardtrain/tape.hpp"

namespace shardtrain {

GradcheckResult gradcheck(const ScalarFunction& f, std::vector<Tensor> inputs, const GradcheckOptions& options) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor root = f(inputs);
    tape.backward(root);
  }

  std::mt19937_64 rng(options.seed);
  GradcheckResult result;
  for (Tensor& t : inputs) {
    std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> probe(t.numel());
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    if (probe.size() > options.max_elements_per_input) {
      std::shuffle(probe.begin(), probe.end(), rng);
      probe.resize(options.max_elements_per_input);
    }
    auto values = t.mutable_values();
    for (std::size_t idx : probe) {
      const double saved = values[idx];
      values[idx] = saved + options.step;
      const double plus = f(inputs).item();
      values[idx] = saved - options.step;
      const double minus = f(inputs).item();
      values[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double abs_err = std::abs(numeric - analytic[idx]);
      const double scale = std::max(std::abs(numeric), std::abs(analytic[idx]));
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (scale > options.abs_floor) {
        const double rel = abs_err / scale;
        result.max_rel_error = std::max(result.max_rel_error, rel);
        if (rel > options.rel_tolerance) result.passed = false;
      } else if (abs_err > options.abs_floor) {
        result.passed = false;
      }
      ++result.checked;
    }
  }
  for (Tensor& t : inputs) t.clear_grad();
  return result;
}

}  // namespace shardtrain
