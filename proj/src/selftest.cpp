// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/selftest.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <thread>

#include "shardtrain/collectives.hpp"
#include "shardtrain/gradcheck.hpp"
#include "shardtrain/harness.hpp"
#include "shardtrain/metrics.hpp"
#include "shardtrain/ops.hpp"

namespace shardtrain {

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Weighted sum against fixed random weights, so each output element gets a
// distinct upstream gradient.
Tensor probe(const Tensor& t, std::uint64_t seed) {
  Tensor w = random_tensor(t.shape(), seed);
  w.set_requires_grad(false);
  return sum(mul(t, w));
}

CheckResult check(const std::string& name, const ScalarFunction& f, std::vector<Tensor> inputs) {
  GradcheckResult r = gradcheck(f, std::move(inputs));
  return {name, r.passed, "max relative error " + format_double(r.max_rel_error)};
}

}  // namespace

std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  out.push_back(check("matmul", [](auto in) { return probe(matmul(in[0], in[1]), 1); },
                      {random_tensor({3, 4}, 2), random_tensor({4, 5}, 3)}));
  out.push_back(check("add", [](auto in) { return probe(add(in[0], in[1]), 4); },
                      {random_tensor({2, 3}, 5), random_tensor({2, 3}, 6)}));
  out.push_back(check("add_bias", [](auto in) { return probe(add_bias(in[0], in[1]), 7); },
                      {random_tensor({3, 4}, 8), random_tensor({4}, 9)}));
  out.push_back(check("mul", [](auto in) { return probe(mul(in[0], in[1]), 10); },
                      {random_tensor({2, 3}, 11), random_tensor({2, 3}, 12)}));
  out.push_back(check("scale", [](auto in) { return probe(scale(in[0], -0.7), 13); }, {random_tensor({5}, 14)}));
  out.push_back(check("softmax_rows", [](auto in) { return probe(softmax_rows(in[0]), 15); },
                      {random_tensor({3, 5}, 16)}));
  out.push_back(check("layer_norm", [](auto in) { return probe(layer_norm(in[0], in[1], in[2]), 17); },
                      {random_tensor({3, 6}, 18), random_tensor({6}, 19), random_tensor({6}, 20)}));
  out.push_back(check("gelu", [](auto in) { return probe(gelu(in[0]), 21); }, {random_tensor({4, 3}, 22, -3, 3)}));
  const std::vector<TokenId> ids = {2, 0, 2, 1};
  out.push_back(check("embedding", [ids](auto in) { return probe(embedding(in[0], ids), 23); },
                      {random_tensor({3, 4}, 24)}));
  out.push_back(check("dropout", [](auto in) { return probe(dropout(in[0], 0.3, 99), 25); },
                      {random_tensor({4, 4}, 26)}));
  const std::vector<TokenId> targets = {1, 4, 0};
  out.push_back(check("cross_entropy", [targets](auto in) { return cross_entropy_next_token(in[0], targets).total_loss; },
                      {random_tensor({3, 5}, 27)}));
  out.push_back(check("causal_attention",
                      [](auto in) { return probe(causal_attention({in[0], in[1], in[2]}), 28); },
                      {random_tensor({4, 3}, 29), random_tensor({4, 3}, 30), random_tensor({4, 3}, 31)}));
  out.push_back(check("multi_head_causal_attention",
                      [](auto in) { return probe(multi_head_causal_attention(in[0], 2, 3, 2), 32); },
                      {random_tensor({6, 12}, 33)}));
  out.push_back(check("with_backward_hook", [](auto in) { return probe(with_backward_hook(in[0], [] {}), 34); },
                      {random_tensor({3}, 35)}));

  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.d_ff = 16;
  cfg.n_layers = 1;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 6;
  cfg.seed = 5;
  ParameterSet params = init_params(cfg);
  std::vector<Tensor> inputs;
  for (auto& p : params) inputs.push_back(p.tensor);
  const std::vector<std::string> names = params.names();
  TokenBatch batch;
  batch.batch = 2;
  batch.seq_len = 4;
  batch.inputs = {1, 3, 5, 7, 2, 4, 6, 8};
  batch.targets = {3, 5, 7, 9, 4, 6, 8, 10};
  out.push_back(check(
      "model_loss",
      [cfg, names, batch](std::span<const Tensor> in) {
        ParameterSet ps;
        for (std::size_t i = 0; i < in.size(); ++i) ps.add(names[i], in[i]);
        return model_loss(cfg, ps, batch).mean_loss;
      },
      inputs));
  return out;
}

std::vector<CheckResult> collective_checks() {
  std::vector<CheckResult> out;
  for (int w : {1, 2, 4}) {
    const std::size_t len = 8 * static_cast<std::size_t>(w);
    std::vector<std::vector<double>> inputs(static_cast<std::size_t>(w));
    std::mt19937_64 rng(static_cast<std::uint64_t>(w));
    std::normal_distribution<double> g;
    for (auto& v : inputs) {
      v.resize(len);
      for (double& x : v) x = g(rng);
    }
    std::vector<double> serial(len, 0.0);
    for (const auto& v : inputs) {
      for (std::size_t i = 0; i < len; ++i) serial[i] += v[i];
    }
    std::vector<std::vector<double>> reduced(inputs), composed(static_cast<std::size_t>(w));
    WorkerGroup group(w);
    std::vector<std::thread> threads;
    for (int r = 0; r < w; ++r) {
      threads.emplace_back([&, r] {
        Communicator c = group.communicator(r);
        c.all_reduce_sum(reduced[static_cast<std::size_t>(r)]);
        composed[static_cast<std::size_t>(r)] = c.all_gather(c.reduce_scatter(inputs[static_cast<std::size_t>(r)]));
      });
    }
    for (auto& t : threads) t.join();
    bool ok = true;
    for (int r = 0; r < w; ++r) {
      ok = ok && reduced[static_cast<std::size_t>(r)] == serial && composed[static_cast<std::size_t>(r)] == serial;
    }
    out.push_back({"collectives world " + std::to_string(w), ok, ok ? "bit-exact" : "mismatch against serial sum"});
  }
  return out;
}

double max_abs_difference(const ParameterSet& a, const ParameterSet& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) {
      return std::numeric_limits<double>::infinity();
    }
    auto x = a[i].tensor.values();
    auto y = b[i].tensor.values();
    for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(x[k] - y[k]));
  }
  return worst;
}

std::vector<CheckResult> equivalence_checks() {
  RunConfig base;
  base.model.d_model = 16;
  base.model.n_heads = 2;
  base.model.d_head = 8;
  base.model.d_ff = 32;
  base.model.n_layers = 2;
  base.model.vocab_size = 32;
  base.model.max_seq_len = 8;
  base.seq_len = 9;
  base.batch = 4;
  base.epochs = 1;
  base.max_steps = 3;
  base.synthetic_tokens = 2000;
  base.seed = 3;
  base.timing = TimingMode::kSimulated;

  RunConfig single = base;
  single.strategy = "single";
  const ParameterSet reference = run_experiment(single).final_parameters;

  std::vector<CheckResult> out;
  for (const char* name : {"ddp", "fsdp"}) {
    RunConfig c = base;
    c.strategy = name;
    c.world = 2;
    const double diff = max_abs_difference(reference, run_experiment(c).final_parameters);
    out.push_back({std::string(name) + " matches single worker", diff <= 1e-9, "max abs difference " + format_double(diff)});
  }
  return out;
}

bool run_selftest(std::ostream& out) {
  bool all = true;
  auto report = [&](const std::vector<CheckResult>& results) {
    for (const auto& r : results) {
      out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
      all = all && r.passed;
    }
  };
  report(gradient_checks());
  report(collective_checks());
  report(equivalence_checks());
  out << (all ? "selftest passed\n" : "selftest FAILED\n");
  return all;
}

}  // namespace shardtrain
