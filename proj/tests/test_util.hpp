// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <thread>
#include <vector>

#include "shardtrain/collectives.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/tensor.hpp"

namespace shardtrain::testing {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true) {
  auto v = random_values(shape_numel(shape), seed);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Runs fn(rank, comm) on one thread per rank and rethrows the first failure.
inline void run_ranks(WorkerGroup& group, const std::function<void(int, Communicator&)>& fn) {
  const int w = group.world_size();
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  std::vector<std::thread> threads;
  for (int r = 0; r < w; ++r) {
    threads.emplace_back([&, r] {
      Communicator c = group.communicator(r);
      try {
        fn(r, c);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
        group.abort("test rank failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline ModelConfig tiny_model(std::size_t layers = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_ff = 32;
  c.n_layers = layers;
  c.vocab_size = 29;
  c.max_seq_len = 8;
  c.seed = 11;
  return c;
}

inline TokenBatch make_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> id(0, static_cast<std::uint32_t>(vocab - 1));
  TokenBatch b;
  b.batch = batch;
  b.seq_len = seq_len;
  for (std::size_t i = 0; i < batch * seq_len; ++i) {
    b.inputs.push_back(id(rng));
    b.targets.push_back(id(rng));
  }
  return b;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace shardtrain::testing
