// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <unordered_set>

#include "shardtrain/error.hpp"

namespace shardtrain {
namespace {

constexpr std::size_t kPerBlock = 12;
constexpr double kInitStd = 0.02;

enum BlockSlot : std::size_t {
  kLn1Gain,
  kLn1Bias,
  kAttnWeight,
  kAttnBias,
  kAttnProjWeight,
  kAttnProjBias,
  kLn2Gain,
  kLn2Bias,
  kFcWeight,
  kFcBias,
  kMlpProjWeight,
  kMlpProjBias,
};

std::size_t block_base(std::size_t layer) { return 2 + kPerBlock * layer; }
std::size_t head_base(const ModelConfig& c) { return 2 + kPerBlock * c.n_layers; }

class GaussianSource {
 public:
  explicit GaussianSource(std::uint64_t seed) : rng_(seed) {}

  // Box-Muller on 53-bit uniforms; stable across standard libraries.
  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

Tensor gaussian(GaussianSource& src, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = kInitStd * src.next();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor filled(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

ModelConfig ModelConfig::gpt2_small() {
  ModelConfig c;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_head = 64;
  c.d_ff = 3072;
  c.n_layers = 12;
  c.vocab_size = 50257;
  c.max_seq_len = 1024;
  return c;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_head == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ValidationError("model dimensions must be positive");
  }
  if (n_heads * d_head != d_model) {
    throw ValidationError("n_heads x d_head (" + std::to_string(n_heads) + " x " + std::to_string(d_head) +
                          ") must equal d_model " + std::to_string(d_model));
  }
  if (vocab_size < 2) throw ValidationError("vocab_size must be at least 2");
  if (n_layers < 1) throw ValidationError("n_layers must be at least 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout_rate must lie in [0, 1)");
}

void ParameterSet::add(std::string name, Tensor tensor) {
  for (const auto& p : params_) {
    if (p.name == name) throw ValidationError("duplicate parameter name '" + name + "'");
  }
  params_.push_back({std::move(name), std::move(tensor)});
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw ValidationError("unknown parameter '" + name + "'");
}

std::size_t ParameterSet::total_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

ParameterSet ParameterSet::deep_copy() const {
  ParameterSet out;
  for (const auto& p : params_) {
    auto v = p.tensor.values();
    out.add(p.name, Tensor::from(p.tensor.shape(), std::vector<double>(v.begin(), v.end()), p.tensor.requires_grad()));
  }
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParameterSet::attach_accumulators() {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.ensure_accumulator(i);
}

ParameterSet init_params(const ModelConfig& c) {
  c.validate();
  GaussianSource src(c.seed);
  const std::size_t d = c.d_model;
  ParameterSet ps;
  ps.add("wte", gaussian(src, {c.vocab_size, d}));
  ps.add("wpe", gaussian(src, {c.max_seq_len, d}));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    ps.add(p + "ln_1.gain", filled({d}, 1.0));
    ps.add(p + "ln_1.bias", filled({d}, 0.0));
    ps.add(p + "attn.c_attn.weight", gaussian(src, {d, 3 * d}));
    ps.add(p + "attn.c_attn.bias", filled({3 * d}, 0.0));
    ps.add(p + "attn.c_proj.weight", gaussian(src, {d, d}));
    ps.add(p + "attn.c_proj.bias", filled({d}, 0.0));
    ps.add(p + "ln_2.gain", filled({d}, 1.0));
    ps.add(p + "ln_2.bias", filled({d}, 0.0));
    ps.add(p + "mlp.c_fc.weight", gaussian(src, {d, c.d_ff}));
    ps.add(p + "mlp.c_fc.bias", filled({c.d_ff}, 0.0));
    ps.add(p + "mlp.c_proj.weight", gaussian(src, {c.d_ff, d}));
    ps.add(p + "mlp.c_proj.bias", filled({d}, 0.0));
  }
  ps.add("ln_f.gain", filled({d}, 1.0));
  ps.add("ln_f.bias", filled({d}, 0.0));
  ps.add("lm_head.weight", gaussian(src, {d, c.vocab_size}));
  return ps;
}

std::vector<std::vector<std::size_t>> unit_plan(const ModelConfig& c) {
  std::vector<std::vector<std::size_t>> units;
  units.push_back({0, 1});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::vector<std::size_t> members;
    for (std::size_t s = 0; s < kPerBlock; ++s) members.push_back(block_base(l) + s);
    units.push_back(std::move(members));
  }
  const std::size_t h = head_base(c);
  units.push_back({h, h + 1, h + 2});
  return units;
}

Tensor model_forward(const ModelConfig& c, const ParameterSet& ps, std::span<const TokenId> tokens,
                     std::size_t batch, std::size_t seq_len, const ForwardOptions& options) {
  // Extra trailing parameters are permitted and simply not used.
  if (ps.size() < head_base(c) + 3) {
    throw ValidationError("parameter set has " + std::to_string(ps.size()) + " tensors, model expects " +
                          std::to_string(head_base(c) + 3));
  }
  if (seq_len == 0 || batch == 0 || tokens.size() != batch * seq_len) {
    throw ValidationError("token count " + std::to_string(tokens.size()) + " does not match batch " +
                          std::to_string(batch) + " x seq_len " + std::to_string(seq_len));
  }
  if (seq_len > c.max_seq_len) {
    throw ValidationError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
  for (TokenId id : tokens) {
    if (id >= c.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " out of range for vocab_size " +
                            std::to_string(c.vocab_size));
    }
  }

  UnitObserver* obs = options.observer;
  std::uint64_t dropout_site = 0;
  auto drop = [&](const Tensor& x) {
    return dropout(x, c.dropout_rate, options.dropout_seed * 0x9e3779b97f4a7c15ULL + ++dropout_site);
  };
  auto p = [&](std::size_t i) -> const Tensor& { return ps[i].tensor; };

  std::size_t unit = 0;
  if (obs) obs->before_unit(unit);
  std::vector<TokenId> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % seq_len);
  Tensor x = drop(add(embedding(p(0), tokens), embedding(p(1), positions)));
  if (obs) x = obs->after_unit(unit, x);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    ++unit;
    if (obs) obs->before_unit(unit);
    const std::size_t b = block_base(l);
    Tensor h = layer_norm(x, p(b + kLn1Gain), p(b + kLn1Bias));
    Tensor qkv = add_bias(matmul(h, p(b + kAttnWeight)), p(b + kAttnBias));
    Tensor attn = multi_head_causal_attention(qkv, batch, seq_len, c.n_heads);
    attn = add_bias(matmul(attn, p(b + kAttnProjWeight)), p(b + kAttnProjBias));
    x = add(x, drop(attn));
    h = layer_norm(x, p(b + kLn2Gain), p(b + kLn2Bias));
    Tensor f = gelu(add_bias(matmul(h, p(b + kFcWeight)), p(b + kFcBias)));
    f = add_bias(matmul(f, p(b + kMlpProjWeight)), p(b + kMlpProjBias));
    x = add(x, drop(f));
    if (obs) x = obs->after_unit(unit, x);
  }

  ++unit;
  if (obs) obs->before_unit(unit);
  const std::size_t hb = head_base(c);
  Tensor logits = matmul(layer_norm(x, p(hb), p(hb + 1)), p(hb + 2));
  if (obs) logits = obs->after_unit(unit, logits);
  return logits;
}

Tensor model_forward(const ModelConfig& config, const ParameterSet& params, std::span<const TokenId> tokens) {
  return model_forward(config, params, tokens, 1, tokens.size());
}

LossResult model_loss(const ModelConfig& config, const ParameterSet& params, const TokenBatch& batch,
                      const ForwardOptions& options) {
  if (batch.targets.size() != batch.inputs.size()) {
    throw ValidationError("batch has " + std::to_string(batch.inputs.size()) + " inputs but " +
                          std::to_string(batch.targets.size()) + " targets");
  }
  LossResult r;
  r.logits = model_forward(config, params, batch.inputs, batch.batch, batch.seq_len, options);
  CrossEntropy ce = cross_entropy_next_token(r.logits, batch.targets);
  r.total_loss = ce.total_loss.item();
  r.token_count = ce.token_count;
  r.mean_loss = scale(ce.total_loss, 1.0 / static_cast<double>(ce.token_count));
  return r;
}

std::set<std::size_t> count_unused_parameters(const Tape& tape, const Tensor& root, const ParameterSet& params) {
  std::set<std::size_t> unused;
  auto root_index = tape.index_of(root);
  std::vector<bool> reach;
  if (root_index) reach = tape.reaches(*root_index);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto idx = tape.index_of(params[i].tensor);
    if (!idx || !root_index || *idx >= reach.size() || !reach[*idx]) unused.insert(i);
  }
  return unused;
}

std::set<std::size_t> count_unused_parameters(const Tape& tape, const ParameterSet& params) {
  if (tape.size() == 0) {
    std::set<std::size_t> all;
    for (std::size_t i = 0; i < params.size(); ++i) all.insert(i);
    return all;
  }
  return count_unused_parameters(tape, tape.node(tape.size() - 1).output, params);
}

}  // namespace shardtrain
