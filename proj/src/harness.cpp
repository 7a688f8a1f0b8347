// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "shardtrain/checkpoint.hpp"
#include "shardtrain/collectives.hpp"
#include "shardtrain/error.hpp"
#include "shardtrain/work_counter.hpp"

namespace shardtrain {

TimingMode parse_timing_mode(std::string_view name) {
  if (name == "wall") return TimingMode::kWall;
  if (name == "simulated") return TimingMode::kSimulated;
  throw ValidationError("unknown timing mode '" + std::string(name) + "' (expected wall or simulated)");
}

std::string_view to_string(TimingMode mode) { return mode == TimingMode::kWall ? "wall" : "simulated"; }

void RunConfig::validate() {
  if (!strategy_registered(strategy)) throw ValidationError("unknown strategy '" + strategy + "'");
  if (strategy == "single") world = 1;
  if (world < 1 || world > 64) throw ValidationError("world size must lie in [1, 64]");
  if (batch == 0 || batch % static_cast<std::size_t>(world) != 0) {
    throw ValidationError("global batch " + std::to_string(batch) + " must be a positive multiple of world size " +
                          std::to_string(world));
  }
  if (epochs == 0) throw ValidationError("epochs must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be positive and finite");
  if (accum == 0) throw ValidationError("accumulation factor must be at least 1");
  if (strategy == "ddp" && accum != 1) throw ValidationError("the ddp strategy does not support gradient accumulation");
  if (bucket_cap == 0) throw ValidationError("bucket cap must be positive");
  if (seq_len < 2) throw ValidationError("sequence length must be at least 2");
  model.validate();
  if (seq_len - 1 > model.max_seq_len) {
    throw ValidationError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len + 1 (" +
                          std::to_string(model.max_seq_len + 1) + ")");
  }
  if (corpus.empty() && synthetic_tokens < seq_len * batch * accum) {
    throw ValidationError("synthetic corpus of " + std::to_string(synthetic_tokens) +
                          " tokens is too small for one optimizer step");
  }
}

namespace {

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ValidationError("invalid value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("invalid boolean '" + std::string(value) + "' for " + std::string(key));
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void sync_head_dim(ModelConfig& m) {
  if (m.n_heads > 0 && m.d_model % m.n_heads == 0) m.d_head = m.d_model / m.n_heads;
}

}  // namespace

std::vector<std::string> setting_keys() {
  return {"strategy",   "world",     "epochs",     "batch",    "seq-len",     "lr",          "optimizer",
          "bucket-cap", "accum",     "seed",       "corpus",   "synthetic-tokens", "out",   "max-steps",
          "timing",     "vocab-mode", "d-model",   "n-heads",  "n-layers",    "d-ff",        "vocab-size",
          "max-seq-len", "dropout",  "count-activations", "time-data-loading"};
}

void apply_setting(RunConfig& c, std::string_view key, std::string_view value) {
  using std::size_t;
  if (key == "strategy") {
    c.strategy = std::string(value);
  } else if (key == "world") {
    c.world = parse_number<int>(key, value);
  } else if (key == "epochs") {
    c.epochs = parse_number<size_t>(key, value);
  } else if (key == "batch") {
    c.batch = parse_number<size_t>(key, value);
  } else if (key == "seq-len") {
    c.seq_len = parse_number<size_t>(key, value);
  } else if (key == "lr") {
    c.lr = parse_number<double>(key, value);
  } else if (key == "optimizer") {
    c.optimizer = parse_optimizer_kind(value);
  } else if (key == "bucket-cap") {
    c.bucket_cap = parse_number<size_t>(key, value);
  } else if (key == "accum") {
    c.accum = parse_number<size_t>(key, value);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "corpus") {
    c.corpus = std::string(value);
  } else if (key == "synthetic-tokens") {
    c.synthetic_tokens = parse_number<size_t>(key, value);
  } else if (key == "out") {
    c.out = std::string(value);
  } else if (key == "max-steps") {
    c.max_steps = parse_number<size_t>(key, value);
  } else if (key == "timing") {
    c.timing = parse_timing_mode(value);
  } else if (key == "vocab-mode") {
    c.vocab_mode = parse_vocab_mode(value);
  } else if (key == "d-model") {
    c.model.d_model = parse_number<size_t>(key, value);
    sync_head_dim(c.model);
  } else if (key == "n-heads") {
    c.model.n_heads = parse_number<size_t>(key, value);
    sync_head_dim(c.model);
  } else if (key == "n-layers") {
    c.model.n_layers = parse_number<size_t>(key, value);
  } else if (key == "d-ff") {
    c.model.d_ff = parse_number<size_t>(key, value);
  } else if (key == "vocab-size") {
    c.model.vocab_size = parse_number<size_t>(key, value);
  } else if (key == "max-seq-len") {
    c.model.max_seq_len = parse_number<size_t>(key, value);
  } else if (key == "dropout") {
    c.model.dropout_rate = parse_number<double>(key, value);
  } else if (key == "count-activations") {
    c.count_activations = parse_bool(key, value);
  } else if (key == "time-data-loading") {
    c.time_data_loading = parse_bool(key, value);
  } else {
    throw ValidationError("unknown setting '" + std::string(key) + "'");
  }
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + " is not key=value");
    }
    apply_setting(c, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text(path)); }

std::vector<RunConfig> load_manifest(const std::filesystem::path& path) {
  std::vector<RunConfig> configs;
  std::istringstream in{read_text(path)};
  for (std::string line; std::getline(in, line);) {
    std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    std::filesystem::path p{std::string(s)};
    if (p.is_relative()) p = path.parent_path() / p;
    configs.push_back(load_run_config(p));
  }
  if (configs.empty()) throw ValidationError("manifest " + path.string() + " lists no configs");
  return configs;
}

TokenDataset build_dataset(RunConfig& config) {
  if (config.corpus.empty()) {
    return TokenDataset(synthetic_tokens(config.synthetic_tokens, config.model.vocab_size, config.seed),
                        config.seq_len, config.model.vocab_size);
  }
  const auto docs = load_corpus_documents(config.corpus);
  Vocab vocab = Vocab::byte_level();
  if (config.vocab_mode == VocabMode::kWord) {
    std::string all;
    for (const auto& d : docs) {
      all += d;
      all.push_back(' ');
    }
    vocab = Vocab::build_word(all, config.model.vocab_size);
  }
  config.model.vocab_size = vocab.size();
  return TokenDataset(tokenize_documents(docs, vocab), config.seq_len, vocab.size());
}

namespace {

// Runs `body(rank)` on one thread per rank. The first failure aborts the
// group; the root cause is rethrown with its rank.
template <typename Body>
void run_on_workers(WorkerGroup& group, Body body) {
  const int w = group.world_size();
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(w));
  for (int r = 0; r < w; ++r) {
    threads.emplace_back([&, r] {
      try {
        body(r);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
        group.abort("rank " + std::to_string(r) + ": " + e.what());
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
        group.abort("rank " + std::to_string(r) + ": unknown failure");
      }
    });
  }
  for (auto& t : threads) t.join();

  int chosen = -1;
  for (int r = 0; r < w && chosen < 0; ++r) {
    if (!errors[static_cast<std::size_t>(r)]) continue;
    try {
      std::rethrow_exception(errors[static_cast<std::size_t>(r)]);
    } catch (const AbortedError&) {
    } catch (...) {
      chosen = r;
    }
  }
  for (int r = 0; r < w && chosen < 0; ++r) {
    if (errors[static_cast<std::size_t>(r)]) chosen = r;
  }
  if (chosen < 0) return;
  try {
    std::rethrow_exception(errors[static_cast<std::size_t>(chosen)]);
  } catch (const std::exception& e) {
    throw WorkerFailure(chosen, e.what());
  } catch (...) {
    throw WorkerFailure(chosen, "unknown failure");
  }
}

struct RankEpoch {
  RankMetrics metrics;
  std::size_t peak = 0;
  double seconds = 0.0;
  MicroBatchStats first;
};

}  // namespace

RunResult run_experiment(RunConfig config, const RunHooks& hooks) {
  config.validate();
  TokenDataset data = build_dataset(config);
  config.model.seed = config.seed;
  config.model.validate();

  const BatchPlan plan{config.batch, config.world, config.seed};
  const std::size_t batches = plan.steps_per_epoch(data.sequence_count());
  std::size_t steps = batches / config.accum;
  if (config.max_steps > 0) steps = std::min(steps, config.max_steps);
  if (steps == 0) {
    throw ValidationError("dataset of " + std::to_string(data.sequence_count()) +
                          " sequences yields no optimizer step for batch " + std::to_string(config.batch) +
                          " and accumulation " + std::to_string(config.accum));
  }

  RunResult result;
  const auto w = static_cast<std::size_t>(config.world);
  const ParameterSet initial = init_params(config.model);

  std::ofstream csv_file;
  if (!config.out.empty()) {
    std::filesystem::create_directories(config.out);
    result.csv_path = config.out / kMetricsFile;
    csv_file.open(result.csv_path, std::ios::trunc);
    if (!csv_file) throw ValidationError("cannot write " + result.csv_path.string());
  }
  auto emit = [&](const std::string& line) {
    result.csv += line;
    result.csv.push_back('\n');
    if (csv_file.is_open()) {
      csv_file << line << '\n';
      csv_file.flush();
    }
  };
  emit(std::string(kMetricsCsvHeader));

  WorkerGroup group(config.world);
  std::vector<MemoryLedger> ledgers(w, MemoryLedger(config.count_activations));
  std::vector<std::unique_ptr<TrainingStrategy>> strategies(w);
  std::vector<ParameterSet> copies;
  for (std::size_t r = 0; r < w; ++r) copies.push_back(initial.deep_copy());

  OptimizerConfig opt;
  opt.kind = config.optimizer;
  run_on_workers(group, [&](int r) {
    const auto ri = static_cast<std::size_t>(r);
    StrategyContext ctx{config.model, std::move(copies[ri]), group.communicator(r), opt, config.bucket_cap,
                        config.accum, &ledgers[ri]};
    strategies[ri] = make_strategy(config.strategy, std::move(ctx));
  });

  const SimulatedDevice device;
  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<RankEpoch> ranks(w);
    const std::size_t step_base = global_step;
    run_on_workers(group, [&](int r) {
      const auto ri = static_cast<std::size_t>(r);
      const auto load_start = std::chrono::steady_clock::now();
      auto shards = shard_batches(plan, data.sequence_count(), epoch, r);
      std::vector<TokenBatch> micro;
      for (std::size_t i = 0; i < steps * config.accum; ++i) micro.push_back(data.batch(shards[i]));

      TrainingStrategy& strategy = *strategies[ri];
      MemoryLedger& ledger = ledgers[ri];
      RankEpoch& out = ranks[ri];
      ledger.reset_peak();
      const WorkCounts before = thread_work_counts();
      const auto t0 = config.time_data_loading ? load_start : std::chrono::steady_clock::now();
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t m = 0; m < config.accum; ++m) {
          MicroBatchStats stats = strategy.forward_backward(micro[s * config.accum + m]);
          if (s == 0 && m == 0) out.first = stats;
        }
        if (!strategy.step(config.lr)) throw InvariantError("optimizer step skipped at an accumulation boundary");
        if (hooks.after_step) {
          StepEvent ev{r, epoch, step_base + s + 1, strategy};
          hooks.after_step(ev);
        }
      }
      const auto t1 = std::chrono::steady_clock::now();
      out.seconds = config.timing == TimingMode::kWall ? std::chrono::duration<double>(t1 - t0).count()
                                                       : device.seconds(thread_work_counts() - before);
      out.metrics = strategy.collect_metrics();
      out.peak = ledger.peak();
    });
    global_step += steps;

    double total_loss = 0.0;
    std::size_t tokens = 0;
    double seconds = 0.0;
    std::vector<std::size_t> peaks;
    for (const auto& re : ranks) {
      total_loss += re.metrics.total_loss;
      tokens += re.metrics.tokens;
      seconds = std::max(seconds, re.seconds);
      peaks.push_back(re.peak);
    }
    if (epoch == 1) {
      double first_loss = 0.0;
      std::size_t first_tokens = 0;
      for (const auto& re : ranks) {
        first_loss += re.first.loss_sum;
        first_tokens += re.first.tokens;
      }
      result.initial_loss = per_token_loss(first_loss, first_tokens);
    }
    result.records.push_back(make_epoch_record(config.strategy, epoch, total_loss, tokens,
                                               ranks[0].metrics.step_grad_norms, std::move(peaks), seconds));
    emit(to_csv_row(result.records.back()));
  }

  std::vector<ParameterSet> finals(w);
  run_on_workers(group, [&](int r) { finals[static_cast<std::size_t>(r)] = strategies[static_cast<std::size_t>(r)]->full_parameters(); });
  result.final_parameters = std::move(finals[0]);
  result.checkpoint_bytes = serialize_checkpoint(result.final_parameters);

  for (const auto& ledger : ledgers) {
    result.rank_final_transient_bytes.push_back(ledger.transient_live());
    if (ledger.transient_live() != 0) {
      throw AccountingError("transient memory still live at end of run: " + std::to_string(ledger.transient_live()));
    }
  }

  result.summary = summarize(result.records);
  result.config = config;
  if (!config.out.empty()) {
    result.checkpoint_path = config.out / kCheckpointFile;
    save_checkpoint(result.final_parameters, result.checkpoint_path);
    std::ofstream summary(config.out / kSummaryFile, std::ios::trunc);
    summary << format_summary(result);
  }
  return result;
}

namespace {

std::string fixed(double v, int precision) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(precision) << v;
  return ss.str();
}

struct MetricRow {
  std::string label;
  std::string unit;
  double (*get)(const RunSummary&);
  int precision;
};

const std::vector<MetricRow>& metric_rows() {
  static const std::vector<MetricRow> rows = {
      {"Avg. Loss", "", [](const RunSummary& s) { return s.avg_loss; }, 4},
      {"Avg. Gradient Norm", "", [](const RunSummary& s) { return s.avg_grad_norm; }, 4},
      {"Total Training Time", "s", [](const RunSummary& s) { return s.total_training_time_s; }, 3},
      {"Avg. Memory Usage", "bytes", [](const RunSummary& s) { return s.avg_memory_bytes; }, 0},
      {"Avg. Throughput", "tokens/s", [](const RunSummary& s) { return s.avg_throughput; }, 1},
  };
  return rows;
}

}  // namespace

std::string format_summary(const RunResult& result) {
  std::ostringstream out;
  out << "strategy " << result.config.strategy << ", world " << result.config.world << ", "
      << result.records.size() << " epochs\n";
  for (const auto& row : metric_rows()) {
    out << std::left << std::setw(22) << row.label << std::right << std::setw(18)
        << fixed(row.get(result.summary), row.precision);
    if (!row.unit.empty()) out << ' ' << row.unit;
    out << '\n';
  }
  return out.str();
}

void check_comparable(const std::vector<RunConfig>& configs) {
  if (configs.empty()) throw ValidationError("nothing to compare");
  const RunConfig& a = configs.front();
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const RunConfig& b = configs[i];
    std::string what;
    ModelConfig ma = a.model, mb = b.model;
    ma.seed = mb.seed = 0;
    if (!(ma == mb)) what = "model";
    else if (a.seed != b.seed) what = "seed";
    else if (a.seq_len != b.seq_len || a.batch != b.batch) what = "batch shape";
    else if (a.corpus != b.corpus || a.vocab_mode != b.vocab_mode || a.synthetic_tokens != b.synthetic_tokens)
      what = "data";
    if (!what.empty()) {
      throw ValidationError("comparison refused: run " + std::to_string(i + 1) + " differs from run 1 in " + what);
    }
  }
}

Comparison compare_results(const std::vector<RunResult>& results) {
  Comparison c;
  std::optional<std::size_t> ddp_peak, fsdp_peak;
  for (const auto& r : results) {
    c.strategies.push_back(r.config.strategy);
    c.summaries.push_back(r.summary);
    c.loss_decreased.push_back(r.records.size() >= 2 && r.records.back().loss < r.records.front().loss);
    if (r.config.strategy == "ddp") ddp_peak = r.summary.max_peak_mem_bytes;
    if (r.config.strategy == "fsdp") fsdp_peak = r.summary.max_peak_mem_bytes;
  }
  if (ddp_peak && fsdp_peak) c.fsdp_memory_below_ddp = *fsdp_peak < *ddp_peak;

  std::ostringstream table, csv;
  table << std::left << std::setw(22) << "Metric";
  csv << "metric";
  for (const auto& s : c.strategies) {
    table << std::right << std::setw(18) << s;
    csv << ',' << s;
  }
  table << '\n';
  csv << '\n';
  for (const auto& row : metric_rows()) {
    std::string label = row.label + (row.unit.empty() ? "" : " (" + row.unit + ")");
    table << std::left << std::setw(22) << row.label;
    csv << label;
    for (const auto& s : c.summaries) {
      table << std::right << std::setw(18) << fixed(row.get(s), row.precision);
      csv << ',' << format_double(row.get(s));
    }
    table << '\n';
    csv << '\n';
  }
  table << '\n';
  for (std::size_t i = 0; i < c.strategies.size(); ++i) {
    table << "loss decreased (" << c.strategies[i] << "): " << (c.loss_decreased[i] ? "yes" : "no") << '\n';
  }
  if (c.fsdp_memory_below_ddp) {
    table << "fsdp peak memory below ddp: " << (*c.fsdp_memory_below_ddp ? "yes" : "no") << '\n';
  }
  c.table = table.str();
  c.csv = csv.str();
  return c;
}

Comparison compare_strategies(const std::vector<RunConfig>& configs) {
  check_comparable(configs);
  std::vector<RunResult> results;
  for (const auto& c : configs) results.push_back(run_experiment(c));
  return compare_results(results);
}

}  // namespace shardtrain
