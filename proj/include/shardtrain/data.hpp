// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "shardtrain/model.hpp"
#include "shardtrain/ops.hpp"

namespace shardtrain {

/// Validates UTF-8, replaces markup tags with spaces, drops control
/// characters, collapses whitespace runs to one space, trims, and lowercases
/// ASCII letters. Throws IngestionError carrying the offset of the first
/// invalid byte.
std::string clean_text(std::string_view raw);

enum class VocabMode { kByte, kWord };

VocabMode parse_vocab_mode(std::string_view name);
std::string_view to_string(VocabMode mode);

/// Byte mode: ids 0..255 are raw bytes, then pad, unknown, end-of-text.
/// Word mode: regular tokens occupy the low ids, the three specials follow.
class Vocab {
 public:
  static Vocab byte_level();
  /// Whitespace words ranked by descending frequency, ties broken
  /// lexicographically, keeping at most `vocab_size - 3` regular tokens.
  static Vocab build_word(std::string_view cleaned_corpus, std::size_t vocab_size);
  static Vocab from_words(const std::vector<std::string>& words);

  VocabMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId pad_id() const noexcept { return pad_; }
  TokenId unknown_id() const noexcept { return unk_; }
  TokenId eot_id() const noexcept { return eot_; }
  bool is_special(TokenId id) const noexcept { return id == pad_ || id == unk_ || id == eot_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  /// Word-mode lookup; unknown words map to the unknown id.
  TokenId id_of(std::string_view word) const;

 private:
  void add_specials();

  VocabMode mode_ = VocabMode::kByte;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = 0, unk_ = 0, eot_ = 0;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);
/// Inverse of tokenize for byte mode; word mode joins words with spaces.
/// Special ids are skipped.
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

/// Flat token stream cut into non-overlapping sequences of `seq_len` tokens.
/// Sequence i feeds positions [0, seq_len-1) and predicts [1, seq_len).
class TokenDataset {
 public:
  TokenDataset(std::vector<TokenId> stream, std::size_t seq_len, std::size_t vocab_size);

  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t sequence_count() const noexcept { return stream_.size() / seq_len_; }
  std::span<const TokenId> sequence(std::size_t i) const;
  const std::vector<TokenId>& stream() const noexcept { return stream_; }

  /// Builds the next-token batch for the given sequence indices.
  TokenBatch batch(std::span<const std::size_t> indices) const;

 private:
  std::vector<TokenId> stream_;
  std::size_t seq_len_;
  std::size_t vocab_size_;
};

/// Seeded first-order Markov stream: most transitions follow a fixed
/// successor table, the rest are uniform.
std::vector<TokenId> synthetic_tokens(std::size_t count, std::size_t vocab_size, std::uint64_t seed);

/// Parses RFC 4180 CSV text into rows of fields.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Reads `.txt` files and `.csv` files with a `content` header column from a
/// directory (or a single file), in path order. Each document is cleaned.
std::vector<std::string> load_corpus_documents(const std::filesystem::path& path);

/// Tokenizes documents, appending end-of-text after each.
std::vector<TokenId> tokenize_documents(const std::vector<std::string>& documents, const Vocab& vocab);

struct BatchPlan {
  std::size_t global_batch = 8;
  int world_size = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t micro_batch() const { return global_batch / static_cast<std::size_t>(world_size); }
  std::size_t steps_per_epoch(std::size_t sequence_count) const { return sequence_count / global_batch; }
};

/// Seeded permutation of [0, n), the same on every rank for a given epoch.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// Global batches of sequence indices for one epoch; the remainder smaller
/// than a full batch is dropped.
std::vector<std::vector<std::size_t>> global_batches(const BatchPlan& plan, std::size_t sequence_count,
                                                     std::size_t epoch);

/// Rank `rank`'s micro-batches: positions rank, rank+W, ... of each global
/// batch.
std::vector<std::vector<std::size_t>> shard_batches(const BatchPlan& plan, std::size_t sequence_count,
                                                    std::size_t epoch, int rank);

}  // namespace shardtrain
