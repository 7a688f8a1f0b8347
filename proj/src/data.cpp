// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "shardtrain/error.hpp"

namespace shardtrain {

namespace {

// Length of the UTF-8 sequence starting at s[i], or 0 if invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return 1;
  std::size_t len = 0;
  std::uint32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string clean_text(std::string_view raw) {
  for (std::size_t i = 0; i < raw.size();) {
    const std::size_t len = utf8_sequence_length(raw, i);
    if (len == 0) throw IngestionError("invalid UTF-8 at byte " + std::to_string(i), i);
    i += len;
  }

  std::string stripped;
  stripped.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == '<') {
      const std::size_t close = raw.find('>', i + 1);
      if (close != std::string_view::npos) {
        stripped.push_back(' ');
        i = close;
        continue;
      }
    }
    stripped.push_back(raw[i]);
  }

  std::string out;
  out.reserve(stripped.size());
  bool pending_space = false;
  for (char c : stripped) {
    const auto u = static_cast<unsigned char>(c);
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (u < 0x20 || u == 0x7F) continue;
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
  }
  return out;
}

VocabMode parse_vocab_mode(std::string_view name) {
  if (name == "byte") return VocabMode::kByte;
  if (name == "word") return VocabMode::kWord;
  throw ValidationError("unknown vocabulary mode '" + std::string(name) + "' (expected byte or word)");
}

std::string_view to_string(VocabMode mode) { return mode == VocabMode::kByte ? "byte" : "word"; }

void Vocab::add_specials() {
  auto add = [&](const char* name) {
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.emplace_back(name);
    return id;
  };
  pad_ = add("<|pad|>");
  unk_ = add("<|unk|>");
  eot_ = add("<|endoftext|>");
}

Vocab Vocab::byte_level() {
  Vocab v;
  v.mode_ = VocabMode::kByte;
  for (int b = 0; b < 256; ++b) v.tokens_.emplace_back(1, static_cast<char>(b));
  v.add_specials();
  return v;
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
  Vocab v;
  v.mode_ = VocabMode::kWord;
  for (const auto& w : words) {
    if (w.empty()) throw ValidationError("vocabulary words must be non-empty");
    if (!v.index_.emplace(w, static_cast<TokenId>(v.tokens_.size())).second) {
      throw ValidationError("duplicate vocabulary word '" + w + "'");
    }
    v.tokens_.push_back(w);
  }
  v.add_specials();
  return v;
}

Vocab Vocab::build_word(std::string_view cleaned_corpus, std::size_t vocab_size) {
  if (vocab_size < 4) throw ValidationError("word vocabulary needs room for the three special tokens");
  std::map<std::string, std::size_t> counts;
  std::istringstream in{std::string(cleaned_corpus)};
  for (std::string w; in >> w;) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), vocab_size - 3);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < keep; ++i) words.push_back(ranked[i].first);
  return from_words(words);
}

TokenId Vocab::id_of(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? unk_ : it->second;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  if (vocab.mode() == VocabMode::kByte) {
    for (char c : text) ids.push_back(static_cast<unsigned char>(c));
    return ids;
  }
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) ids.push_back(vocab.id_of(w));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id >= vocab.size()) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
    if (vocab.is_special(id)) continue;
    if (vocab.mode() == VocabMode::kWord && !out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

TokenDataset::TokenDataset(std::vector<TokenId> stream, std::size_t seq_len, std::size_t vocab_size)
    : stream_(std::move(stream)), seq_len_(seq_len), vocab_size_(vocab_size) {
  if (seq_len_ < 2) throw ValidationError("sequence length must be at least 2");
  for (std::size_t i = 0; i < stream_.size(); ++i) {
    if (stream_[i] >= vocab_size_) {
      throw ValidationError("token " + std::to_string(stream_[i]) + " at position " + std::to_string(i) +
                            " is outside vocabulary of " + std::to_string(vocab_size_));
    }
  }
}

std::span<const TokenId> TokenDataset::sequence(std::size_t i) const {
  if (i >= sequence_count()) throw ValidationError("sequence index " + std::to_string(i) + " out of range");
  return std::span<const TokenId>(stream_).subspan(i * seq_len_, seq_len_);
}

TokenBatch TokenDataset::batch(std::span<const std::size_t> indices) const {
  TokenBatch b;
  b.batch = indices.size();
  b.seq_len = seq_len_ - 1;
  b.inputs.reserve(b.batch * b.seq_len);
  b.targets.reserve(b.batch * b.seq_len);
  for (std::size_t i : indices) {
    auto s = sequence(i);
    b.inputs.insert(b.inputs.end(), s.begin(), s.end() - 1);
    b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
  }
  return b;
}

std::vector<TokenId> synthetic_tokens(std::size_t count, std::size_t vocab_size, std::uint64_t seed) {
  if (vocab_size < 2) throw ValidationError("synthetic corpus needs a vocabulary of at least 2");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> any(0, vocab_size - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<TokenId> successor(vocab_size);
  for (auto& s : successor) s = static_cast<TokenId>(any(rng));
  std::vector<TokenId> out;
  out.reserve(count);
  TokenId prev = static_cast<TokenId>(any(rng));
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(prev);
    prev = coin(rng) < 0.8 ? successor[prev] : static_cast<TokenId>(any(rng));
  }
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      in_quotes = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_row();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes) throw IngestionError("unterminated quoted CSV field", text.size());
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

std::vector<std::string> load_corpus_documents(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (!entry.is_regular_file()) continue;
      const auto ext = entry.path().extension();
      if (ext == ".txt" || ext == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw ValidationError("corpus path " + path.string() + " does not exist");
  }

  std::vector<std::string> docs;
  for (const auto& file : files) {
    const std::string raw = read_file(file);
    if (file.extension() == ".csv") {
      auto rows = parse_csv(raw);
      if (rows.empty()) continue;
      auto it = std::find(rows[0].begin(), rows[0].end(), "content");
      if (it == rows[0].end()) throw ValidationError(file.string() + " has no 'content' column");
      const auto col = static_cast<std::size_t>(it - rows[0].begin());
      for (std::size_t r = 1; r < rows.size(); ++r) {
        if (col < rows[r].size()) {
          std::string doc = clean_text(rows[r][col]);
          if (!doc.empty()) docs.push_back(std::move(doc));
        }
      }
    } else {
      std::string doc = clean_text(raw);
      if (!doc.empty()) docs.push_back(std::move(doc));
    }
  }
  if (docs.empty()) throw ValidationError("corpus " + path.string() + " contains no documents");
  return docs;
}

std::vector<TokenId> tokenize_documents(const std::vector<std::string>& documents, const Vocab& vocab) {
  std::vector<TokenId> stream;
  for (const auto& doc : documents) {
    auto ids = tokenize(doc, vocab);
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(vocab.eot_id());
  }
  return stream;
}

void BatchPlan::validate() const {
  if (world_size < 1) throw ValidationError("world size must be at least 1");
  if (global_batch == 0) throw ValidationError("global batch must be positive");
  if (global_batch % static_cast<std::size_t>(world_size) != 0) {
    throw ValidationError("global batch " + std::to_string(global_batch) + " is not divisible by world size " +
                          std::to_string(world_size));
  }
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(perm[i - 1], perm[r % bound]);
  }
  return perm;
}

std::vector<std::vector<std::size_t>> global_batches(const BatchPlan& plan, std::size_t sequence_count,
                                                     std::size_t epoch) {
  plan.validate();
  const auto perm = epoch_permutation(sequence_count, plan.seed, epoch);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + plan.global_batch <= sequence_count; start += plan.global_batch) {
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(start + plan.global_batch));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> shard_batches(const BatchPlan& plan, std::size_t sequence_count,
                                                    std::size_t epoch, int rank) {
  plan.validate();
  if (rank < 0 || rank >= plan.world_size) throw ValidationError("rank " + std::to_string(rank) + " out of range");
  std::vector<std::vector<std::size_t>> out;
  for (const auto& global : global_batches(plan, sequence_count, epoch)) {
    std::vector<std::size_t> mine;
    for (std::size_t i = static_cast<std::size_t>(rank); i < global.size(); i += static_cast<std::size_t>(plan.world_size)) {
      mine.push_back(global[i]);
    }
    out.push_back(std::move(mine));
  }
  return out;
}

}  // namespace shardtrain
