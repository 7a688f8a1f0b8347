// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shardtrain {

enum class CollectiveOp { kBroadcast, kAllReduceSum, kAllGather, kReduceScatter, kBarrier };

std::string_view to_string(CollectiveOp op);

/// One completed collective as seen by one rank. `bytes` is the logical
/// payload: the buffer length for broadcast and all-reduce, W·shard for
/// all-gather and reduce-scatter, zero for barrier.
struct CollectiveCallRecord {
  CollectiveOp op;
  std::uint64_t sequence = 0;
  std::size_t bytes = 0;
  double wall_seconds = 0.0;
};

class WorkerGroup;

/// A launched all-reduce. The local contribution is posted at launch;
/// wait() collects the peers' contributions and writes the sum.
class PendingCollective {
 public:
  PendingCollective() = default;
  PendingCollective(PendingCollective&&) noexcept = default;
  PendingCollective& operator=(PendingCollective&&) noexcept = default;

  void wait();
  bool done() const noexcept { return done_; }
  std::uint64_t sequence() const noexcept { return sequence_; }

 private:
  friend class Communicator;

  WorkerGroup* group_ = nullptr;
  int rank_ = 0;
  std::uint64_t sequence_ = 0;
  std::span<double> buffer_;
  std::vector<double> local_;
  double started_ = 0.0;
  bool done_ = true;
};

/// Rank-local endpoint of a WorkerGroup. Every collective must be entered by
/// all ranks in the same order. Reductions sum contributions in ascending
/// rank order, so every rank obtains bit-identical results.
class Communicator {
 public:
  Communicator(WorkerGroup& group, int rank) : group_(&group), rank_(rank) {}

  int rank() const noexcept { return rank_; }
  int world_size() const noexcept;

  void broadcast(std::span<double> buffer, int root);
  void all_reduce_sum(std::span<double> buffer);
  PendingCollective launch_all_reduce_sum(std::span<double> buffer);
  /// Concatenation of every rank's shard in rank order.
  std::vector<double> all_gather(std::span<const double> shard);
  /// Rank r receives the sum over ranks of segment r of `full`.
  std::vector<double> reduce_scatter(std::span<const double> full);
  void barrier();

  const std::vector<CollectiveCallRecord>& records() const;

 private:
  WorkerGroup* group_;
  int rank_;
};

/// In-process group of W workers exchanging messages through per-rank
/// mailboxes. Sends never block; receives block until the matching message
/// arrives or the group is aborted.
class WorkerGroup {
 public:
  explicit WorkerGroup(int world_size);
  ~WorkerGroup();
  WorkerGroup(const WorkerGroup&) = delete;
  WorkerGroup& operator=(const WorkerGroup&) = delete;

  int world_size() const noexcept { return world_size_; }
  Communicator communicator(int rank);

  /// Wakes every blocked rank with AbortedError. Idempotent.
  void abort(const std::string& reason);
  bool aborted() const;

  const std::vector<CollectiveCallRecord>& records(int rank) const;

 private:
  friend class Communicator;
  friend class PendingCollective;

  struct Message {
    std::uint64_t sequence = 0;
    CollectiveOp op = CollectiveOp::kBarrier;
    int root = 0;
    std::size_t length = 0;  // caller's buffer length, for consistency checks
    std::vector<double> payload;
  };

  struct Mailbox {
    std::mutex mutex;
    std::condition_variable arrived;
    std::vector<std::deque<Message>> from;  // indexed by source rank
  };

  struct RankState {
    std::uint64_t next_sequence = 0;
    std::atomic<bool> busy{false};
    std::vector<CollectiveCallRecord> records;
  };

  class EndpointGuard;

  void send(int src, int dst, Message message);
  Message receive(int self, int src, std::uint64_t sequence, CollectiveOp op);
  [[noreturn]] void fail_protocol(const std::string& what);
  void record(int rank, CollectiveOp op, std::uint64_t sequence, std::size_t bytes, double started);

  int world_size_;
  std::vector<std::unique_ptr<Mailbox>> mailboxes_;
  std::vector<std::unique_ptr<RankState>> ranks_;
  mutable std::mutex abort_mutex_;
  std::atomic<bool> aborted_{false};
  std::string abort_reason_;
};

}  // namespace shardtrain
