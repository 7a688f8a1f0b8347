// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/collectives.hpp"

#include <algorithm>
#include <chrono>

#include "shardtrain/error.hpp"
#include "shardtrain/work_counter.hpp"

namespace shardtrain {
namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string rank_name(int r) { return "rank " + std::to_string(r); }

}  // namespace

std::string_view to_string(CollectiveOp op) {
  switch (op) {
    case CollectiveOp::kBroadcast:
      return "broadcast";
    case CollectiveOp::kAllReduceSum:
      return "all_reduce_sum";
    case CollectiveOp::kAllGather:
      return "all_gather";
    case CollectiveOp::kReduceScatter:
      return "reduce_scatter";
    case CollectiveOp::kBarrier:
      return "barrier";
  }
  return "unknown";
}

// Rejects concurrent use of one rank's endpoint from two threads.
class WorkerGroup::EndpointGuard {
 public:
  EndpointGuard(WorkerGroup& group, int rank) : state_(*group.ranks_.at(rank)) {
    if (state_.busy.exchange(true)) {
      throw ProtocolError(rank_name(rank) + " endpoint entered concurrently from two threads");
    }
  }
  ~EndpointGuard() { state_.busy.store(false); }

 private:
  RankState& state_;
};

WorkerGroup::WorkerGroup(int world_size) : world_size_(world_size) {
  if (world_size < 1) throw ValidationError("world size must be at least 1");
  for (int r = 0; r < world_size; ++r) {
    auto box = std::make_unique<Mailbox>();
    box->from.resize(static_cast<std::size_t>(world_size));
    mailboxes_.push_back(std::move(box));
    ranks_.push_back(std::make_unique<RankState>());
  }
}

WorkerGroup::~WorkerGroup() = default;

Communicator WorkerGroup::communicator(int rank) {
  if (rank < 0 || rank >= world_size_) {
    throw ValidationError(rank_name(rank) + " out of range for world size " + std::to_string(world_size_));
  }
  return Communicator(*this, rank);
}

void WorkerGroup::abort(const std::string& reason) {
  {
    std::lock_guard lock(abort_mutex_);
    if (aborted_.load()) return;
    abort_reason_ = reason;
    aborted_.store(true);
  }
  for (auto& box : mailboxes_) {
    std::lock_guard lock(box->mutex);
    box->arrived.notify_all();
  }
}

bool WorkerGroup::aborted() const { return aborted_.load(); }

const std::vector<CollectiveCallRecord>& WorkerGroup::records(int rank) const { return ranks_.at(rank)->records; }

void WorkerGroup::send(int src, int dst, Message message) {
  Mailbox& box = *mailboxes_[dst];
  {
    std::lock_guard lock(box.mutex);
    box.from[src].push_back(std::move(message));
  }
  box.arrived.notify_all();
}

WorkerGroup::Message WorkerGroup::receive(int self, int src, std::uint64_t sequence, CollectiveOp op) {
  Mailbox& box = *mailboxes_[self];
  std::unique_lock lock(box.mutex);
  auto& queue = box.from[src];
  auto match = queue.end();
  box.arrived.wait(lock, [&] {
    match = std::find_if(queue.begin(), queue.end(), [&](const Message& m) { return m.sequence == sequence; });
    return match != queue.end() || aborted_.load();
  });
  if (match == queue.end()) {
    std::lock_guard abort_lock(abort_mutex_);
    throw AbortedError(rank_name(self) + " collective #" + std::to_string(sequence) +
                       " aborted: " + abort_reason_);
  }
  Message m = std::move(*match);
  queue.erase(match);
  lock.unlock();
  if (m.op != op) {
    fail_protocol(rank_name(self) + " entered " + std::string(to_string(op)) + " #" + std::to_string(sequence) +
                  " but " + rank_name(src) + " entered " + std::string(to_string(m.op)));
  }
  return m;
}

void WorkerGroup::fail_protocol(const std::string& what) {
  abort(what);
  throw ProtocolError(what);
}

void WorkerGroup::record(int rank, CollectiveOp op, std::uint64_t sequence, std::size_t bytes, double started) {
  ranks_[rank]->records.push_back({op, sequence, bytes, now_seconds() - started});
  auto& work = thread_work_counts();
  work.comm_bytes += bytes;
  work.collective_calls += 1;
}

int Communicator::world_size() const noexcept { return group_->world_size(); }

const std::vector<CollectiveCallRecord>& Communicator::records() const { return group_->records(rank_); }

void Communicator::broadcast(std::span<double> buffer, int root) {
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  const int world = world_size();
  if (root < 0 || root >= world) throw ValidationError("broadcast root " + std::to_string(root) + " out of range");
  const double started = now_seconds();
  const auto seq = group_->ranks_[rank_]->next_sequence++;
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    WorkerGroup::Message m{seq, CollectiveOp::kBroadcast, root, buffer.size(), {}};
    if (rank_ == root) m.payload.assign(buffer.begin(), buffer.end());
    group_->send(rank_, peer, std::move(m));
  }
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    auto m = group_->receive(rank_, peer, seq, CollectiveOp::kBroadcast);
    if (m.root != root) {
      group_->fail_protocol("broadcast #" + std::to_string(seq) + ": " + rank_name(rank_) + " uses root " +
                            std::to_string(root) + " but " + rank_name(peer) + " uses root " +
                            std::to_string(m.root));
    }
    if (m.length != buffer.size()) {
      group_->fail_protocol("broadcast #" + std::to_string(seq) + ": " + rank_name(rank_) + " has " +
                            std::to_string(buffer.size()) + " elements but " + rank_name(peer) + " has " +
                            std::to_string(m.length));
    }
    if (peer == root) std::copy(m.payload.begin(), m.payload.end(), buffer.begin());
  }
  group_->record(rank_, CollectiveOp::kBroadcast, seq, buffer.size() * sizeof(double), started);
}

PendingCollective Communicator::launch_all_reduce_sum(std::span<double> buffer) {
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  PendingCollective p;
  p.group_ = group_;
  p.rank_ = rank_;
  p.sequence_ = group_->ranks_[rank_]->next_sequence++;
  p.buffer_ = buffer;
  p.local_.assign(buffer.begin(), buffer.end());
  p.started_ = now_seconds();
  p.done_ = false;
  for (int peer = 0; peer < world_size(); ++peer) {
    if (peer == rank_) continue;
    group_->send(rank_, peer, {p.sequence_, CollectiveOp::kAllReduceSum, 0, buffer.size(), p.local_});
  }
  return p;
}

void PendingCollective::wait() {
  if (done_) return;
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  const int world = group_->world_size();
  std::vector<std::vector<double>> contributions(static_cast<std::size_t>(world));
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    auto m = group_->receive(rank_, peer, sequence_, CollectiveOp::kAllReduceSum);
    if (m.length != local_.size()) {
      group_->fail_protocol("all_reduce_sum #" + std::to_string(sequence_) + ": " + rank_name(rank_) + " has " +
                            std::to_string(local_.size()) + " elements but " + rank_name(peer) + " has " +
                            std::to_string(m.length));
    }
    contributions[peer] = std::move(m.payload);
  }
  contributions[rank_] = std::move(local_);
  std::copy(contributions[0].begin(), contributions[0].end(), buffer_.begin());
  for (int r = 1; r < world; ++r) {
    const auto& c = contributions[r];
    for (std::size_t i = 0; i < buffer_.size(); ++i) buffer_[i] += c[i];
  }
  done_ = true;
  group_->record(rank_, CollectiveOp::kAllReduceSum, sequence_, buffer_.size() * sizeof(double), started_);
}

void Communicator::all_reduce_sum(std::span<double> buffer) { launch_all_reduce_sum(buffer).wait(); }

std::vector<double> Communicator::all_gather(std::span<const double> shard) {
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  const int world = world_size();
  const double started = now_seconds();
  const auto seq = group_->ranks_[rank_]->next_sequence++;
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    group_->send(rank_, peer,
                 {seq, CollectiveOp::kAllGather, 0, shard.size(), std::vector<double>(shard.begin(), shard.end())});
  }
  std::vector<double> out(shard.size() * static_cast<std::size_t>(world));
  std::copy(shard.begin(), shard.end(), out.begin() + rank_ * shard.size());
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    auto m = group_->receive(rank_, peer, seq, CollectiveOp::kAllGather);
    if (m.length != shard.size()) {
      group_->fail_protocol("all_gather #" + std::to_string(seq) + ": " + rank_name(rank_) + " shard has " +
                            std::to_string(shard.size()) + " elements but " + rank_name(peer) + " shard has " +
                            std::to_string(m.length));
    }
    std::copy(m.payload.begin(), m.payload.end(), out.begin() + peer * shard.size());
  }
  group_->record(rank_, CollectiveOp::kAllGather, seq, out.size() * sizeof(double), started);
  return out;
}

std::vector<double> Communicator::reduce_scatter(std::span<const double> full) {
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  const int world = world_size();
  if (full.size() % static_cast<std::size_t>(world) != 0) {
    group_->fail_protocol("reduce_scatter: " + rank_name(rank_) + " buffer of " + std::to_string(full.size()) +
                          " elements is not divisible by world size " + std::to_string(world));
  }
  const std::size_t seg = full.size() / static_cast<std::size_t>(world);
  const double started = now_seconds();
  const auto seq = group_->ranks_[rank_]->next_sequence++;
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    auto part = full.subspan(peer * seg, seg);
    group_->send(rank_, peer,
                 {seq, CollectiveOp::kReduceScatter, 0, full.size(), std::vector<double>(part.begin(), part.end())});
  }
  std::vector<std::vector<double>> contributions(static_cast<std::size_t>(world));
  for (int peer = 0; peer < world; ++peer) {
    if (peer == rank_) continue;
    auto m = group_->receive(rank_, peer, seq, CollectiveOp::kReduceScatter);
    if (m.length != full.size()) {
      group_->fail_protocol("reduce_scatter #" + std::to_string(seq) + ": " + rank_name(rank_) + " has " +
                            std::to_string(full.size()) + " elements but " + rank_name(peer) + " has " +
                            std::to_string(m.length));
    }
    contributions[peer] = std::move(m.payload);
  }
  auto own = full.subspan(rank_ * seg, seg);
  contributions[rank_].assign(own.begin(), own.end());
  std::vector<double> out = std::move(contributions[0]);
  for (int r = 1; r < world; ++r) {
    const auto& c = contributions[r];
    for (std::size_t i = 0; i < seg; ++i) out[i] += c[i];
  }
  group_->record(rank_, CollectiveOp::kReduceScatter, seq, full.size() * sizeof(double), started);
  return out;
}

void Communicator::barrier() {
  WorkerGroup::EndpointGuard guard(*group_, rank_);
  const int world = world_size();
  const double started = now_seconds();
  const auto seq = group_->ranks_[rank_]->next_sequence++;
  for (int peer = 0; peer < world; ++peer) {
    if (peer != rank_) group_->send(rank_, peer, {seq, CollectiveOp::kBarrier, 0, 0, {}});
  }
  for (int peer = 0; peer < world; ++peer) {
    if (peer != rank_) group_->receive(rank_, peer, seq, CollectiveOp::kBarrier);
  }
  group_->record(rank_, CollectiveOp::kBarrier, seq, 0, started);
}

}  // namespace shardtrain
