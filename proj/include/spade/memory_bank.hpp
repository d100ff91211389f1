#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "spade/correspondence.hpp"

namespace spade {

inline constexpr double kUnitNormTolerance = 1e-6;

/// A momentum-network embedding queued together with where it came from.
/// Embedding values are stored rounded to f32 so checkpoints are lossless.
struct BankEntry {
  std::vector<double> embedding;
  TemplateFootprint footprint;
  std::uint64_t age = 0;
};

using EntryPtr = std::shared_ptr<const BankEntry>;

/// Immutable view of the queue at one point in time. Later enqueues never
/// touch a snapshot that is already held.
using BankSnapshot = std::vector<EntryPtr>;

/// Fixed-capacity FIFO queue.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::size_t capacity, std::vector<std::int64_t> embedding_shape);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<std::int64_t>& embedding_shape() const { return shape_; }
  std::size_t embedding_size() const;
  std::uint64_t next_age() const { return next_age_; }

  /// Appends in order and evicts the oldest entries past capacity. Ages are
  /// assigned here. Throws ValidationError on non-unit or mis-shaped input;
  /// the bank is left untouched in that case.
  void enqueue(std::span<const BankEntry> entries);

  const std::deque<EntryPtr>& entries() const { return entries_; }
  BankSnapshot snapshot() const { return {entries_.begin(), entries_.end()}; }

  void save(const std::filesystem::path& path) const;
  static MemoryBank load(const std::filesystem::path& path);

 private:
  std::size_t capacity_ = 0;
  std::vector<std::int64_t> shape_;
  std::deque<EntryPtr> entries_;
  std::uint64_t next_age_ = 0;
};

/// Value-style enqueue.
MemoryBank enqueue(MemoryBank bank, std::span<const BankEntry> entries);

struct OverlapPartition {
  BankSnapshot below;  // IoU <= o: kept as negatives
  BankSnapshot above;  // IoU > o: debiased
  std::vector<double> below_iou;
  std::vector<double> above_iou;
};

/// Stable two-way split of the queue by template-space IoU with `anchor`.
OverlapPartition partition_by_overlap(const BankSnapshot& bank, const TemplateFootprint& anchor, double o);
OverlapPartition partition_by_overlap(const MemoryBank& bank, const TemplateFootprint& anchor, double o);

}  // namespace spade
