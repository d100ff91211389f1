#include "spade/memory_bank.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "spade/binary_io.hpp"
#include "spade/errors.hpp"

namespace spade {

MemoryBank::MemoryBank(std::size_t capacity, std::vector<std::int64_t> embedding_shape)
    : capacity_(capacity), shape_(std::move(embedding_shape)) {
  if (capacity_ == 0) throw ParameterError("memory bank capacity must be >= 1");
  if (shape_.empty()) throw ParameterError("embedding shape must be non-empty");
  for (auto s : shape_) {
    if (s < 1) throw ParameterError("embedding shape components must be >= 1");
  }
}

std::size_t MemoryBank::embedding_size() const {
  return static_cast<std::size_t>(
      std::accumulate(shape_.begin(), shape_.end(), std::int64_t{1}, std::multiplies<>()));
}

void MemoryBank::enqueue(std::span<const BankEntry> entries) {
  const std::size_t dim = embedding_size();
  std::vector<EntryPtr> staged;
  staged.reserve(entries.size());
  std::uint64_t age = next_age_;
  for (const auto& e : entries) {
    if (e.embedding.size() != dim) throw ValidationError("bank entry has the wrong embedding size");
    auto copy = std::make_shared<BankEntry>();
    copy->embedding.resize(dim);
    double sq = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      copy->embedding[i] = static_cast<double>(static_cast<float>(e.embedding[i]));
      sq += e.embedding[i] * e.embedding[i];
    }
    if (!(std::abs(std::sqrt(sq) - 1.0) <= kUnitNormTolerance)) {
      throw ValidationError("bank entry embedding is not unit norm");
    }
    copy->footprint = e.footprint;
    copy->age = age++;
    staged.push_back(std::move(copy));
  }
  next_age_ = age;
  for (auto& p : staged) entries_.push_back(std::move(p));
  while (entries_.size() > capacity_) entries_.pop_front();
}

MemoryBank enqueue(MemoryBank bank, std::span<const BankEntry> entries) {
  bank.enqueue(entries);
  return bank;
}

OverlapPartition partition_by_overlap(const BankSnapshot& bank, const TemplateFootprint& anchor, double o) {
  if (!(o >= 0.0 && o <= 1.0)) throw ParameterError("overlap threshold must lie in [0, 1]");
  OverlapPartition out;
  for (const auto& e : bank) {
    const double iou = patch_iou(e->footprint, anchor);
    if (iou <= o) {
      out.below.push_back(e);
      out.below_iou.push_back(iou);
    } else {
      out.above.push_back(e);
      out.above_iou.push_back(iou);
    }
  }
  return out;
}

OverlapPartition partition_by_overlap(const MemoryBank& bank, const TemplateFootprint& anchor, double o) {
  return partition_by_overlap(bank.snapshot(), anchor, o);
}

// Layout: one JSON header line, then count * dim f32 embeddings, then per entry
// six f64 footprint values and a u64 age.
void MemoryBank::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  nlohmann::json header = {{"capacity", capacity_},
                           {"count", entries_.size()},
                           {"embedding_shape", shape_},
                           {"next_age", next_age_}};
  os << header.dump() << '\n';
  std::vector<float> buf(embedding_size());
  for (const auto& e : entries_) {
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(e->embedding[i]);
    io::write_f32(os, buf);
  }
  for (const auto& e : entries_) {
    for (int k = 0; k < 3; ++k) io::write_f64(os, e->footprint.corner[k]);
    for (int k = 0; k < 3; ++k) io::write_f64(os, e->footprint.size[k]);
    io::write_u64(os, e->age);
  }
}

MemoryBank MemoryBank::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("missing bank header");
  MemoryBank bank;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    bank = MemoryBank(header.at("capacity").get<std::size_t>(),
                      header.at("embedding_shape").get<std::vector<std::int64_t>>());
    count = header.at("count").get<std::size_t>();
    bank.next_age_ = header.at("next_age").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad bank header: ") + e.what());
  }
  if (count > bank.capacity_) throw DataError("bank file holds more entries than its capacity");
  const std::size_t dim = bank.embedding_size();
  std::vector<std::shared_ptr<BankEntry>> loaded(count);
  std::vector<float> buf(dim);
  for (auto& e : loaded) {
    e = std::make_shared<BankEntry>();
    io::read_f32(is, buf);
    e->embedding.assign(buf.begin(), buf.end());
  }
  for (auto& e : loaded) {
    for (int k = 0; k < 3; ++k) e->footprint.corner[k] = io::read_f64(is);
    for (int k = 0; k < 3; ++k) e->footprint.size[k] = io::read_f64(is);
    e->age = io::read_u64(is);
  }
  for (auto& e : loaded) bank.entries_.push_back(std::move(e));
  return bank;
}

}  // namespace spade
