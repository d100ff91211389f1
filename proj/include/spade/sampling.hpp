#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spade/correspondence.hpp"
#include "spade/losses.hpp"
#include "spade/memory_bank.hpp"
#include "spade/tensor.hpp"
#include "spade/volume.hpp"

namespace spade {

/// Normalized intensity of -350 HU under the [-1000, 1000] window.
inline constexpr double kAirThresholdNormalized = 0.325;

struct SamplingConfig {
  double o = 0.2;
  int p = 2;
  int n_plus = 4;
  Dims crop_size{32, 64, 64};
  std::array<double, 2> scale_range{0.5, 2.0};
  double air_threshold = kAirThresholdNormalized;
  double min_foreground = 0.1;  // crops with a smaller fraction above air_threshold are rejected
  int max_rejections = 1000;

  void validate() const;
};

void to_json(nlohmann::json& j, const SamplingConfig& c);
void from_json(const nlohmann::json& j, SamplingConfig& c);

using PatchPair = std::pair<Patch, Patch>;

/// Fraction of voxels strictly above `threshold`.
double foreground_fraction(const Volume& crop, double threshold);

/// Crop `p` resized to `size` as a one-channel tensor.
Tensor extract_patch(const Volume& v, const Patch& p, const Dims& size);

/// Exactly cfg.p crop pairs from `v` whose image-space IoU is at least cfg.o,
/// none of them mainly air. Throws SamplingExhaustedError after
/// cfg.max_rejections consecutive rejections.
std::vector<PatchPair> sample_anchor_pairs(const Volume& v, const SamplingConfig& cfg, std::uint64_t seed);

/// Maps `anchor` into up to n_plus other volumes, in frame order or shuffled
/// by `rng`, skipping volumes where it falls out of field. Throws
/// AvailabilityError when fewer than n_plus volumes are usable.
std::vector<Patch> select_positive_volumes(const Patch& anchor, const TransformSet& frames, int n_plus,
                                           std::mt19937_64* rng = nullptr);

/// Like select_positive_volumes but for both crops of a pair at once: only
/// volumes where both crops map in field are used.
std::vector<PatchPair> select_corresponding(const PatchPair& anchor, const TransformSet& frames, int n_plus,
                                            std::mt19937_64* rng = nullptr);

enum class StrategyId { kMoco, kG1, kG2, kG3, kL1, kL2, kL3, kL4 };

std::string to_string(StrategyId s);
/// Accepts "MoCo-baseline"/"moco", "G1".."G3", "L1".."L4". Throws ConfigError otherwise.
StrategyId parse_strategy(const std::string& s);
bool is_global(StrategyId s);

/// Positives and negatives for one anchor. The first `online_count` positives
/// are the caller's embeddings in the order given (anchor first); any further
/// positives are debiased bank entries. Negatives always come from the bank.
struct CohortPair {
  std::vector<EmbeddingView> positives;
  std::vector<EmbeddingView> negatives;
  std::size_t online_count = 0;
  BankSnapshot bank_positives;
  BankSnapshot bank_negatives;
  std::size_t debiased = 0;  // bank entries with IoU > o
};

/// MoCo-baseline uses the anchor and positives[0] (its second view) against
/// the whole bank; G1 adds every positive; G2 drops overlapping negatives;
/// G3 also promotes them to positives.
CohortPair build_global_cohorts(StrategyId strategy, EmbeddingView anchor,
                                const std::vector<EmbeddingView>& positives, const TemplateFootprint& anchor_footprint,
                                const BankSnapshot& bank, double o);

/// L1 pairs the two overlap embeddings of the anchor crops against the whole
/// bank; L2 drops overlapping negatives; L3 adds the cross-volume overlap
/// embeddings; L4 also promotes the dropped negatives.
CohortPair build_local_cohorts(StrategyId strategy, const std::array<EmbeddingView, 2>& own,
                               const std::vector<EmbeddingView>& cross, const TemplateFootprint& anchor_footprint,
                               const BankSnapshot& bank, double o);

struct OverlapRegion {
  std::array<std::int64_t, 3> lo{0, 0, 0};
  std::array<std::int64_t, 3> size{0, 0, 0};
};

/// Index range of own ∩ other inside a logit grid of `grid` voxels that covers
/// `own`. Throws GeometryError when the overlap is empty.
OverlapRegion overlap_region(const Patch& own, const Patch& other, const std::array<std::int64_t, 3>& grid);

/// Sub-tensor of Z covering own ∩ other, in own's voxel frame.
Tensor extract_overlap_logits(const Tensor& z, const Patch& own, const Patch& other);

}  // namespace spade
