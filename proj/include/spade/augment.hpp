#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "json.hpp"
#include "spade/tensor.hpp"

namespace spade {

/// Axis flips (depth, height, width) followed by quarter-turns in the
/// height/width plane. Every member of the family is a permutation of voxels.
struct SpatialAug {
  std::array<bool, 3> flips{false, false, false};
  int rot90 = 0;  // 0..3

  bool operator==(const SpatialAug&) const = default;
};

/// Throws ShapeError for an odd quarter-turn count on a non-square plane.
Tensor apply_spatial(const Tensor& x, const SpatialAug& aug);
Tensor invert_spatial(const Tensor& x, const SpatialAug& aug);

/// Random member of the family; odd turns only when `square_plane`.
SpatialAug random_spatial(std::mt19937_64& rng, bool square_plane);

enum class IntensityKind { kGaussianNoise, kShiftScale, kGamma, kLocalShuffle };

std::string to_string(IntensityKind kind);

struct IntensityAug {
  IntensityKind kind = IntensityKind::kGaussianNoise;
  double sigma = 0.05;   // gaussian_noise
  double shift = 0.0;    // shift_scale: x * scale + shift
  double scale = 1.0;
  double gamma = 1.0;    // gamma: x^gamma
  int window = 2;        // local_shuffle: cubic window edge
  std::uint64_t seed = 0;
};

/// Noised copy clamped to [0, 1]. Local shuffle permutes values only inside
/// non-overlapping windows.
Tensor apply_intensity(const Tensor& x, const IntensityAug& aug);

/// Parameter ranges for random_intensity. Shift and scale deviations are
/// symmetric about 0 and 1; gamma is drawn log-uniformly.
struct IntensityRanges {
  std::array<double, 2> sigma{0.01, 0.05};
  double shift = 0.1;
  double scale = 0.1;
  std::array<double, 2> gamma{0.7, 1.5};
  int window = 2;
  double probability = 1.0;  // chance that a view is noised at all

  void validate() const;
  bool operator==(const IntensityRanges&) const = default;
};

void to_json(nlohmann::json& j, const IntensityRanges& r);
void from_json(const nlohmann::json& j, IntensityRanges& r);

/// Random kind with random parameters inside `ranges`; an identity
/// shift_scale when the view is not noised.
IntensityAug random_intensity(std::mt19937_64& rng, const IntensityRanges& ranges = {});

}  // namespace spade
