#include "spade/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "spade/errors.hpp"

namespace spade {
namespace {

Tensor flip(const Tensor& x, const std::array<bool, 3>& flips) {
  if (!flips[0] && !flips[1] && !flips[2]) return x;
  Tensor y(x.channels(), x.depth(), x.height(), x.width());
  const auto D = x.depth(), H = x.height(), W = x.width();
  for (std::int64_t c = 0; c < x.channels(); ++c) {
    for (std::int64_t d = 0; d < D; ++d) {
      const auto sd = flips[0] ? D - 1 - d : d;
      for (std::int64_t h = 0; h < H; ++h) {
        const auto sh = flips[1] ? H - 1 - h : h;
        for (std::int64_t w = 0; w < W; ++w) {
          y.at(c, d, h, w) = x.at(c, sd, sh, flips[2] ? W - 1 - w : w);
        }
      }
    }
  }
  return y;
}

// One counter-clockwise quarter-turn: y[h][w] = x[w][H-1-h].
Tensor rot90_once(const Tensor& x) {
  const auto H = x.height();
  Tensor y(x.channels(), x.depth(), x.width(), x.height());
  for (std::int64_t c = 0; c < x.channels(); ++c) {
    for (std::int64_t d = 0; d < x.depth(); ++d) {
      for (std::int64_t h = 0; h < y.height(); ++h) {
        for (std::int64_t w = 0; w < y.width(); ++w) y.at(c, d, h, w) = x.at(c, d, w, H - 1 - h);
      }
    }
  }
  return y;
}

Tensor rotate(const Tensor& x, int count) {
  count = ((count % 4) + 4) % 4;
  if (count == 0) return x;
  if (count == 2) return flip(x, {false, true, true});
  if (x.height() != x.width()) throw ShapeError("odd quarter-turn needs a square height/width plane");
  Tensor y = rot90_once(x);
  return count == 1 ? y : flip(y, {false, true, true});
}

}  // namespace

Tensor apply_spatial(const Tensor& x, const SpatialAug& aug) { return rotate(flip(x, aug.flips), aug.rot90); }

Tensor invert_spatial(const Tensor& x, const SpatialAug& aug) { return flip(rotate(x, 4 - aug.rot90), aug.flips); }

SpatialAug random_spatial(std::mt19937_64& rng, bool square_plane) {
  std::bernoulli_distribution coin(0.5);
  SpatialAug a;
  for (auto& f : a.flips) f = coin(rng);
  a.rot90 = std::uniform_int_distribution<int>(0, 3)(rng);
  if (!square_plane) a.rot90 &= 2;
  return a;
}

std::string to_string(IntensityKind kind) {
  switch (kind) {
    case IntensityKind::kGaussianNoise: return "gaussian_noise";
    case IntensityKind::kShiftScale: return "shift_scale";
    case IntensityKind::kGamma: return "gamma";
    case IntensityKind::kLocalShuffle: return "local_shuffle";
  }
  return "unknown";
}

Tensor apply_intensity(const Tensor& x, const IntensityAug& aug) {
  Tensor y = x;
  std::mt19937_64 rng(aug.seed);
  switch (aug.kind) {
    case IntensityKind::kGaussianNoise: {
      if (aug.sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, aug.sigma);
        for (auto& v : y.data) v += noise(rng);
      }
      break;
    }
    case IntensityKind::kShiftScale:
      for (auto& v : y.data) v = v * aug.scale + aug.shift;
      break;
    case IntensityKind::kGamma:
      for (auto& v : y.data) v = std::pow(std::clamp(v, 0.0, 1.0), aug.gamma);
      break;
    case IntensityKind::kLocalShuffle: {
      const std::int64_t n = std::max(1, aug.window);
      std::vector<std::size_t> idx;
      std::vector<double> vals;
      for (std::int64_t c = 0; c < y.channels(); ++c) {
        for (std::int64_t d0 = 0; d0 < y.depth(); d0 += n) {
          for (std::int64_t h0 = 0; h0 < y.height(); h0 += n) {
            for (std::int64_t w0 = 0; w0 < y.width(); w0 += n) {
              idx.clear();
              for (std::int64_t d = d0; d < std::min(d0 + n, y.depth()); ++d) {
                for (std::int64_t h = h0; h < std::min(h0 + n, y.height()); ++h) {
                  for (std::int64_t w = w0; w < std::min(w0 + n, y.width()); ++w) idx.push_back(y.index(c, d, h, w));
                }
              }
              vals.resize(idx.size());
              for (std::size_t i = 0; i < idx.size(); ++i) vals[i] = x.data[idx[i]];
              std::shuffle(vals.begin(), vals.end(), rng);
              for (std::size_t i = 0; i < idx.size(); ++i) y.data[idx[i]] = vals[i];
            }
          }
        }
      }
      break;
    }
  }
  for (auto& v : y.data) v = std::clamp(v, 0.0, 1.0);
  return y;
}

void IntensityRanges::validate() const {
  if (!(sigma[0] >= 0.0 && sigma[1] >= sigma[0])) throw ConfigError("intensity sigma range must satisfy 0 <= lo <= hi");
  if (!(shift >= 0.0)) throw ConfigError("intensity shift must be >= 0");
  if (!(scale >= 0.0 && scale < 1.0)) throw ConfigError("intensity scale deviation must lie in [0, 1)");
  if (!(gamma[0] > 0.0 && gamma[1] >= gamma[0])) throw ConfigError("intensity gamma range must satisfy 0 < lo <= hi");
  if (window < 1) throw ConfigError("local shuffle window must be >= 1");
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("intensity probability must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const IntensityRanges& r) {
  j = {{"sigma", r.sigma}, {"shift", r.shift},   {"scale", r.scale},
       {"gamma", r.gamma}, {"window", r.window}, {"probability", r.probability}};
}

void from_json(const nlohmann::json& j, IntensityRanges& r) {
  const IntensityRanges d;
  r.sigma = j.value("sigma", d.sigma);
  r.shift = j.value("shift", d.shift);
  r.scale = j.value("scale", d.scale);
  r.gamma = j.value("gamma", d.gamma);
  r.window = j.value("window", d.window);
  r.probability = j.value("probability", d.probability);
}

IntensityAug random_intensity(std::mt19937_64& rng, const IntensityRanges& ranges) {
  IntensityAug a;
  a.kind = static_cast<IntensityKind>(std::uniform_int_distribution<int>(0, 3)(rng));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  a.sigma = ranges.sigma[0] + (ranges.sigma[1] - ranges.sigma[0]) * u(rng);
  a.shift = ranges.shift * (2.0 * u(rng) - 1.0);
  a.scale = 1.0 + ranges.scale * (2.0 * u(rng) - 1.0);
  a.gamma = std::exp(std::log(ranges.gamma[0]) + (std::log(ranges.gamma[1]) - std::log(ranges.gamma[0])) * u(rng));
  a.window = ranges.window;
  a.seed = rng();
  if (u(rng) >= ranges.probability) a = IntensityAug{IntensityKind::kShiftScale};
  return a;
}

}  // namespace spade
