#include "spade/sampling.hpp"

#include <algorithm>
#include <cmath>

namespace spade {

void SamplingConfig::validate() const {
  if (!(o >= 0.0 && o <= 1.0)) throw ConfigError("overlap threshold o must lie in [0, 1]");
  if (p < 1) throw ConfigError("p must be >= 1");
  if (n_plus < 0) throw ConfigError("n_plus must be >= 0");
  for (auto c : crop_size) {
    if (c < 2 || c % 2 != 0) throw ConfigError("crop_size components must be even and >= 2");
  }
  if (!(scale_range[0] > 0.0 && scale_range[0] <= scale_range[1])) throw ConfigError("bad scale_range");
  if (!(min_foreground >= 0.0 && min_foreground <= 1.0)) throw ConfigError("min_foreground must lie in [0, 1]");
  if (max_rejections < 1) throw ConfigError("max_rejections must be >= 1");
}

void to_json(nlohmann::json& j, const SamplingConfig& c) {
  j = {{"o", c.o},
       {"p", c.p},
       {"n_plus", c.n_plus},
       {"crop_size", c.crop_size},
       {"scale_range", c.scale_range},
       {"air_threshold", c.air_threshold},
       {"min_foreground", c.min_foreground},
       {"max_rejections", c.max_rejections}};
}

void from_json(const nlohmann::json& j, SamplingConfig& c) {
  SamplingConfig d;
  c.o = j.value("o", d.o);
  c.p = j.value("p", d.p);
  c.n_plus = j.value("n_plus", d.n_plus);
  c.crop_size = j.value("crop_size", d.crop_size);
  c.scale_range = j.value("scale_range", d.scale_range);
  c.air_threshold = j.value("air_threshold", d.air_threshold);
  c.min_foreground = j.value("min_foreground", d.min_foreground);
  c.max_rejections = j.value("max_rejections", d.max_rejections);
}

double foreground_fraction(const Volume& crop, double threshold) {
  const auto data = crop.data();
  const auto n = std::count_if(data.begin(), data.end(), [&](float x) { return x > threshold; });
  return static_cast<double>(n) / static_cast<double>(data.size());
}

Tensor extract_patch(const Volume& v, const Patch& p, const Dims& size) {
  return to_tensor(extract_resized(v, p.corner, p.size, size));
}

std::vector<PatchPair> sample_anchor_pairs(const Volume& v, const SamplingConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& dims = v.dims();
  double s_max = cfg.scale_range[1];
  for (int a = 0; a < 3; ++a) {
    const double fit = static_cast<double>(dims[a]) / static_cast<double>(cfg.crop_size[a]);
    if (fit < cfg.scale_range[0]) {
      throw ParameterError("volume " + v.id() + " is too small for crop_size at the minimum scale");
    }
    s_max = std::min(s_max, fit);
  }
  const double log_lo = std::log(cfg.scale_range[0]), log_hi = std::log(s_max);
  // Scale ratios beyond this cannot reach IoU o even when nested.
  const double max_log_ratio = cfg.o > 0.0 ? std::log(1.0 / cfg.o) / 3.0 : log_hi - log_lo;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto extent_for = [&](double s) {
    Vec3d e;
    for (int a = 0; a < 3; ++a) e[a] = static_cast<double>(cfg.crop_size[a]) * s;
    return e;
  };
  auto mostly_air = [&](const Patch& p) {
    return foreground_fraction(extract_resized(v, p.corner, p.size, cfg.crop_size), cfg.air_threshold) <
           cfg.min_foreground;
  };

  std::vector<PatchPair> pairs;
  int rejections = 0;
  while (static_cast<int>(pairs.size()) < cfg.p) {
    if (rejections >= cfg.max_rejections) {
      throw SamplingExhaustedError("no acceptable crop pair in " + v.id() + " after " +
                                   std::to_string(rejections) + " consecutive rejections");
    }
    const double s1 = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
    Patch a{v.id(), {}, extent_for(s1)};
    for (int k = 0; k < 3; ++k) a.corner[k] = unit(rng) * (static_cast<double>(dims[k]) - a.size[k]);

    const double r = std::clamp(std::log(s1) + max_log_ratio * (2.0 * unit(rng) - 1.0), log_lo, log_hi);
    Patch b{v.id(), {}, extent_for(std::exp(r))};
    for (int k = 0; k < 3; ++k) {
      const double lo = a.corner[k] - 0.5 * b.size[k];
      const double hi = a.corner[k] + a.size[k] - 0.5 * b.size[k];
      b.corner[k] = std::clamp(lo + (hi - lo) * unit(rng), 0.0, static_cast<double>(dims[k]) - b.size[k]);
    }
    if (patch_iou(a, b) < cfg.o || mostly_air(a) || mostly_air(b)) {
      ++rejections;
      continue;
    }
    rejections = 0;
    pairs.emplace_back(std::move(a), std::move(b));
  }
  return pairs;
}

namespace {

std::vector<const VolumeFrame*> candidate_frames(const std::string& anchor_id, const TransformSet& frames,
                                                 std::mt19937_64* rng) {
  std::vector<const VolumeFrame*> out;
  for (const auto& f : frames) {
    if (f.id != anchor_id) out.push_back(&f);
  }
  if (rng != nullptr) std::shuffle(out.begin(), out.end(), *rng);
  return out;
}

}  // namespace

std::vector<Patch> select_positive_volumes(const Patch& anchor, const TransformSet& frames, int n_plus,
                                           std::mt19937_64* rng) {
  if (n_plus < 0) throw ParameterError("n_plus must be >= 0");
  std::vector<Patch> out;
  if (n_plus == 0) return out;
  const auto& src = find_frame(frames, anchor.volume_id);
  for (const auto* dst : candidate_frames(anchor.volume_id, frames, rng)) {
    try {
      out.push_back(map_patch(anchor, src, *dst));
    } catch (const OutOfFieldError&) {
      continue;
    }
    if (static_cast<int>(out.size()) == n_plus) return out;
  }
  throw AvailabilityError("only " + std::to_string(out.size()) + " volumes can host a positive for " +
                              anchor.volume_id + ", need " + std::to_string(n_plus),
                          out.size());
}

std::vector<PatchPair> select_corresponding(const PatchPair& anchor, const TransformSet& frames, int n_plus,
                                            std::mt19937_64* rng) {
  if (n_plus < 0) throw ParameterError("n_plus must be >= 0");
  std::vector<PatchPair> out;
  if (n_plus == 0) return out;
  const auto& src = find_frame(frames, anchor.first.volume_id);
  for (const auto* dst : candidate_frames(anchor.first.volume_id, frames, rng)) {
    try {
      out.emplace_back(map_patch(anchor.first, src, *dst), map_patch(anchor.second, src, *dst));
    } catch (const OutOfFieldError&) {
      continue;
    }
    if (static_cast<int>(out.size()) == n_plus) return out;
  }
  throw AvailabilityError("only " + std::to_string(out.size()) + " volumes can host both crops of " +
                              anchor.first.volume_id + ", need " + std::to_string(n_plus),
                          out.size());
}

std::string to_string(StrategyId s) {
  switch (s) {
    case StrategyId::kMoco: return "MoCo-baseline";
    case StrategyId::kG1: return "G1";
    case StrategyId::kG2: return "G2";
    case StrategyId::kG3: return "G3";
    case StrategyId::kL1: return "L1";
    case StrategyId::kL2: return "L2";
    case StrategyId::kL3: return "L3";
    case StrategyId::kL4: return "L4";
  }
  return "unknown";
}

StrategyId parse_strategy(const std::string& s) {
  if (s == "MoCo-baseline" || s == "moco" || s == "MoCo") return StrategyId::kMoco;
  for (auto id : {StrategyId::kG1, StrategyId::kG2, StrategyId::kG3, StrategyId::kL1, StrategyId::kL2,
                  StrategyId::kL3, StrategyId::kL4}) {
    if (s == to_string(id)) return id;
  }
  throw ConfigError("unknown strategy '" + s + "'");
}

bool is_global(StrategyId s) {
  return s == StrategyId::kMoco || s == StrategyId::kG1 || s == StrategyId::kG2 || s == StrategyId::kG3;
}

namespace {

void fill_negatives(CohortPair& c, const BankSnapshot& bank, const TemplateFootprint& anchor, double o, bool debias,
                    bool promote) {
  if (!debias) {
    c.bank_negatives = bank;
  } else {
    auto part = partition_by_overlap(bank, anchor, o);
    c.debiased = part.above.size();
    c.bank_negatives = std::move(part.below);
    if (promote) c.bank_positives = std::move(part.above);
  }
  for (const auto& e : c.bank_negatives) c.negatives.emplace_back(e->embedding);
  for (const auto& e : c.bank_positives) c.positives.emplace_back(e->embedding);
}

}  // namespace

CohortPair build_global_cohorts(StrategyId strategy, EmbeddingView anchor,
                                const std::vector<EmbeddingView>& positives, const TemplateFootprint& anchor_footprint,
                                const BankSnapshot& bank, double o) {
  if (!is_global(strategy)) throw ParameterError(to_string(strategy) + " is not a global strategy");
  if (positives.empty()) throw CohortError("global cohort needs at least one positive besides the anchor");
  CohortPair c;
  c.positives.push_back(anchor);
  if (strategy == StrategyId::kMoco) {
    c.positives.push_back(positives.front());
  } else {
    c.positives.insert(c.positives.end(), positives.begin(), positives.end());
  }
  c.online_count = c.positives.size();
  fill_negatives(c, bank, anchor_footprint, o, strategy == StrategyId::kG2 || strategy == StrategyId::kG3,
                 strategy == StrategyId::kG3);
  return c;
}

CohortPair build_local_cohorts(StrategyId strategy, const std::array<EmbeddingView, 2>& own,
                               const std::vector<EmbeddingView>& cross, const TemplateFootprint& anchor_footprint,
                               const BankSnapshot& bank, double o) {
  if (is_global(strategy)) throw ParameterError(to_string(strategy) + " is not a local strategy");
  CohortPair c;
  c.positives = {own[0], own[1]};
  if (strategy == StrategyId::kL3 || strategy == StrategyId::kL4) {
    c.positives.insert(c.positives.end(), cross.begin(), cross.end());
  }
  c.online_count = c.positives.size();
  fill_negatives(c, bank, anchor_footprint, o, strategy != StrategyId::kL1, strategy == StrategyId::kL4);
  return c;
}

OverlapRegion overlap_region(const Patch& own, const Patch& other, const std::array<std::int64_t, 3>& grid) {
  const auto inter = intersect(own.box(), other.box());
  if (!inter) throw GeometryError("patches do not overlap");
  OverlapRegion r;
  const auto upper = inter->upper();
  for (int a = 0; a < 3; ++a) {
    const double scale = static_cast<double>(grid[a]) / own.size[a];
    auto lo = static_cast<std::int64_t>(std::floor((inter->corner[a] - own.corner[a]) * scale + 1e-9));
    auto hi = static_cast<std::int64_t>(std::ceil((upper[a] - own.corner[a]) * scale - 1e-9));
    lo = std::clamp<std::int64_t>(lo, 0, grid[a] - 1);
    hi = std::clamp<std::int64_t>(hi, lo + 1, grid[a]);
    r.lo[a] = lo;
    r.size[a] = hi - lo;
  }
  return r;
}

Tensor extract_overlap_logits(const Tensor& z, const Patch& own, const Patch& other) {
  const auto r = overlap_region(own, other, {z.depth(), z.height(), z.width()});
  return slice(z, r.lo, r.size);
}

}  // namespace spade
