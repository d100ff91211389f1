#include <cmath>
#include <set>

#include "doctest.h"
#include "spade/errors.hpp"
#include "spade/sampling.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace spade;

namespace {

Volume normalized_phantom(std::uint64_t seed, Dims size = {32, 48, 48}) {
  PhantomSpec s;
  s.seed = seed;
  s.size = size;
  return clip_normalize(generate_phantom(s), -1000, 1000);
}

SamplingConfig small_config() {
  SamplingConfig c;
  c.crop_size = {8, 16, 16};
  return c;
}

TransformSet frames_with(const std::vector<AffineTransform>& ts, Dims dims = {32, 32, 32}) {
  TransformSet out;
  for (std::size_t i = 0; i < ts.size(); ++i) out.push_back({"v" + std::to_string(i), dims, ts[i]});
  return out;
}

std::vector<BankEntry> bank_with_ious(const TemplateFootprint& anchor, const std::vector<double>& ious) {
  std::vector<BankEntry> out;
  for (std::size_t i = 0; i < ious.size(); ++i) {
    auto e = test::tagged_entry(static_cast<int>(i));
    const double r = ious[i];
    const double s = r == 0.0 ? 5.0 : (1.0 - r) / (1.0 + r);
    e.footprint = {{anchor.corner[0] + s * anchor.size[0], anchor.corner[1], anchor.corner[2]}, anchor.size};
    out.push_back(e);
  }
  return out;
}

}  // namespace

TEST_CASE("anchor pairs") {
  const auto v = normalized_phantom(1);
  auto cfg = small_config();
  const auto pairs = sample_anchor_pairs(v, cfg, 5);
  REQUIRE(pairs.size() == 2);
  for (const auto& [a, b] : pairs) {
    CHECK(patch_iou(a, b) >= 0.2);
    CHECK(a.volume_id == v.id());
    for (const auto* p : {&a, &b}) {
      CHECK(foreground_fraction(extract_resized(v, p->corner, p->size, cfg.crop_size), cfg.air_threshold) >=
            cfg.min_foreground);
      for (int k = 0; k < 3; ++k) {
        CHECK(p->corner[k] >= 0.0);
        CHECK(p->corner[k] + p->size[k] <= static_cast<double>(v.dims()[k]) + 1e-9);
        const double s = p->size[k] / static_cast<double>(cfg.crop_size[k]);
        CHECK((s >= 0.5 - 1e-12 && s <= 2.0 + 1e-12));
      }
    }
  }
  CHECK(sample_anchor_pairs(v, cfg, 5) == pairs);
  CHECK(sample_anchor_pairs(v, cfg, 6) != pairs);

  cfg.p = 5;
  cfg.o = 0.6;
  for (const auto& [a, b] : sample_anchor_pairs(v, cfg, 7)) CHECK(patch_iou(a, b) >= 0.6);
  cfg.o = 0.0;
  CHECK(sample_anchor_pairs(v, cfg, 7).size() == 5);
}

TEST_CASE("anchor pair errors") {
  auto cfg = small_config();
  Volume air({32, 48, 48}, {1, 1, 1}, "air", 0.0f);
  CHECK_THROWS_AS(sample_anchor_pairs(air, cfg, 1), SamplingExhaustedError);
  CHECK_THROWS_AS(sample_anchor_pairs(Volume({3, 48, 48}, {1, 1, 1}, "thin", 1.0f), cfg, 1), ParameterError);
  cfg.p = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.o = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config json round trip") {
  auto c = small_config();
  c.o = 0.35;
  c.n_plus = 3;
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<SamplingConfig>()) == j);
}

TEST_CASE("positive volumes") {
  const Patch anchor{"v0", {4, 4, 4}, {8, 8, 8}};
  std::vector<AffineTransform> ids(10, AffineTransform::identity());
  const auto frames = frames_with(ids);
  CHECK(select_positive_volumes(anchor, frames, 0).empty());

  const auto four = select_positive_volumes(anchor, frames, 4);
  REQUIRE(four.size() == 4);
  std::set<std::string> seen;
  for (const auto& p : four) {
    CHECK(p.volume_id != "v0");
    CHECK(p.corner == anchor.corner);
    CHECK(p.size == anchor.size);
    seen.insert(p.volume_id);
  }
  CHECK(seen.size() == 4);

  std::mt19937_64 rng(3);
  const auto shuffled = select_positive_volumes(anchor, frames, 4, &rng);
  std::set<std::string> ids2;
  for (const auto& p : shuffled) ids2.insert(p.volume_id);
  CHECK(ids2.size() == 4);
  CHECK(!ids2.count("v0"));

  // Out-of-field volumes are skipped; too few left is an availability error.
  std::vector<AffineTransform> mixed(6, AffineTransform::identity());
  mixed[2] = mixed[4] = AffineTransform::translate({100, 0, 0});
  const auto f2 = frames_with(mixed);
  const auto got = select_positive_volumes(anchor, f2, 3);
  for (const auto& p : got) CHECK((p.volume_id != "v2" && p.volume_id != "v4"));
  try {
    select_positive_volumes(anchor, f2, 4);
    FAIL("expected AvailabilityError");
  } catch (const AvailabilityError& e) {
    CHECK(e.usable() == 3);
  }

  const auto pairs = select_corresponding({anchor, Patch{"v0", {6, 6, 6}, {8, 8, 8}}}, frames, 2);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].first.volume_id == pairs[0].second.volume_id);
}

TEST_CASE("strategy names") {
  for (auto s : {StrategyId::kMoco, StrategyId::kG1, StrategyId::kG2, StrategyId::kG3, StrategyId::kL1,
                 StrategyId::kL2, StrategyId::kL3, StrategyId::kL4}) {
    CHECK(parse_strategy(to_string(s)) == s);
  }
  CHECK(parse_strategy("moco") == StrategyId::kMoco);
  CHECK_THROWS_AS(parse_strategy("G4"), ConfigError);
  CHECK(is_global(StrategyId::kG2));
  CHECK_FALSE(is_global(StrategyId::kL2));
}

TEST_CASE("global cohorts") {
  const TemplateFootprint anchor{{0, 0, 0}, {4, 4, 4}};
  const std::vector<double> a{1, 0}, b{0, 1}, c{0.6, 0.8};
  const std::vector<EmbeddingView> pos{b, c};
  MemoryBank bank(8, {2});
  CHECK(build_global_cohorts(StrategyId::kG2, a, pos, anchor, bank.snapshot(), 0.2).negatives.empty());
  CHECK(build_global_cohorts(StrategyId::kG2, a, pos, anchor, bank.snapshot(), 0.2).positives.size() == 3);

  bank.enqueue(bank_with_ious(anchor, {0.0, 0.1, 0.3, 0.9}));
  const auto snap = bank.snapshot();
  const auto moco = build_global_cohorts(StrategyId::kMoco, a, pos, anchor, snap, 0.2);
  CHECK(moco.positives.size() == 2);
  CHECK(moco.positives[1].data() == b.data());
  CHECK(moco.negatives.size() == 4);
  const auto g1 = build_global_cohorts(StrategyId::kG1, a, pos, anchor, snap, 0.2);
  CHECK(g1.positives.size() == 3);
  CHECK(g1.online_count == 3);
  CHECK(g1.negatives.size() == 4);
  const auto g3 = build_global_cohorts(StrategyId::kG3, a, pos, anchor, snap, 0.2);
  CHECK(g3.negatives.size() == 2);
  CHECK(g3.debiased == 2);
  REQUIRE(g3.positives.size() == 5);
  CHECK(g3.positives[3].data() == snap[2]->embedding.data());
  CHECK(g3.positives[4].data() == snap[3]->embedding.data());

  // Nothing to debias: G1 and G2 agree.
  MemoryBank low(8, {2});
  low.enqueue(bank_with_ious(anchor, {0.0, 0.05, 0.1}));
  const auto l1 = build_global_cohorts(StrategyId::kG1, a, pos, anchor, low.snapshot(), 0.2);
  const auto l2 = build_global_cohorts(StrategyId::kG2, a, pos, anchor, low.snapshot(), 0.2);
  CHECK(l1.negatives.size() == l2.negatives.size());
  for (std::size_t i = 0; i < l1.negatives.size(); ++i) CHECK(l1.negatives[i].data() == l2.negatives[i].data());

  CHECK_THROWS_AS(build_global_cohorts(StrategyId::kL1, a, pos, anchor, snap, 0.2), ParameterError);
  CHECK_THROWS_AS(build_global_cohorts(StrategyId::kG1, a, {}, anchor, snap, 0.2), CohortError);
}

TEST_CASE("local cohorts") {
  const TemplateFootprint anchor{{0, 0, 0}, {4, 4, 4}};
  const std::vector<double> a{1, 0}, b{0, 1}, c{0.6, 0.8}, d{0.8, 0.6};
  const std::array<EmbeddingView, 2> own{a, b};
  const std::vector<EmbeddingView> cross{c, d};
  MemoryBank bank(8, {2});
  bank.enqueue(bank_with_ious(anchor, {0.5, 0.6, 0.9}));
  const auto snap = bank.snapshot();
  const auto l1 = build_local_cohorts(StrategyId::kL1, own, cross, anchor, snap, 0.2);
  CHECK(l1.positives.size() == 2);
  CHECK(l1.negatives.size() == 3);
  const auto l2 = build_local_cohorts(StrategyId::kL2, own, cross, anchor, snap, 0.2);
  CHECK(l2.positives.size() == 2);
  CHECK(l2.negatives.empty());
  CHECK(build_local_cohorts(StrategyId::kL3, own, cross, anchor, snap, 0.2).positives.size() == 4);
  const auto l4 = build_local_cohorts(StrategyId::kL4, own, cross, anchor, snap, 0.2);
  CHECK(l4.positives.size() == 7);
  CHECK(l4.online_count == 4);
  CHECK_THROWS_AS(build_local_cohorts(StrategyId::kG3, own, cross, anchor, snap, 0.2), ParameterError);
}

TEST_CASE("cohort set algebra on randomized banks") {
  const auto rep = test::cohort_algebra_check(21, 1000);
  CHECK(rep.trials == 1000);
  CHECK(rep.violations == 0);
}

TEST_CASE("overlap logits") {
  const Patch own{"v", {0, 0, 0}, {8, 8, 8}}, other{"v", {4, 2, 0}, {8, 8, 8}};
  const auto r = overlap_region(own, other, {4, 4, 4});
  CHECK(r.lo == std::array<std::int64_t, 3>{2, 1, 0});
  CHECK(r.size == std::array<std::int64_t, 3>{2, 3, 4});
  CHECK_THROWS_AS(overlap_region(own, Patch{"v", {8, 0, 0}, {2, 2, 2}}, {4, 4, 4}), GeometryError);

  std::mt19937_64 rng(4);
  const auto z = test::random_tensor(rng, 3, 4, 4, 4);
  const auto sub = extract_overlap_logits(z, own, other);
  CHECK(sub.channels() == 3);
  CHECK(sub.depth() == 2);
  CHECK(sub.at(1, 0, 0, 0) == z.at(1, 2, 1, 0));
  CHECK(sub.at(2, 1, 2, 3) == z.at(2, 3, 3, 3));

  // Overlap of a crop with itself is the whole grid.
  const auto whole = overlap_region(own, own, {4, 4, 4});
  CHECK(whole.size == std::array<std::int64_t, 3>{4, 4, 4});
}

TEST_CASE("extract_patch") {
  const auto v = normalized_phantom(2, {16, 16, 16});
  const auto t = extract_patch(v, Patch{v.id(), {2, 2, 2}, {8, 8, 8}}, {4, 4, 4});
  CHECK(t.channels() == 1);
  CHECK(t.depth() == 4);
  CHECK(t.width() == 4);
}
