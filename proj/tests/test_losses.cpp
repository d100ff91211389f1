#include <cmath>

#include "doctest.h"
#include "spade/losses.hpp"
#include "support.hpp"

using namespace spade;
using test::relative_error;

namespace {

std::vector<EmbeddingView> views(const std::vector<std::vector<double>>& v) {
  return {v.begin(), v.end()};
}

std::vector<std::vector<double>> units(std::mt19937_64& rng, std::size_t count, std::size_t dim) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(test::random_unit(rng, dim));
  return out;
}

}  // namespace

TEST_CASE("nce scalar cases") {
  const std::vector<double> e0{1.0, 0.0}, e1{0.0, 1.0};
  std::vector<EmbeddingView> none;
  CHECK(nce_loss(e0, e0, none, 0.2).loss == 0.0);

  // Positive and negative equally similar: ln 2 whatever tau is.
  std::vector<EmbeddingView> same{e0};
  for (double tau : {0.05, 0.2, 1.0, 7.0}) CHECK(std::abs(nce_loss(e0, e0, same, tau).loss - std::log(2.0)) <= 1e-12);

  std::vector<EmbeddingView> ortho{e1};
  CHECK(std::abs(nce_loss(e0, e0, ortho, 1.0).loss - 0.31326168751822286) <= 1e-9);
}

TEST_CASE("nce is decreasing in the positive similarity and increasing in negative similarity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto v = test::random_unit(rng, 16);
    auto vp = test::random_unit(rng, 16);
    auto negs = units(rng, 5, 16);
    const auto nv = views(negs);
    const double base = nce_loss(v, vp, nv, 0.2).loss;
    // Moving v+ toward v raises v.v+.
    std::vector<double> closer(16);
    for (int i = 0; i < 16; ++i) closer[i] = vp[i] + 0.1 * v[i];
    CHECK(nce_loss(v, closer, nv, 0.2).loss < base);
    // Moving one negative toward v raises v.v-.
    auto negs2 = negs;
    for (int i = 0; i < 16; ++i) negs2[2][i] += 0.1 * v[i];
    CHECK(nce_loss(v, vp, views(negs2), 0.2).loss > base);
  }
}

TEST_CASE("nce is stable for large similarity offsets") {
  // A tiny temperature pushes every exponent far beyond double range.
  const std::vector<double> v{1.0, 0.0}, vp{0.8, 0.6}, n1{0.6, 0.8}, n2{0.0, 1.0};
  std::vector<EmbeddingView> negs{n1, n2};
  const double tau = 1e-3;
  const double sp = 0.8 / tau, s1 = 0.6 / tau, s2 = 0.0;
  const double expected = std::log1p(std::exp(s1 - sp) + std::exp(s2 - sp));
  const double got = nce_loss(v, vp, negs, tau).loss;
  CHECK(std::isfinite(got));
  CHECK(std::abs(got - expected) <= 1e-9);

  // The loss depends on similarity differences only: compare against a direct
  // evaluation at a modest temperature.
  const double t2 = 0.5;
  const double direct = -std::log(std::exp(0.8 / t2) / (std::exp(0.8 / t2) + std::exp(0.6 / t2) + std::exp(0.0)));
  CHECK(std::abs(nce_loss(v, vp, negs, t2).loss - direct) <= 1e-12);
}

TEST_CASE("con scalar cases and pair counting") {
  const std::vector<double> u{1.0, 0.0}, w{0.0, 1.0};
  std::vector<EmbeddingView> pair{u, u}, none, ortho{w};
  CHECK(con_loss(pair, none, 0.2).loss == 0.0);
  CHECK(std::abs(con_loss(pair, ortho, 1.0).loss - 0.31326168751822286) <= 1e-9);

  std::mt19937_64 rng(4);
  const auto p3 = units(rng, 3, 8);
  const auto r = con_loss(views(p3), none, 0.2);
  CHECK(r.pairs == 3);
  CHECK(r.terms == 6);

  std::vector<EmbeddingView> one{u};
  CHECK_THROWS_AS(con_loss(one, none, 0.2), CohortError);
}

TEST_CASE("con equals the explicit sum of directed nce terms") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pos = units(rng, 5, 12);
    const auto neg = units(rng, 7, 12);
    const auto nv = views(neg);
    double sum = 0.0;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      for (std::size_t j = i + 1; j < pos.size(); ++j) {
        sum += nce_loss(pos[i], pos[j], nv, 0.2).loss + nce_loss(pos[j], pos[i], nv, 0.2).loss;
      }
    }
    CHECK(std::abs(con_loss(views(pos), nv, 0.2).loss - sum / 5.0) <= 1e-12);
    CHECK(std::abs(con_loss(views(pos), nv, 0.2, ConNormalization::kPairs).loss - sum / 10.0) <= 1e-12);
  }
}

TEST_CASE("con is symmetric under permutations of the positives") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto pos = units(rng, 6, 10);
    const auto neg = units(rng, 9, 10);
    const double a = con_loss(views(pos), views(neg), 0.2).loss;
    std::shuffle(pos.begin(), pos.end(), rng);
    CHECK(std::abs(con_loss(views(pos), views(neg), 0.2).loss - a) <= 1e-12);
  }
}

TEST_CASE("nce gradients match central differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = trial % 2 == 0 ? 16 : 64 * 9;  // global-sized and flattened local-sized
    const auto v = test::random_unit(rng, dim);
    const auto vp = test::random_unit(rng, dim);
    const auto negs = units(rng, 6, dim);
    const auto nv = views(negs);
    const auto r = nce_loss(v, vp, nv, 0.2);
    const auto coords = test::all_coords(dim);
    const auto gv = test::numeric_gradient([&](std::span<const double> x) { return nce_loss(x, vp, nv, 0.2).loss; },
                                           v, coords);
    const auto gp = test::numeric_gradient([&](std::span<const double> x) { return nce_loss(v, x, nv, 0.2).loss; },
                                           vp, coords);
    CHECK(relative_error(r.grad_v, gv) <= 1e-4);
    CHECK(relative_error(r.grad_v_plus, gp) <= 1e-4);
  }
}

TEST_CASE("con gradients match central differences, with and without a gradient mask") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t dim = trial % 2 == 0 ? 8 : 36;
    auto pos = units(rng, 4, dim);
    const auto neg = units(rng, trial % 3 == 0 ? 0 : 5, dim);
    const auto nv = views(neg);
    const std::vector<bool> mask{true, false, true, true};
    for (const auto norm : {ConNormalization::kPositives, ConNormalization::kPairs}) {
      const auto full = con_loss(views(pos), nv, 0.2, norm);
      const auto masked = con_loss(views(pos), nv, 0.2, norm, mask);
      CHECK(masked.grads[1].empty());
      for (std::size_t k = 0; k < pos.size(); ++k) {
        const auto numeric = test::numeric_gradient(
            [&](std::span<const double> x) {
              auto q = pos;
              q[k].assign(x.begin(), x.end());
              return con_loss(views(q), nv, 0.2, norm).loss;
            },
            pos[k], test::all_coords(dim));
        CHECK(relative_error(full.grads[k], numeric) <= 1e-4);
        if (mask[k]) CHECK(relative_error(masked.grads[k], numeric) <= 1e-12 + relative_error(full.grads[k], numeric));
      }
    }
  }
}

TEST_CASE("reconstruction loss") {
  std::mt19937_64 rng(9);
  const auto t = test::random_tensor(rng, 1, 3, 4, 5);
  CHECK(recon_loss(t, t).loss == 0.0);
  Tensor o = t;
  for (auto& x : o.data) x += 0.5;
  CHECK(std::abs(recon_loss(t, o).loss - 0.25) <= 1e-15);
  const auto r = recon_loss(t, o);
  CHECK(r.grad.data[7] == doctest::Approx(2.0 * 0.5 / 60.0));

  const auto out = test::random_tensor(rng, 1, 3, 4, 5);
  const auto numeric = test::numeric_gradient(
      [&](std::span<const double> x) {
        Tensor y = out;
        y.data.assign(x.begin(), x.end());
        return recon_loss(t, y).loss;
      },
      out.data, test::all_coords(out.size()));
  CHECK(relative_error(recon_loss(t, out).grad.data, numeric) <= 1e-4);
  CHECK_THROWS_AS(recon_loss(t, Tensor(1, 3, 4, 4)), ShapeError);
}

TEST_CASE("total loss") {
  LossConfig c;
  CHECK(total_loss(2.0, 4.0, 0.1, c) == doctest::Approx(4.0).epsilon(1e-15));
  c.lambda = 1.0;
  CHECK(total_loss(2.0, 1e6, 0.0, c) == 2.0);
  c.lambda = 0.5;
  c.lambda_r = 0.0;
  CHECK(total_loss(2.0, 4.0, 123.0, c) == 3.0);
  CHECK_THROWS_WITH_AS(total_loss(NAN, 1.0, 1.0, c), "global contrastive loss is not finite", NumericalError);
  CHECK_THROWS_WITH_AS(total_loss(1.0, INFINITY, 1.0, c), "local contrastive loss is not finite", NumericalError);
  CHECK_THROWS_WITH_AS(total_loss(1.0, 1.0, NAN, c), "reconstruction loss is not finite", NumericalError);

  LossConfig d;
  const auto f = [&](std::span<const double> x) { return total_loss(x[0], x[1], x[2], d); };
  const auto g = test::numeric_gradient(f, {1.5, 2.5, 0.3}, {0, 1, 2});
  const std::vector<double> expected{d.lambda, 1.0 - d.lambda, d.lambda_r};
  CHECK(relative_error(expected, g) <= 1e-9);

  LossConfig bad;
  bad.tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
