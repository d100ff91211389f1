#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "spade/augment.hpp"
#include "spade/layers.hpp"
#include "spade/network.hpp"
#include "spade/sampling.hpp"
#include "support.hpp"

using namespace spade;
using test::relative_error;

namespace {

ModelConfig small_model(int kernel = 3) {
  ModelConfig c;
  c.kernel = kernel;
  c.enc1_channels = 3;
  c.enc2_channels = 4;
  c.local_channels = 4;
  c.global_hidden = 6;
  c.global_dim = 8;
  c.local_hidden = 5;
  c.local_dim = 6;
  return c;
}

// Zero-initialised biases can leave ReLU inputs exactly on the kink, where
// central differences are meaningless.
std::vector<double> jittered_params(const Network& net, std::uint64_t seed) {
  auto p = net.init_params(seed);
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (auto& v : p) v += u(rng);
  return p;
}

double global_objective(const Network& net, std::span<const double> p, const Tensor& x, const std::vector<double>& c) {
  const auto e = forward_global(net, p, x);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * e.values[i];
  return s;
}

double local_objective(const Network& net, std::span<const double> p, const Tensor& x, const std::vector<double>& c) {
  const auto e = forward_local(net, p, x);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * e.embedding.values[i];
  return s;
}

}  // namespace

TEST_CASE("global embedding has the configured length and unit norm") {
  const Network net;  // default widths: 128-d global, 64x3x3 local
  const auto p = net.init_params(1);
  std::mt19937_64 rng(2);
  const auto x = test::random_tensor(rng, 1, 8, 16, 16);
  const auto g = forward_global(net, p, x);
  REQUIRE(g.values.size() == 128);
  double n = 0.0;
  for (double v : g.values) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));

  const auto l = forward_local(net, p, x);
  CHECK(l.embedding.shape == std::vector<std::int64_t>{64, 3, 3});
  CHECK(l.embedding.values.size() == 576);
  CHECK(l.z.shape == std::array<std::int64_t, 4>{8, 8, 16, 16});
  n = 0.0;
  for (double v : l.embedding.values) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zeroed final global projection cannot be normalized") {
  const Network net(small_model());
  auto p = net.init_params(3);
  for (const char* name : {"glob2.weight", "glob2.bias"}) {
    const auto& b = net.block(name);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(b.offset),
              p.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size), 0.0);
  }
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(forward_global(net, p, test::random_tensor(rng, 1, 4, 6, 6)), DegenerateInputError);
}

TEST_CASE("mis-shaped inputs are rejected") {
  const Network net(small_model());
  const auto p = net.init_params(5);
  std::mt19937_64 rng(6);
  CHECK_THROWS_AS(forward_global(net, p, test::random_tensor(rng, 2, 4, 6, 6)), ShapeError);
  CHECK_THROWS_AS(forward_global(net, p, test::random_tensor(rng, 1, 3, 6, 6)), ShapeError);
  std::vector<double> short_params(p.begin(), p.end() - 1);
  CHECK_THROWS_AS(forward_global(net, short_params, test::random_tensor(rng, 1, 4, 6, 6)), ShapeError);
}

TEST_CASE("constant patch through a pointwise network gives spatially constant logits") {
  const Network net(small_model(1));
  const auto p = net.init_params(7);
  const Tensor x(1, 4, 6, 6, 0.37);
  const auto l = forward_local(net, p, x);
  for (std::int64_t c = 0; c < l.z.channels(); ++c) {
    const auto ch = l.z.channel(c);
    for (double v : ch) CHECK(v == ch[0]);
  }
}

TEST_CASE("global embedding gradient matches central differences") {
  const Network net(small_model());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = jittered_params(net, seed + 100);
    const auto x = test::random_tensor(rng, 1, 4, 6, 6);
    const auto c = test::random_unit(rng, 8);

    std::vector<double> grad(net.num_params(), 0.0);
    const auto trunk = net.forward_trunk(p, x, false);
    const auto head = net.forward_global_head(p, trunk.f);
    const Tensor df = net.backward_global_head(p, head, c, grad);
    net.backward_trunk(p, trunk, &df, nullptr, grad);

    const auto coords = net.trainable_indices();
    const auto numeric = test::numeric_gradient(
        [&](std::span<const double> q) { return global_objective(net, q, x, c); }, p, coords);
    CHECK(relative_error(test::pick(grad, coords), numeric) <= 1e-4);
  }
}

TEST_CASE("local embedding and reconstruction gradients match central differences") {
  const Network net(small_model());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 50);
    const auto p = jittered_params(net, seed + 200);
    const auto x = test::random_tensor(rng, 1, 4, 6, 6);
    const auto c = test::random_unit(rng, 6 * 3 * 3);

    std::vector<double> grad(net.num_params(), 0.0);
    const auto trunk = net.forward_trunk(p, x, true);
    const auto head = net.forward_local_head(p, trunk.z);
    const Tensor dz = net.backward_local_head(p, head, c, grad);
    net.backward_trunk(p, trunk, nullptr, &dz, grad);
    const auto coords = net.trainable_indices();
    const auto numeric = test::numeric_gradient(
        [&](std::span<const double> q) { return local_objective(net, q, x, c); }, p, coords);
    CHECK(relative_error(test::pick(grad, coords), numeric) <= 1e-4);

    // Reconstruction: objective sum(w * sigmoid(recon)).
    const auto w = test::random_tensor(rng, 1, 4, 6, 6, -1.0, 1.0);
    std::vector<double> rgrad(net.num_params(), 0.0);
    const auto out = net.forward_reconstruction(p, trunk.z);
    const Tensor dz_r = net.backward_reconstruction(p, trunk.z, out, w, rgrad);
    net.backward_trunk(p, trunk, nullptr, &dz_r, rgrad);
    const auto rnum = test::numeric_gradient(
        [&](std::span<const double> q) {
          const auto t = net.forward_trunk(q, x, true);
          const auto o = net.forward_reconstruction(q, t.z);
          double s = 0.0;
          for (std::size_t i = 0; i < o.size(); ++i) s += w.data[i] * o.data[i];
          return s;
        },
        p, coords);
    CHECK(relative_error(test::pick(rgrad, coords), rnum) <= 1e-4);
  }
}

TEST_CASE("running head statistics") {
  const Network net(small_model());
  auto p = net.init_params(9);
  const auto mean = net.block("glob.mean"), var = net.block("glob.var");
  CHECK_FALSE(mean.trainable);
  CHECK(p[mean.offset] == 0.0);
  CHECK(p[var.offset] == 1.0);
  CHECK(net.trainable_indices().size() == net.num_params() - 2 * 4 - 2 * 4);

  // Two samples per channel: mean (1 + 3) / 2 = 2, variance 1.
  std::vector<std::vector<double>> g{std::vector<double>(4, 1.0), std::vector<double>(4, 3.0)};
  Tensor cell(4, 1, 3, 3, 5.0);
  net.update_head_stats(p, g, {cell}, 0.25);
  CHECK(p[mean.offset + 2] == doctest::Approx(0.5));
  CHECK(p[var.offset + 2] == doctest::Approx(0.75 + 0.25));
  CHECK(p[net.block("loc.mean").offset] == doctest::Approx(1.25));
  CHECK(p[net.block("loc.var").offset] == doctest::Approx(0.75));

  // Statistics never receive gradient.
  std::mt19937_64 rng(10);
  const auto x = test::random_tensor(rng, 1, 4, 6, 6);
  std::vector<double> grad(net.num_params(), 0.0);
  const auto trunk = net.forward_trunk(p, x, false);
  const auto head = net.forward_global_head(p, trunk.f);
  net.backward_global_head(p, head, test::random_unit(rng, 8), grad);
  for (std::size_t i = 0; i < mean.size; ++i) CHECK(grad[mean.offset + i] == 0.0);

  // Untouched statistics leave the head input unchanged.
  const auto fresh = net.init_params(9);
  const auto h0 = net.forward_global_head(fresh, trunk.f);
  for (std::size_t c = 0; c < h0.pooled.size(); ++c) CHECK(h0.scaled[c] == doctest::Approx(h0.pooled[c]).epsilon(1e-5));
}

TEST_CASE("spatial augmentations invert exactly") {
  std::mt19937_64 rng(11);
  const auto x = test::random_tensor(rng, 2, 4, 6, 6);
  CHECK(apply_spatial(x, {}) == x);
  SpatialAug fx{{false, false, true}, 0};
  CHECK(apply_spatial(apply_spatial(x, fx), fx) == x);
  for (int mask = 0; mask < 8; ++mask) {
    for (int r = 0; r < 4; ++r) {
      const SpatialAug a{{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0}, r};
      CHECK(invert_spatial(apply_spatial(x, a), a) == x);
    }
  }
  // Four quarter-turns are the identity and one turn is not.
  SpatialAug one{{false, false, false}, 1};
  Tensor y = x;
  for (int i = 0; i < 4; ++i) y = apply_spatial(y, one);
  CHECK(y == x);
  CHECK_FALSE(apply_spatial(x, one) == x);
}

TEST_CASE("quarter-turn moves voxels as a rotation in the height/width plane") {
  Tensor x(1, 1, 3, 3);
  x.at(0, 0, 0, 2) = 1.0;  // top-right corner
  const auto y = apply_spatial(x, {{false, false, false}, 1});
  double sum = 0.0;
  for (double v : y.data) sum += v;
  CHECK(sum == 1.0);
  CHECK(y.at(0, 0, 0, 2) == 0.0);
  // Corners map to corners.
  CHECK(y.at(0, 0, 0, 0) + y.at(0, 0, 2, 2) + y.at(0, 0, 2, 0) == 1.0);
}

TEST_CASE("odd quarter-turn on a non-square plane is a shape error") {
  const Tensor x(1, 2, 4, 6);
  CHECK_THROWS_AS(apply_spatial(x, {{false, false, false}, 1}), ShapeError);
  CHECK_NOTHROW(apply_spatial(x, {{true, false, true}, 2}));
}

TEST_CASE("pointwise-pooling encoder is exactly equivariant for all flips and quarter-turns") {
  const Network net(small_model(1));
  const auto p = net.init_params(13);
  std::mt19937_64 rng(14);
  const auto x = test::random_tensor(rng, 1, 4, 8, 8);
  const auto plain = forward_local(net, p, x);
  const auto plain_g = forward_global(net, p, x);
  int checked = 0;
  for (int mask = 0; mask < 8; ++mask) {
    for (int r = 0; r < 4; ++r) {
      const SpatialAug a{{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0}, r};
      const auto aug = forward_local(net, p, apply_spatial(x, a));
      CHECK(invert_spatial(aug.z, a) == plain.z);
      CHECK(forward_global(net, p, apply_spatial(x, a)).values == plain_g.values);
      ++checked;
    }
  }
  CHECK(checked == 32);
}

TEST_CASE("intensity augmentations") {
  std::mt19937_64 rng(21);
  const auto x = test::random_tensor(rng, 1, 4, 6, 6);
  IntensityAug noise{IntensityKind::kGaussianNoise};
  noise.sigma = 0.0;
  CHECK(apply_intensity(x, noise) == x);
  IntensityAug ss{IntensityKind::kShiftScale};
  CHECK(apply_intensity(x, ss) == x);

  Tensor half(1, 1, 1, 1, 0.5);
  IntensityAug gamma{IntensityKind::kGamma};
  gamma.gamma = 2.0;
  CHECK(apply_intensity(half, gamma).data[0] == doctest::Approx(0.25).epsilon(1e-15));

  IntensityAug shuffle{IntensityKind::kLocalShuffle};
  shuffle.window = 2;
  shuffle.seed = 5;
  const auto s = apply_intensity(x, shuffle);
  CHECK(s.shape == x.shape);
  // Values only move inside their 2x2x2 window.
  for (std::int64_t d = 0; d < 4; d += 2) {
    for (std::int64_t h = 0; h < 6; h += 2) {
      for (std::int64_t w = 0; w < 6; w += 2) {
        std::vector<double> a, b;
        for (int i = 0; i < 8; ++i) {
          a.push_back(x.at(0, d + (i >> 2), h + ((i >> 1) & 1), w + (i & 1)));
          b.push_back(s.at(0, d + (i >> 2), h + ((i >> 1) & 1), w + (i & 1)));
        }
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
      }
    }
  }
  CHECK(apply_intensity(x, shuffle) == s);
}

TEST_CASE("monotone intensity augmentations keep a single peak in place and stay in [0, 1]") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x(1, 4, 6, 6, 0.1);
    const auto at = std::uniform_int_distribution<std::size_t>(0, x.size() - 1)(rng);
    x.data[at] = 0.6;
    IntensityAug a = random_intensity(rng);
    if (a.kind == IntensityKind::kLocalShuffle) a.kind = IntensityKind::kGamma;
    a.sigma = 0.01;
    const auto y = apply_intensity(x, a);
    CHECK(y.shape == x.shape);
    for (double v : y.data) CHECK((v >= 0.0 && v <= 1.0));
    const auto arg = static_cast<std::size_t>(std::max_element(y.data.begin(), y.data.end()) - y.data.begin());
    CHECK(arg == at);
  }
}

TEST_CASE("momentum update") {
  const std::vector<double> theta{0.0, 2.0, -1.0}, eps{1.0, 1.0, 1.0};
  CHECK(momentum_update(theta, eps, 0.0) == theta);
  CHECK(momentum_update(theta, eps, 1.0) == eps);
  CHECK(momentum_update(theta, eps, 0.99)[0] == doctest::Approx(0.99).epsilon(1e-15));
  CHECK_THROWS_AS(momentum_update(theta, std::vector<double>{1.0}, 0.5), ShapeError);
  CHECK_THROWS_AS(momentum_update(theta, eps, 1.5), ParameterError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const Network net(small_model());
  ModelParams p;
  p.theta = net.init_params(1);
  p.epsilon = net.init_params(2);
  for (auto& v : p.theta) v = static_cast<float>(v);
  for (auto& v : p.epsilon) v = static_cast<float>(v);
  const auto path = std::filesystem::temp_directory_path() / "spade_ckpt_test.bin";
  save_checkpoint(net, p, path, {{"step", 3}});
  const auto ck = load_checkpoint(path);
  CHECK(ck.config == net.config());
  CHECK(ck.params.theta == p.theta);
  CHECK(ck.params.epsilon == p.epsilon);
  CHECK(ck.header.at("step") == 3);
  std::filesystem::remove(path);
}

TEST_CASE("overlap logits") {
  const Tensor z = [] {
    Tensor t(2, 4, 8, 8);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<double>(i);
    return t;
  }();
  const Patch own{"v", {0, 0, 0}, {4, 8, 8}};
  CHECK(extract_overlap_logits(z, own, own) == z);

  // Other patch covers the width half x >= 4.
  const Patch half{"v", {0, 0, 4}, {4, 8, 8}};
  const auto h = extract_overlap_logits(z, own, half);
  CHECK(h.shape == std::array<std::int64_t, 4>{2, 4, 8, 4});
  CHECK(h.at(1, 2, 3, 0) == z.at(1, 2, 3, 4));

  // Sharing exactly one voxel column along width.
  const Patch column{"v", {0, 0, 7}, {4, 8, 8}};
  const auto c = extract_overlap_logits(z, own, column);
  CHECK(c.shape == std::array<std::int64_t, 4>{2, 4, 8, 1});
  CHECK(c.at(0, 1, 1, 0) == z.at(0, 1, 1, 7));

  // Patches at half resolution: a 2-voxel overlap maps to 4 logit columns.
  const Patch coarse{"v", {0, 0, 0}, {2, 4, 4}};
  const Patch shifted{"v", {0, 0, 2}, {2, 4, 4}};
  CHECK(extract_overlap_logits(z, coarse, shifted).width() == 4);

  const Patch far{"v", {0, 0, 20}, {4, 8, 8}};
  CHECK_THROWS_AS(extract_overlap_logits(z, own, far), GeometryError);
}
