#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "spade/errors.hpp"
#include "spade/volume.hpp"
#include "support.hpp"

using namespace spade;

namespace {

Volume random_volume(std::mt19937_64& rng, Dims dims, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Volume v(dims, {1.0, 1.0, 1.0}, "r");
  for (auto& x : v.data()) x = static_cast<float>(u(rng));
  return v;
}

// Plain 1D linear interpolation with edge clamping.
double interp1(const std::vector<double>& f, double x) {
  const double n = static_cast<double>(f.size());
  x = std::clamp(x, 0.0, n - 1.0);
  const auto i = static_cast<std::size_t>(std::floor(x));
  if (i + 1 >= f.size()) return f.back();
  const double a = x - static_cast<double>(i);
  return (1.0 - a) * f[i] + a * f[i + 1];
}

}  // namespace

TEST_CASE("volume construction checks") {
  CHECK_THROWS_AS(Volume({0, 2, 2}, {1, 1, 1}, "x"), ParameterError);
  CHECK_THROWS_AS(Volume({2, 2, 2}, {1, 0, 1}, "x"), ParameterError);
  CHECK_THROWS_AS(Volume({2, 2, 2}, {1, 1, 1}, "x", std::vector<float>(7)), ShapeError);
  Volume v({2, 3, 4}, {1, 1, 1}, "x");
  v.at(1, 2, 3) = 5.0f;
  CHECK(v.data()[23] == 5.0f);
}

TEST_CASE("phantoms") {
  PhantomSpec s;
  s.seed = 1;
  s.size = {16, 20, 24};
  const auto a = generate_phantom(s), b = generate_phantom(s);
  CHECK(a == b);
  CHECK(a.dims() == Dims{16, 20, 24});
  for (float x : a.data()) CHECK_FALSE(!std::isfinite(x));
  s.seed = 2;
  CHECK(generate_phantom(s).data().size() == a.data().size());
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), generate_phantom(s).data().begin()));

  s.num_blobs = 0;
  const auto flat = generate_phantom(s);
  for (float x : flat.data()) CHECK(x == static_cast<float>(kAirHu));

  s.size = {7, 16, 16};
  CHECK_THROWS_AS(generate_phantom(s), ParameterError);
}

TEST_CASE("clip_normalize") {
  Volume v({1, 1, 5}, {1, 1, 1}, "c", std::vector<float>{-3000, -1000, 0, 1000, 2500});
  const auto n = clip_normalize(v, -1000, 1000);
  const std::vector<float> expected{0.0f, 0.0f, 0.5f, 1.0f, 1.0f};
  CHECK(std::vector<float>(n.data().begin(), n.data().end()) == expected);
  CHECK_THROWS_AS(clip_normalize(v, 1.0, 1.0), ParameterError);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = clip_normalize(random_volume(rng, {3, 4, 5}, -2000, 2000), -1000, 1000);
    for (float x : r.data()) CHECK((x >= 0.0f && x <= 1.0f));
    CHECK(clip_normalize(r, 0.0, 1.0) == r);
  }
}

TEST_CASE("resample") {
  std::mt19937_64 rng(2);
  const auto r = random_volume(rng, {4, 5, 6}, 0, 1);
  const auto same = resample(r, {1, 1, 1});
  CHECK(same == r);

  Volume c({6, 8, 10}, {1, 1, 1}, "c", 3.25f);
  for (const Vec3d f : {Vec3d{0.5, 0.5, 0.5}, Vec3d{2, 1.5, 0.3}, Vec3d{1.7, 0.25, 3}}) {
    const auto down = resample(c, f);
    for (float x : down.data()) CHECK(x == 3.25f);
    const auto back = resample(down, {1.0 / f[0], 1.0 / f[1], 1.0 / f[2]});
    for (float x : back.data()) CHECK(x == 3.25f);
  }

  Volume ramp({1, 1, 8}, {1, 1, 1}, "ramp");
  std::vector<double> f(8);
  for (int i = 0; i < 8; ++i) ramp.at(0, 0, i) = static_cast<float>(f[i] = i);
  const auto half = resample(ramp, {1, 1, 0.5});
  REQUIRE(half.dims() == Dims{1, 1, 4});
  CHECK(half.spacing()[2] == 2.0);
  for (int q = 0; q < 4; ++q) CHECK(half.at(0, 0, q) == doctest::Approx(interp1(f, (q + 0.5) / 0.5 - 0.5)));
  const auto up = resample(ramp, {1, 1, 2});
  for (int q = 0; q < 16; ++q) CHECK(up.at(0, 0, q) == doctest::Approx(interp1(f, (q + 0.5) / 2.0 - 0.5)));

  CHECK_THROWS_AS(resample(r, {1, 0, 1}), ParameterError);
  CHECK_THROWS_AS(resample(r, {1, 1, 0.01}), ParameterError);
}

TEST_CASE("crop_background") {
  Volume v({6, 7, 8}, {1, 1, 1}, "v", -1000.0f);
  auto whole = crop_background(v, -350);
  CHECK(whole.volume == v);
  CHECK(whole.offset == Dims{0, 0, 0});

  v.at(2, 3, 4) = 10.0f;
  auto one = crop_background(v, -350);
  CHECK(one.volume.dims() == Dims{1, 1, 1});
  CHECK(one.offset == Dims{2, 3, 4});

  Volume hot({3, 3, 3}, {1, 1, 1}, "h", 5.0f);
  CHECK(crop_background(hot, 0).volume == hot);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto r = random_volume(rng, {7, 6, 9}, -1000, -900);
    std::uniform_int_distribution<int> k(0, 5);
    for (int i = 0; i < 3; ++i) r.at(k(rng), k(rng), k(rng)) = 100.0f;
    const auto c = crop_background(r, -350);
    // Exhaustive scan oracle for the tight box.
    Dims lo{99, 99, 99}, hi{-1, -1, -1};
    for (int d = 0; d < 7; ++d)
      for (int h = 0; h < 6; ++h)
        for (int w = 0; w < 9; ++w)
          if (r.at(d, h, w) > -350) {
            const Dims p{d, h, w};
            for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]), hi[a] = std::max(hi[a], p[a]);
          }
    CHECK(c.offset == lo);
    CHECK(c.volume.dims() == Dims{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1});
    const auto& cd = c.volume.dims();
    for (int d = 0; d < cd[0]; ++d)
      for (int h = 0; h < cd[1]; ++h)
        for (int w = 0; w < cd[2]; ++w) CHECK(c.volume.at(d, h, w) == r.at(lo[0] + d, lo[1] + h, lo[2] + w));
  }
}

TEST_CASE("trilinear sampling") {
  std::mt19937_64 rng(4);
  const auto r = random_volume(rng, {4, 5, 6}, 0, 1);
  CHECK(sample_trilinear(r, {1, 2, 3}) == doctest::Approx(r.at(1, 2, 3)));
  CHECK(sample_trilinear(r, {-5, 2, 3}) == doctest::Approx(r.at(0, 2, 3)));
  CHECK(sample_trilinear(r, {1, 2, 40}) == doctest::Approx(r.at(1, 2, 5)));
  const double mid = sample_trilinear(r, {1.5, 2, 3});
  CHECK(mid == doctest::Approx(0.5 * (r.at(1, 2, 3) + r.at(2, 2, 3))));

  std::uniform_real_distribution<double> u(0.2, 2.8);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3d p{u(rng), u(rng) * 1.3, u(rng) * 1.6};
    Vec3d g{};
    const double val = sample_trilinear_grad(r, p, g);
    CHECK(val == doctest::Approx(sample_trilinear(r, p)));
    const auto numeric = test::numeric_gradient(
        [&](std::span<const double> x) { return sample_trilinear(r, {x[0], x[1], x[2]}); }, {p[0], p[1], p[2]},
        {0, 1, 2});
    CHECK(test::relative_error(g, numeric) <= 1e-6);
  }
}

TEST_CASE("crop and extract_resized") {
  std::mt19937_64 rng(5);
  const auto r = random_volume(rng, {6, 6, 6}, 0, 1);
  const auto c = crop(r, {1, 2, 3}, {2, 3, 3});
  CHECK(c.at(1, 2, 2) == r.at(2, 4, 5));
  CHECK_THROWS_AS(crop(r, {5, 0, 0}, {2, 1, 1}), GeometryError);

  // A unit-cell extraction at native size is an integer crop.
  CHECK(extract_resized(r, {1, 2, 3}, {2, 3, 3}, {2, 3, 3}).data().size() == c.data().size());
  const auto e = extract_resized(r, {1, 2, 3}, {2, 3, 3}, {2, 3, 3});
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(e.data()[i] == doctest::Approx(c.data()[i]));
  CHECK_THROWS_AS(extract_resized(r, {0, 0, 0}, {0, 1, 1}, {1, 1, 1}), ParameterError);
}

TEST_CASE("svol round trip") {
  std::mt19937_64 rng(6);
  auto r = random_volume(rng, {3, 4, 5}, -1000, 1000);
  r.set_id("case_7");
  const auto path = std::filesystem::temp_directory_path() / "spade_vol_test.svol";
  write_svol(r, path);
  CHECK(read_svol(path) == r);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  const auto j = nlohmann::json::parse(header);
  CHECK(j.at("dtype") == "f32");
  CHECK(j.at("dims") == nlohmann::json::array({3, 4, 5}));
  CHECK(std::filesystem::file_size(path) == header.size() + 1 + 60 * 4);

  {
    std::ofstream bad(path);
    bad << "{\"dims\":[1,1,2],\"spacing\":[1,1,1],\"dtype\":\"f64\",\"id\":\"x\"}\n";
  }
  CHECK_THROWS_AS(read_svol(path), DataError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_svol(path), DataError);
}
