#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "spade/tensor.hpp"

namespace spade::test {

inline std::vector<double> random_unit(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = g(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w,
                            double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(c, d, h, w);
  for (auto& x : t.data) x = u(rng);
  return t;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Central differences of f at x for the listed coordinates.
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> x, const std::vector<std::size_t>& coords,
                                            double step = 1e-5) {
  std::vector<double> g;
  g.reserve(coords.size());
  for (auto i : coords) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    g.push_back((up - down) / (2.0 * step));
  }
  return g;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

inline std::vector<std::size_t> sample_coords(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  auto c = all_coords(n);
  std::shuffle(c.begin(), c.end(), rng);
  c.resize(std::min(k, n));
  std::sort(c.begin(), c.end());
  return c;
}

/// k distinct members of `pool`, in ascending order.
inline std::vector<std::size_t> pick_indices(std::mt19937_64& rng, std::vector<std::size_t> pool, std::size_t k) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(k, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<double> pick(std::span<const double> v, const std::vector<std::size_t>& coords) {
  std::vector<double> out;
  for (auto i : coords) out.push_back(v[i]);
  return out;
}

}  // namespace spade::test
