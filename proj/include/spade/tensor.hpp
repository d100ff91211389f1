#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "spade/errors.hpp"
#include "spade/volume.hpp"

namespace spade {

/// Channels x depth x height x width, f64, width fastest.
struct Tensor {
  std::array<std::int64_t, 4> shape{0, 0, 0, 0};
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, double fill = 0.0)
      : shape{c, d, h, w}, data(static_cast<std::size_t>(c * d * h * w), fill) {}

  std::int64_t channels() const { return shape[0]; }
  std::int64_t depth() const { return shape[1]; }
  std::int64_t height() const { return shape[2]; }
  std::int64_t width() const { return shape[3]; }
  std::int64_t spatial() const { return shape[1] * shape[2] * shape[3]; }
  std::size_t size() const { return data.size(); }

  std::size_t index(std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>(((c * shape[1] + d) * shape[2] + h) * shape[3] + w);
  }
  double& at(std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) { return data[index(c, d, h, w)]; }
  double at(std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) const { return data[index(c, d, h, w)]; }

  std::span<double> channel(std::int64_t c) {
    return std::span<double>(data).subspan(static_cast<std::size_t>(c * spatial()), static_cast<std::size_t>(spatial()));
  }
  std::span<const double> channel(std::int64_t c) const {
    return std::span<const double>(data).subspan(static_cast<std::size_t>(c * spatial()),
                                                 static_cast<std::size_t>(spatial()));
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool operator==(const Tensor&) const = default;
};

inline Tensor to_tensor(const Volume& v) {
  Tensor t(1, v.dims()[0], v.dims()[1], v.dims()[2]);
  const auto src = v.data();
  for (std::size_t i = 0; i < src.size(); ++i) t.data[i] = src[i];
  return t;
}

/// Sub-box copy: [lo, lo + size) along depth, height and width, all channels.
Tensor slice(const Tensor& t, const std::array<std::int64_t, 3>& lo, const std::array<std::int64_t, 3>& size);

/// Adds `src` into the matching sub-box of `dst` (adjoint of slice).
void scatter_add(Tensor& dst, const Tensor& src, const std::array<std::int64_t, 3>& lo);

}  // namespace spade
