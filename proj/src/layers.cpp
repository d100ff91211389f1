#include "spade/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace spade {

Tensor slice(const Tensor& t, const std::array<std::int64_t, 3>& lo, const std::array<std::int64_t, 3>& size) {
  for (int k = 0; k < 3; ++k) {
    if (lo[k] < 0 || size[k] < 1 || lo[k] + size[k] > t.shape[k + 1]) throw ShapeError("slice outside tensor");
  }
  Tensor out(t.channels(), size[0], size[1], size[2]);
  for (std::int64_t c = 0; c < t.channels(); ++c) {
    for (std::int64_t d = 0; d < size[0]; ++d) {
      for (std::int64_t h = 0; h < size[1]; ++h) {
        const double* src = &t.data[t.index(c, lo[0] + d, lo[1] + h, lo[2])];
        std::copy(src, src + size[2], &out.data[out.index(c, d, h, 0)]);
      }
    }
  }
  return out;
}

void scatter_add(Tensor& dst, const Tensor& src, const std::array<std::int64_t, 3>& lo) {
  if (src.channels() != dst.channels()) throw ShapeError("scatter_add channel mismatch");
  for (int k = 0; k < 3; ++k) {
    if (lo[k] < 0 || lo[k] + src.shape[k + 1] > dst.shape[k + 1]) throw ShapeError("scatter_add outside tensor");
  }
  for (std::int64_t c = 0; c < src.channels(); ++c) {
    for (std::int64_t d = 0; d < src.depth(); ++d) {
      for (std::int64_t h = 0; h < src.height(); ++h) {
        const double* s = &src.data[src.index(c, d, h, 0)];
        double* o = &dst.data[dst.index(c, lo[0] + d, lo[1] + h, lo[2])];
        for (std::int64_t w = 0; w < src.width(); ++w) o[w] += s[w];
      }
    }
  }
}

namespace nn {

double invariant_sum(std::span<double> scratch) {
  std::sort(scratch.begin(), scratch.end());
  double s = 0.0;
  for (double x : scratch) s += x;
  return s;
}

namespace {

struct Range {
  std::int64_t lo;
  std::int64_t hi;
};

// Output positions p for which p + off stays inside [0, n).
Range valid(std::int64_t off, std::int64_t n) { return {std::max<std::int64_t>(0, -off), std::min(n, n - off)}; }

void check_conv(const Tensor& x, std::span<const double> weight, std::int64_t out_channels, int k) {
  if (k < 1 || k % 2 == 0) throw ShapeError("conv kernel size must be odd");
  const auto expected = static_cast<std::size_t>(out_channels * x.channels() * k * k * k);
  if (weight.size() != expected) {
    throw ShapeError("conv weight has " + std::to_string(weight.size()) + " values, expected " +
                     std::to_string(expected));
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
              std::int64_t out_channels, int k) {
  check_conv(x, weight, out_channels, k);
  const std::int64_t C = x.channels(), D = x.depth(), H = x.height(), W = x.width();
  const int r = k / 2;
  Tensor y(out_channels, D, H, W);
  for (std::int64_t o = 0; o < out_channels; ++o) {
    auto ch = y.channel(o);
    std::fill(ch.begin(), ch.end(), bias[static_cast<std::size_t>(o)]);
  }
  std::size_t wi = 0;
  for (std::int64_t o = 0; o < out_channels; ++o) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (int kd = 0; kd < k; ++kd) {
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw, ++wi) {
            const double wv = weight[wi];
            const std::int64_t od = kd - r, oh = kh - r, ow = kw - r;
            const Range rd = valid(od, D), rh = valid(oh, H), rw = valid(ow, W);
            for (std::int64_t d = rd.lo; d < rd.hi; ++d) {
              for (std::int64_t h = rh.lo; h < rh.hi; ++h) {
                const double* xp = &x.data[x.index(c, d + od, h + oh, 0)];
                double* yp = &y.data[y.index(o, d, h, 0)];
                for (std::int64_t w = rw.lo; w < rw.hi; ++w) yp[w] += wv * xp[w + ow];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor conv3d_backward(const Tensor& x, std::span<const double> weight, const Tensor& dy, int k,
                       std::span<double> dweight, std::span<double> dbias, bool need_dx) {
  const std::int64_t out_channels = dy.channels();
  check_conv(x, weight, out_channels, k);
  const std::int64_t C = x.channels(), D = x.depth(), H = x.height(), W = x.width();
  const int r = k / 2;
  Tensor dx;
  if (need_dx) dx = Tensor(C, D, H, W);
  for (std::int64_t o = 0; o < out_channels; ++o) {
    const auto ch = dy.channel(o);
    dbias[static_cast<std::size_t>(o)] += std::accumulate(ch.begin(), ch.end(), 0.0);
  }
  std::size_t wi = 0;
  for (std::int64_t o = 0; o < out_channels; ++o) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (int kd = 0; kd < k; ++kd) {
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw, ++wi) {
            const double wv = weight[wi];
            const std::int64_t od = kd - r, oh = kh - r, ow = kw - r;
            const Range rd = valid(od, D), rh = valid(oh, H), rw = valid(ow, W);
            double acc = 0.0;
            for (std::int64_t d = rd.lo; d < rd.hi; ++d) {
              for (std::int64_t h = rh.lo; h < rh.hi; ++h) {
                const double* xp = &x.data[x.index(c, d + od, h + oh, 0)];
                const double* gp = &dy.data[dy.index(o, d, h, 0)];
                for (std::int64_t w = rw.lo; w < rw.hi; ++w) acc += gp[w] * xp[w + ow];
                if (need_dx) {
                  double* dxp = &dx.data[dx.index(c, d + od, h + oh, 0)];
                  for (std::int64_t w = rw.lo; w < rw.hi; ++w) dxp[w + ow] += wv * gp[w];
                }
              }
            }
            dweight[wi] += acc;
          }
        }
      }
    }
  }
  return dx;
}

void relu_inplace(Tensor& x) {
  for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(y.data[i] > 0.0)) dy.data[i] = 0.0;
  }
}

Tensor avgpool2(const Tensor& x) {
  for (int k = 1; k < 4; ++k) {
    if (x.shape[k] % 2 != 0) throw ShapeError("avgpool2 requires even spatial dimensions");
  }
  Tensor y(x.channels(), x.depth() / 2, x.height() / 2, x.width() / 2);
  double block[8];
  for (std::int64_t c = 0; c < y.channels(); ++c) {
    for (std::int64_t d = 0; d < y.depth(); ++d) {
      for (std::int64_t h = 0; h < y.height(); ++h) {
        for (std::int64_t w = 0; w < y.width(); ++w) {
          int n = 0;
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              for (int e = 0; e < 2; ++e) block[n++] = x.at(c, 2 * d + a, 2 * h + b, 2 * w + e);
            }
          }
          y.at(c, d, h, w) = invariant_sum(block) / 8.0;
        }
      }
    }
  }
  return y;
}

Tensor layer_norm(const Tensor& x, std::span<const double> gain, std::span<const double> shift, LayerNormState& st) {
  constexpr double kEps = 1e-5;
  const double n = static_cast<double>(x.size());
  std::vector<double> scratch(x.data);
  const double mean = invariant_sum(scratch) / n;
  for (std::size_t i = 0; i < x.size(); ++i) scratch[i] = (x.data[i] - mean) * (x.data[i] - mean);
  const double var = invariant_sum(scratch) / n;
  st.inv_std = 1.0 / std::sqrt(var + kEps);
  st.xhat = x;
  Tensor y = x;
  const auto sp = static_cast<std::size_t>(x.spatial());
  for (std::int64_t c = 0; c < x.channels(); ++c) {
    const auto cu = static_cast<std::size_t>(c);
    for (std::size_t i = cu * sp; i < (cu + 1) * sp; ++i) {
      st.xhat.data[i] = (x.data[i] - mean) * st.inv_std;
      y.data[i] = gain[cu] * st.xhat.data[i] + shift[cu];
    }
  }
  return y;
}

Tensor layer_norm_backward(const LayerNormState& st, std::span<const double> gain, const Tensor& dy,
                           std::span<double> dgain, std::span<double> dshift) {
  const double n = static_cast<double>(dy.size());
  const auto sp = static_cast<std::size_t>(dy.spatial());
  Tensor dx = dy;  // holds d xhat first
  double sum = 0.0, dot = 0.0;
  for (std::int64_t c = 0; c < dy.channels(); ++c) {
    const auto cu = static_cast<std::size_t>(c);
    for (std::size_t i = cu * sp; i < (cu + 1) * sp; ++i) {
      dgain[cu] += dy.data[i] * st.xhat.data[i];
      dshift[cu] += dy.data[i];
      dx.data[i] = dy.data[i] * gain[cu];
      sum += dx.data[i];
      dot += dx.data[i] * st.xhat.data[i];
    }
  }
  for (std::size_t i = 0; i < dx.size(); ++i) {
    dx.data[i] = st.inv_std * (dx.data[i] - sum / n - st.xhat.data[i] * dot / n);
  }
  return dx;
}

Tensor avgpool2_backward(const Tensor& dy) {
  Tensor dx(dy.channels(), dy.depth() * 2, dy.height() * 2, dy.width() * 2);
  for (std::int64_t c = 0; c < dx.channels(); ++c) {
    for (std::int64_t d = 0; d < dx.depth(); ++d) {
      for (std::int64_t h = 0; h < dx.height(); ++h) {
        for (std::int64_t w = 0; w < dx.width(); ++w) dx.at(c, d, h, w) = dy.at(c, d / 2, h / 2, w / 2) / 8.0;
      }
    }
  }
  return dx;
}

Tensor upsample2(const Tensor& x) {
  Tensor y(x.channels(), x.depth() * 2, x.height() * 2, x.width() * 2);
  for (std::int64_t c = 0; c < y.channels(); ++c) {
    for (std::int64_t d = 0; d < y.depth(); ++d) {
      for (std::int64_t h = 0; h < y.height(); ++h) {
        for (std::int64_t w = 0; w < y.width(); ++w) y.at(c, d, h, w) = x.at(c, d / 2, h / 2, w / 2);
      }
    }
  }
  return y;
}

Tensor upsample2_backward(const Tensor& dy) {
  Tensor dx(dy.channels(), dy.depth() / 2, dy.height() / 2, dy.width() / 2);
  for (std::int64_t c = 0; c < dy.channels(); ++c) {
    for (std::int64_t d = 0; d < dy.depth(); ++d) {
      for (std::int64_t h = 0; h < dy.height(); ++h) {
        for (std::int64_t w = 0; w < dy.width(); ++w) dx.at(c, d / 2, h / 2, w / 2) += dy.at(c, d, h, w);
      }
    }
  }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.depth() != b.depth() || a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat requires equal spatial dimensions");
  }
  Tensor y(a.channels() + b.channels(), a.depth(), a.height(), a.width());
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return y;
}

std::vector<double> global_avgpool(const Tensor& x) {
  std::vector<double> out(static_cast<std::size_t>(x.channels()));
  std::vector<double> scratch;
  for (std::int64_t c = 0; c < x.channels(); ++c) {
    const auto ch = x.channel(c);
    scratch.assign(ch.begin(), ch.end());
    out[static_cast<std::size_t>(c)] = invariant_sum(scratch) / static_cast<double>(ch.size());
  }
  return out;
}

Tensor global_avgpool_backward(const std::array<std::int64_t, 4>& shape, std::span<const double> dy) {
  Tensor dx(shape[0], shape[1], shape[2], shape[3]);
  const double inv = 1.0 / static_cast<double>(dx.spatial());
  for (std::int64_t c = 0; c < shape[0]; ++c) {
    auto ch = dx.channel(c);
    std::fill(ch.begin(), ch.end(), dy[static_cast<std::size_t>(c)] * inv);
  }
  return dx;
}

namespace {

Range bin(int i, int grid, std::int64_t n) {
  const std::int64_t lo = (static_cast<std::int64_t>(i) * n) / grid;
  const std::int64_t hi = ((static_cast<std::int64_t>(i) + 1) * n + grid - 1) / grid;
  return {lo, hi};
}

}  // namespace

Tensor grid_pool(const Tensor& x, int grid) {
  if (grid < 1) throw ShapeError("grid must be >= 1");
  Tensor y(x.channels(), 1, grid, grid);
  std::vector<double> scratch;
  for (std::int64_t c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < grid; ++i) {
      const Range bh = bin(i, grid, x.height());
      for (int j = 0; j < grid; ++j) {
        const Range bw = bin(j, grid, x.width());
        scratch.clear();
        for (std::int64_t d = 0; d < x.depth(); ++d) {
          for (std::int64_t h = bh.lo; h < bh.hi; ++h) {
            for (std::int64_t w = bw.lo; w < bw.hi; ++w) scratch.push_back(x.at(c, d, h, w));
          }
        }
        y.at(c, 0, i, j) = invariant_sum(scratch) / static_cast<double>(scratch.size());
      }
    }
  }
  return y;
}

Tensor grid_pool_backward(const std::array<std::int64_t, 4>& in_shape, const Tensor& dy, int grid) {
  Tensor dx(in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
  for (std::int64_t c = 0; c < dx.channels(); ++c) {
    for (int i = 0; i < grid; ++i) {
      const Range bh = bin(i, grid, dx.height());
      for (int j = 0; j < grid; ++j) {
        const Range bw = bin(j, grid, dx.width());
        const double count = static_cast<double>(dx.depth() * (bh.hi - bh.lo) * (bw.hi - bw.lo));
        const double g = dy.at(c, 0, i, j) / count;
        for (std::int64_t d = 0; d < dx.depth(); ++d) {
          for (std::int64_t h = bh.lo; h < bh.hi; ++h) {
            for (std::int64_t w = bw.lo; w < bw.hi; ++w) dx.at(c, d, h, w) += g;
          }
        }
      }
    }
  }
  return dx;
}

std::vector<double> linear(std::span<const double> x, std::span<const double> weight, std::span<const double> bias,
                           std::size_t out) {
  if (weight.size() != out * x.size() || bias.size() != out) throw ShapeError("linear layer shape mismatch");
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = bias[o];
    const double* row = &weight[o * x.size()];
    for (std::size_t i = 0; i < x.size(); ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  return y;
}

std::vector<double> linear_backward(std::span<const double> x, std::span<const double> weight,
                                    std::span<const double> dy, std::span<double> dweight, std::span<double> dbias) {
  std::vector<double> dx(x.size(), 0.0);
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const double g = dy[o];
    dbias[o] += g;
    const double* row = &weight[o * x.size()];
    double* drow = &dweight[o * x.size()];
    for (std::size_t i = 0; i < x.size(); ++i) {
      drow[i] += g * x[i];
      dx[i] += g * row[i];
    }
  }
  return dx;
}

std::vector<double> l2_normalize(std::span<const double> x, double& norm) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  norm = std::sqrt(sq);
  if (!(norm > 1e-12) || !std::isfinite(norm)) {
    throw DegenerateInputError("degenerate embedding: cannot normalize a zero vector");
  }
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / norm;
  return y;
}

std::vector<double> l2_normalize_backward(std::span<const double> y, double norm, std::span<const double> dy) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (dy[i] - y[i] * dot) / norm;
  return dx;
}

void sigmoid_inplace(Tensor& x) {
  for (auto& v : x.data) v = 1.0 / (1.0 + std::exp(-v));
}

void sigmoid_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= y.data[i] * (1.0 - y.data[i]);
}

}  // namespace nn
}  // namespace spade
