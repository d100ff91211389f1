#include "spade/registration.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "spade/errors.hpp"

namespace spade {

namespace {

void require_same_dims(const Volume& a, const Volume& b) {
  if (a.dims() != b.dims()) throw ShapeError("ncc requires volumes of identical dimensions");
}

bool is_constant(const Volume& v) {
  const auto d = v.data();
  for (float x : d) {
    if (x != d[0]) return false;
  }
  return true;
}

// Affine map from a resampled (cropped, downsampled) grid back to the
// original full-resolution grid: x = offset + factor * (q + 0.5) - 0.5.
AffineTransform grid_to_full(const Dims& offset, double factor) {
  AffineTransform t = AffineTransform::scale({factor, factor, factor});
  for (int k = 0; k < 3; ++k) t.translation[k] = static_cast<double>(offset[k]) + 0.5 * factor - 0.5;
  return t;
}

}  // namespace

void RegistrationConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be > 0");
  if (min_iterations < 0 || min_iterations > max_iterations) {
    throw ParameterError("require 0 <= min_iterations <= max_iterations");
  }
  if (!(downsample_factor >= 1.0)) throw ParameterError("downsample_factor must be >= 1");
  if (!(convergence_tol >= 0.0)) throw ParameterError("convergence_tol must be >= 0");
  if (convergence_window < 1) throw ParameterError("convergence_window must be >= 1");
}

Volume resample_through(const Volume& v, const AffineTransform& sampling, const Dims& out_dims) {
  Volume out(out_dims, v.spacing(), v.id());
  for (std::int64_t d = 0; d < out_dims[0]; ++d) {
    for (std::int64_t h = 0; h < out_dims[1]; ++h) {
      for (std::int64_t w = 0; w < out_dims[2]; ++w) {
        const Vec3d p = sampling.apply(Vec3d{double(d), double(h), double(w)});
        out.at(d, h, w) = static_cast<float>(sample_trilinear(v, p));
      }
    }
  }
  return out;
}

Volume warp(const Volume& v, const AffineTransform& t, const Dims& out_dims) {
  return resample_through(v, invert(t), out_dims);
}

double ncc(const Volume& a, const Volume& b) {
  require_same_dims(a, b);
  const auto da = a.data();
  const auto db = b.data();
  const double n = static_cast<double>(da.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    ma += da[i];
    mb += db[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double x = da[i] - ma;
    const double y = db[i] - mb;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa <= 0.0 || sbb <= 0.0) throw DegenerateInputError("ncc of a zero-variance volume");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

NccGradient ncc_with_gradient(const Volume& moving, const Volume& fixed, const AffineTransform& sampling) {
  const auto& n = fixed.dims();
  const std::size_t count = fixed.size();
  std::vector<double> val(count);
  std::vector<Vec3d> grad(count);
  double ma = 0.0, mb = 0.0;
  std::size_t i = 0;
  for (std::int64_t d = 0; d < n[0]; ++d) {
    for (std::int64_t h = 0; h < n[1]; ++h) {
      for (std::int64_t w = 0; w < n[2]; ++w, ++i) {
        const Vec3d p = sampling.apply(Vec3d{double(d), double(h), double(w)});
        val[i] = sample_trilinear_grad(moving, p, grad[i]);
        ma += val[i];
        mb += fixed.data()[i];
      }
    }
  }
  ma /= static_cast<double>(count);
  mb /= static_cast<double>(count);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  const auto fb = fixed.data();
  for (i = 0; i < count; ++i) {
    const double x = val[i] - ma;
    const double y = fb[i] - mb;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa <= 0.0 || sbb <= 0.0) throw DegenerateInputError("ncc of a zero-variance volume");
  const double norm = std::sqrt(saa * sbb);
  NccGradient out;
  out.value = sab / norm;

  // d ncc / d a_p = (b_p - mb) / norm - ncc * (a_p - ma) / saa; the mean terms
  // cancel because both centred vectors sum to zero.
  i = 0;
  for (std::int64_t d = 0; d < n[0]; ++d) {
    for (std::int64_t h = 0; h < n[1]; ++h) {
      for (std::int64_t w = 0; w < n[2]; ++w, ++i) {
        const double dv = (fb[i] - mb) / norm - out.value * (val[i] - ma) / saa;
        const double p[3] = {double(d), double(h), double(w)};
        for (int r = 0; r < 3; ++r) {
          const double g = dv * grad[i][r];
          for (int c = 0; c < 3; ++c) out.grad[3 * r + c] += g * p[c];
          out.grad[9 + r] += g;
        }
      }
    }
  }
  return out;
}

RegistrationResult register_affine(const Volume& moving, const Volume& templ, const RegistrationConfig& cfg) {
  cfg.validate();
  if (is_constant(moving)) throw DegenerateInputError("moving volume '" + moving.id() + "' is constant");
  if (is_constant(templ)) throw DegenerateInputError("template volume '" + templ.id() + "' is constant");

  const CropResult mc = crop_background(moving, cfg.background_threshold);
  const CropResult tc = crop_background(templ, cfg.background_threshold);
  const double f = cfg.downsample_factor;
  const Vec3d down{1.0 / f, 1.0 / f, 1.0 / f};
  const Volume m = (f == 1.0) ? mc.volume : resample(mc.volume, down);
  const Volume t = (f == 1.0) ? tc.volume : resample(tc.volume, down);
  if (is_constant(m) || is_constant(t)) {
    throw DegenerateInputError("volume is constant after background crop and downsampling");
  }

  // Optimise the template->moving sampling map on the reduced grids, with the
  // matrix acting about the template grid centre so that the matrix and
  // translation parameters decouple.
  const auto& tn = t.dims();
  const Eigen::Vector3d center((tn[0] - 1) / 2.0, (tn[1] - 1) / 2.0, (tn[2] - 1) / 2.0);
  const double radius = std::max(1.0, std::sqrt((tn[0] * tn[0] + tn[1] * tn[1] + tn[2] * tn[2] - 3.0) / 12.0));

  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  Eigen::Vector3d shift = Eigen::Vector3d::Zero();
  auto sampling_of = [&](const Eigen::Matrix3d& a, const Eigen::Vector3d& s) {
    AffineTransform u;
    u.matrix = a;
    u.translation = center + s - a * center;
    return u;
  };

  NccGradient cur = ncc_with_gradient(m, t, sampling_of(A, shift));
  if (!std::isfinite(cur.value)) throw NumericalError("non-finite NCC at registration iteration 0");
  RegistrationResult result;
  result.initial_ncc = cur.value;

  double rms_matrix = 0.0, rms_shift = 0.0;
  auto centred_grad = [&](const NccGradient& g, Eigen::Matrix3d& gA, Eigen::Vector3d& gs) {
    for (int r = 0; r < 3; ++r) {
      gs[r] = g.grad[9 + r];
      for (int c = 0; c < 3; ++c) gA(r, c) = g.grad[3 * r + c] - g.grad[9 + r] * center[c];
    }
  };
  Eigen::Matrix3d gA;
  Eigen::Vector3d gs;
  centred_grad(cur, gA, gs);
  rms_matrix = std::sqrt(gA.squaredNorm() / 9.0);
  rms_shift = std::sqrt(gs.squaredNorm() / 3.0);
  constexpr double kTiny = 1e-300;

  double lr = cfg.learning_rate;
  std::vector<double> best_history{cur.value};
  int it = 0;
  for (it = 1; it <= cfg.max_iterations; ++it) {
    if (rms_matrix <= kTiny && rms_shift <= kTiny) break;  // exact stationary start
    const Eigen::Matrix3d stepA = rms_matrix > kTiny ? Eigen::Matrix3d(gA * (lr / (rms_matrix * radius)))
                                                    : Eigen::Matrix3d::Zero();
    const Eigen::Vector3d stepS = rms_shift > kTiny ? Eigen::Vector3d(gs * (lr / rms_shift))
                                                   : Eigen::Vector3d::Zero();
    // Ascent on NCC, i.e. descent on its negation.
    const Eigen::Matrix3d A_new = A + stepA;
    const Eigen::Vector3d s_new = shift + stepS;
    NccGradient next;
    if (std::abs(A_new.determinant()) < 1e-6) {
      next.value = -2.0;
    } else {
      next = ncc_with_gradient(m, t, sampling_of(A_new, s_new));
      if (!std::isfinite(next.value)) {
        throw NumericalError("non-finite NCC at registration iteration " + std::to_string(it));
      }
    }
    if (next.value >= cur.value) {
      A = A_new;
      shift = s_new;
      cur = next;
      centred_grad(cur, gA, gs);
      lr = std::min(cfg.learning_rate, lr * 1.1);
    } else {
      lr *= 0.5;
    }
    best_history.push_back(cur.value);
    const int window = cfg.convergence_window;
    if (it >= cfg.min_iterations && it >= window &&
        best_history[it] - best_history[it - window] < cfg.convergence_tol) {
      break;
    }
  }
  result.iterations = std::min(it, cfg.max_iterations);
  result.final_ncc = cur.value;

  // sampling maps template grid -> moving grid; the result goes the other way
  // and is lifted back to full-resolution, uncropped coordinates.
  const AffineTransform moving_to_template_grid = invert(sampling_of(A, shift));
  const AffineTransform m_full = grid_to_full(mc.offset, f);
  const AffineTransform t_full = grid_to_full(tc.offset, f);
  result.transform = compose(t_full, compose(moving_to_template_grid, invert(m_full)));
  return result;
}

}  // namespace spade
