#pragma once

#include <array>
#include <cstddef>

#include "spade/affine.hpp"
#include "spade/volume.hpp"

namespace spade {

/// output[p] = trilinear sample of `v` at invert(t)(p), edge-clamped.
Volume warp(const Volume& v, const AffineTransform& t, const Dims& out_dims);

/// Pulls `v` through a sampling map: output[p] = v(sampling(p)).
Volume resample_through(const Volume& v, const AffineTransform& sampling, const Dims& out_dims);

/// Normalized cross-correlation in [-1, 1]. Throws DegenerateInputError on
/// zero variance and ShapeError on mismatched dimensions.
double ncc(const Volume& a, const Volume& b);

/// NCC between `fixed` and `moving` pulled through `sampling` (a map from
/// fixed-grid coordinates into moving coordinates), with its gradient with
/// respect to the 12 raw parameters of `sampling`: the nine matrix entries in
/// row-major order followed by the three translation components.
struct NccGradient {
  double value = 0.0;
  std::array<double, 12> grad{};
};
NccGradient ncc_with_gradient(const Volume& moving, const Volume& fixed, const AffineTransform& sampling);

struct RegistrationConfig {
  double learning_rate = 0.5;
  int min_iterations = 50;
  int max_iterations = 500;
  double downsample_factor = 2.0;
  double background_threshold = -350.0;
  double convergence_tol = 1e-5;
  int convergence_window = 10;

  void validate() const;
};

struct RegistrationResult {
  /// Maps full-resolution moving voxel coordinates to template coordinates.
  AffineTransform transform;
  double final_ncc = 0.0;
  double initial_ncc = 0.0;
  int iterations = 0;
};

RegistrationResult register_affine(const Volume& moving, const Volume& templ, const RegistrationConfig& cfg = {});

}  // namespace spade
