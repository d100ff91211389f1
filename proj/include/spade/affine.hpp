#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Dense>

#include "spade/volume.hpp"

namespace spade {

/// p -> matrix * p + translation, acting on (d, h, w) voxel coordinates.
struct AffineTransform {
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static AffineTransform identity() { return {}; }
  static AffineTransform translate(const Vec3d& t);
  static AffineTransform scale(const Vec3d& s);
  /// Scaling by `s` that keeps `center` fixed.
  static AffineTransform scale_about(const Vec3d& s, const Vec3d& center);

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return matrix * p + translation; }
  Vec3d apply(const Vec3d& p) const;

  double determinant() const { return matrix.determinant(); }
  /// Largest absolute elementwise difference over all 12 parameters.
  double max_abs_diff(const AffineTransform& other) const;
};

/// (compose(a, b))(p) == a(b(p)).
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

/// Throws GeometryError when the linear part is singular.
AffineTransform invert(const AffineTransform& t);

/// Serialized registration result.
struct TransformRecord {
  AffineTransform transform;
  std::string moving_id;
  std::string template_id;
  double final_ncc = 1.0;
};

void write_transform(const TransformRecord& rec, const std::filesystem::path& path);
TransformRecord read_transform(const std::filesystem::path& path);

}  // namespace spade
