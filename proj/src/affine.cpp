#include "spade/affine.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "spade/errors.hpp"

namespace spade {

AffineTransform AffineTransform::translate(const Vec3d& t) {
  AffineTransform out;
  out.translation = {t[0], t[1], t[2]};
  return out;
}

AffineTransform AffineTransform::scale(const Vec3d& s) {
  AffineTransform out;
  out.matrix = Eigen::Vector3d(s[0], s[1], s[2]).asDiagonal();
  return out;
}

AffineTransform AffineTransform::scale_about(const Vec3d& s, const Vec3d& center) {
  AffineTransform out = scale(s);
  const Eigen::Vector3d c(center[0], center[1], center[2]);
  out.translation = c - out.matrix * c;
  return out;
}

Vec3d AffineTransform::apply(const Vec3d& p) const {
  const Eigen::Vector3d q = apply(Eigen::Vector3d(p[0], p[1], p[2]));
  return {q[0], q[1], q[2]};
}

double AffineTransform::max_abs_diff(const AffineTransform& other) const {
  return std::max((matrix - other.matrix).cwiseAbs().maxCoeff(),
                  (translation - other.translation).cwiseAbs().maxCoeff());
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  AffineTransform out;
  out.matrix = a.matrix * b.matrix;
  out.translation = a.matrix * b.translation + a.translation;
  return out;
}

AffineTransform invert(const AffineTransform& t) {
  const double det = t.matrix.determinant();
  const double scale = t.matrix.cwiseAbs().maxCoeff();
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * std::max(1.0, scale * scale * scale)) {
    throw GeometryError("affine transform is singular");
  }
  AffineTransform out;
  out.matrix = t.matrix.inverse();
  out.translation = -(out.matrix * t.translation);
  return out;
}

void write_transform(const TransformRecord& rec, const std::filesystem::path& path) {
  nlohmann::json j;
  const auto& m = rec.transform.matrix;
  j["matrix"] = {{m(0, 0), m(0, 1), m(0, 2)}, {m(1, 0), m(1, 1), m(1, 2)}, {m(2, 0), m(2, 1), m(2, 2)}};
  const auto& t = rec.transform.translation;
  j["translation"] = {t[0], t[1], t[2]};
  j["moving_id"] = rec.moving_id;
  j["template_id"] = rec.template_id;
  j["final_ncc"] = rec.final_ncc;
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

TransformRecord read_transform(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  TransformRecord rec;
  try {
    const auto j = nlohmann::json::parse(is);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rec.transform.matrix(r, c) = j.at("matrix").at(r).at(c).get<double>();
      rec.transform.translation[r] = j.at("translation").at(r).get<double>();
    }
    rec.moving_id = j.value("moving_id", "");
    rec.template_id = j.value("template_id", "");
    rec.final_ncc = j.value("final_ncc", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad transform file " + path.string() + ": " + e.what());
  }
  return rec;
}

}  // namespace spade
