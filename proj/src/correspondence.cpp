#include "spade/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

#include "spade/errors.hpp"

namespace spade {

const VolumeFrame& find_frame(const TransformSet& frames, const std::string& id) {
  for (const auto& f : frames) {
    if (f.id == id) return f;
  }
  throw DataError("no registered transform for volume '" + id + "'");
}

Box map_box(const Box& box, const AffineTransform& t) {
  Vec3d lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           std::numeric_limits<double>::infinity()};
  Vec3d hi{-lo[0], -lo[1], -lo[2]};
  const Vec3d up = box.upper();
  for (int c = 0; c < 8; ++c) {
    const Vec3d p{(c & 4) ? up[0] : box.corner[0], (c & 2) ? up[1] : box.corner[1],
                  (c & 1) ? up[2] : box.corner[2]};
    const Vec3d q = t.apply(p);
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], q[k]);
      hi[k] = std::max(hi[k], q[k]);
    }
  }
  return {lo, {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}};
}

std::optional<Box> intersect(const Box& a, const Box& b) {
  Box out;
  const Vec3d au = a.upper(), bu = b.upper();
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(a.corner[k], b.corner[k]);
    const double hi = std::min(au[k], bu[k]);
    if (!(hi > lo)) return std::nullopt;
    out.corner[k] = lo;
    out.size[k] = hi - lo;
  }
  return out;
}

TemplateFootprint to_template(const Patch& p, const AffineTransform& t) {
  if (std::abs(t.determinant()) < 1e-12) throw GeometryError("singular transform for '" + p.volume_id + "'");
  const Box b = map_box(p.box(), t);
  return {b.corner, b.size};
}

Patch map_patch(const Patch& p, const AffineTransform& t_src, const AffineTransform& t_dst,
                const std::string& dst_id, const Dims& dst_dims) {
  const AffineTransform src_to_dst = compose(invert(t_dst), t_src);
  (void)invert(t_src);  // both ends must be invertible
  const Box mapped = map_box(p.box(), src_to_dst);
  Patch out;
  out.volume_id = dst_id;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(mapped.corner[k], 0.0);
    const double hi = std::min(mapped.corner[k] + mapped.size[k], static_cast<double>(dst_dims[k]));
    if (hi - lo < 1.0) {
      throw OutOfFieldError("patch from '" + p.volume_id + "' maps outside '" + dst_id + "'");
    }
    out.corner[k] = lo;
    out.size[k] = hi - lo;
  }
  return out;
}

Patch map_patch(const Patch& p, const VolumeFrame& src, const VolumeFrame& dst) {
  return map_patch(p, src.to_template, dst.to_template, dst.id, dst.dims);
}

double box_iou(const Box& a, const Box& b) {
  const auto inter = intersect(a, b);
  if (!inter) return 0.0;
  if (a == b) return 1.0;
  const double vi = inter->volume();
  const double denom = a.volume() + b.volume() - vi;
  return denom > 0.0 ? std::clamp(vi / denom, 0.0, 1.0) : 0.0;
}

double patch_iou(const TemplateFootprint& a, const TemplateFootprint& b) { return box_iou(a.box(), b.box()); }

double patch_iou(const Patch& a, const Patch& b) { return box_iou(a.box(), b.box()); }

void to_json(nlohmann::json& j, const Patch& p) {
  j = {{"volume_id", p.volume_id}, {"corner", p.corner}, {"size", p.size}};
}

void from_json(const nlohmann::json& j, Patch& p) {
  p.volume_id = j.at("volume_id").get<std::string>();
  p.corner = j.at("corner").get<Vec3d>();
  p.size = j.at("size").get<Vec3d>();
  for (double s : p.size) {
    if (!(s > 0.0)) throw ParameterError("patch size components must be > 0");
  }
}

void to_json(nlohmann::json& j, const TemplateFootprint& f) { j = {{"corner", f.corner}, {"size", f.size}}; }

}  // namespace spade
