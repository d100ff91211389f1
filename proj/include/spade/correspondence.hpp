#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spade/affine.hpp"
#include "spade/volume.hpp"

namespace spade {

/// Half-open axis-aligned box [corner, corner + size).
struct Box {
  Vec3d corner{0, 0, 0};
  Vec3d size{1, 1, 1};

  double volume() const { return size[0] * size[1] * size[2]; }
  Vec3d upper() const { return {corner[0] + size[0], corner[1] + size[1], corner[2] + size[2]}; }
  bool operator==(const Box&) const = default;
};

/// A crop of one volume, in that volume's voxel coordinates.
struct Patch {
  std::string volume_id;
  Vec3d corner{0, 0, 0};
  Vec3d size{1, 1, 1};

  Box box() const { return {corner, size}; }
  bool operator==(const Patch&) const = default;
};

/// A patch's axis-aligned footprint in template coordinates.
struct TemplateFootprint {
  Vec3d corner{0, 0, 0};
  Vec3d size{1, 1, 1};

  Box box() const { return {corner, size}; }
  bool operator==(const TemplateFootprint&) const = default;
};

/// Registration result for one corpus volume.
struct VolumeFrame {
  std::string id;
  Dims dims{1, 1, 1};
  AffineTransform to_template;
};

using TransformSet = std::vector<VolumeFrame>;

const VolumeFrame& find_frame(const TransformSet& frames, const std::string& id);

/// Bounding box of the 8 corners of `box` mapped through `t`.
Box map_box(const Box& box, const AffineTransform& t);

std::optional<Box> intersect(const Box& a, const Box& b);

TemplateFootprint to_template(const Patch& p, const AffineTransform& t);

/// Relocates `p` into the destination volume through invert(t_dst) * t_src,
/// clipped to [0, dst_dims). Throws OutOfFieldError when fewer than one voxel
/// per axis survives the clip.
Patch map_patch(const Patch& p, const AffineTransform& t_src, const AffineTransform& t_dst,
                const std::string& dst_id, const Dims& dst_dims);
Patch map_patch(const Patch& p, const VolumeFrame& src, const VolumeFrame& dst);

double box_iou(const Box& a, const Box& b);
double patch_iou(const TemplateFootprint& a, const TemplateFootprint& b);
/// Image-space IoU of two patches of the same volume.
double patch_iou(const Patch& a, const Patch& b);

void to_json(nlohmann::json& j, const Patch& p);
void from_json(const nlohmann::json& j, Patch& p);
void to_json(nlohmann::json& j, const TemplateFootprint& f);

}  // namespace spade
