#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace spade {

/// Extents in (depth, height, width) order. Every 3-vector in this library uses
/// the same axis order.
using Dims = std::array<std::int64_t, 3>;
using Vec3d = std::array<double, 3>;

inline std::int64_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

/// Dense 3D scalar field stored depth-major (width fastest).
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, Vec3d spacing, std::string id, float fill = 0.0f);
  Volume(Dims dims, Vec3d spacing, std::string id, std::vector<float> data);

  const Dims& dims() const { return dims_; }
  const Vec3d& spacing() const { return spacing_; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  std::size_t size() const { return data_.size(); }
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  std::size_t index(std::int64_t d, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>((d * dims_[1] + h) * dims_[2] + w);
  }
  float& at(std::int64_t d, std::int64_t h, std::int64_t w) { return data_[index(d, h, w)]; }
  float at(std::int64_t d, std::int64_t h, std::int64_t w) const { return data_[index(d, h, w)]; }

  bool operator==(const Volume& other) const = default;

 private:
  Dims dims_{0, 0, 0};
  Vec3d spacing_{1.0, 1.0, 1.0};
  std::string id_;
  std::vector<float> data_;
};

/// Trilinear sample at a continuous voxel coordinate. Coordinates outside the
/// grid are clamped to the nearest edge.
double sample_trilinear(const Volume& v, const Vec3d& p);

/// Trilinear sample plus its spatial gradient (zero along clamped axes).
double sample_trilinear_grad(const Volume& v, const Vec3d& p, Vec3d& grad);

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims size{64, 64, 64};
  int num_blobs = 12;
  std::pair<double, double> intensity_range{0.0, 600.0};
  Vec3d spacing{1.0, 1.0, 1.0};
  std::string id;  // empty: derived from the seed
};

inline constexpr double kAirHu = -1000.0;

Volume generate_phantom(const PhantomSpec& spec);

Volume clip_normalize(const Volume& v, double lo, double hi);

/// Trilinear resample by a per-axis scale factor. Output voxel q samples the
/// input at (q + 0.5) / factor - 0.5.
Volume resample(const Volume& v, const Vec3d& factor);

struct CropResult {
  Volume volume;
  Dims offset{0, 0, 0};
};

/// Tight bounding box of voxels strictly above `threshold`. Falls back to the
/// whole volume when nothing exceeds it.
CropResult crop_background(const Volume& v, double threshold);

/// Integer sub-box copy. The box must lie inside the volume.
Volume crop(const Volume& v, const Dims& corner, const Dims& size);

/// Samples the continuous box [corner, corner + extent) onto an `out` grid
/// with trilinear interpolation (cell-centred mapping).
Volume extract_resized(const Volume& v, const Vec3d& corner, const Vec3d& extent, const Dims& out);

void write_svol(const Volume& v, const std::filesystem::path& path);
Volume read_svol(const std::filesystem::path& path);

}  // namespace spade
