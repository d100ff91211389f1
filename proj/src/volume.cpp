#include "spade/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

#include "spade/binary_io.hpp"
#include "spade/errors.hpp"

namespace spade {

namespace {

void check_dims(const Dims& dims) {
  for (auto d : dims) {
    if (d < 1) throw ParameterError("volume dimensions must be >= 1");
  }
}

void check_spacing(const Vec3d& s) {
  for (auto x : s) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ParameterError("voxel spacing must be positive");
  }
}

// Splits a clamped coordinate into a base index and fractional weight.
struct Axis {
  std::int64_t i0;
  std::int64_t i1;
  double frac;
  bool clamped;
};

Axis locate(double x, std::int64_t n) {
  const double hi = static_cast<double>(n - 1);
  bool clamped = false;
  if (x <= 0.0) {
    x = 0.0;
    clamped = true;
  } else if (x >= hi) {
    x = hi;
    clamped = true;
  }
  auto i0 = static_cast<std::int64_t>(std::floor(x));
  if (i0 >= n - 1) i0 = std::max<std::int64_t>(n - 2, 0);
  const std::int64_t i1 = std::min(i0 + 1, n - 1);
  return {i0, i1, x - static_cast<double>(i0), clamped};
}

}  // namespace

Volume::Volume(Dims dims, Vec3d spacing, std::string id, float fill)
    : dims_(dims), spacing_(spacing), id_(std::move(id)) {
  check_dims(dims_);
  check_spacing(spacing_);
  data_.assign(static_cast<std::size_t>(voxel_count(dims_)), fill);
}

Volume::Volume(Dims dims, Vec3d spacing, std::string id, std::vector<float> data)
    : dims_(dims), spacing_(spacing), id_(std::move(id)), data_(std::move(data)) {
  check_dims(dims_);
  check_spacing(spacing_);
  if (data_.size() != static_cast<std::size_t>(voxel_count(dims_))) {
    throw ShapeError("volume data size does not match dimensions");
  }
}

double sample_trilinear(const Volume& v, const Vec3d& p) {
  const auto& n = v.dims();
  const Axis a = locate(p[0], n[0]);
  const Axis b = locate(p[1], n[1]);
  const Axis c = locate(p[2], n[2]);
  const double fa = a.frac, fb = b.frac, fc = c.frac;
  const double c00 = v.at(a.i0, b.i0, c.i0) * (1 - fc) + v.at(a.i0, b.i0, c.i1) * fc;
  const double c01 = v.at(a.i0, b.i1, c.i0) * (1 - fc) + v.at(a.i0, b.i1, c.i1) * fc;
  const double c10 = v.at(a.i1, b.i0, c.i0) * (1 - fc) + v.at(a.i1, b.i0, c.i1) * fc;
  const double c11 = v.at(a.i1, b.i1, c.i0) * (1 - fc) + v.at(a.i1, b.i1, c.i1) * fc;
  const double c0 = c00 * (1 - fb) + c01 * fb;
  const double c1 = c10 * (1 - fb) + c11 * fb;
  return c0 * (1 - fa) + c1 * fa;
}

double sample_trilinear_grad(const Volume& v, const Vec3d& p, Vec3d& grad) {
  const auto& n = v.dims();
  const Axis a = locate(p[0], n[0]);
  const Axis b = locate(p[1], n[1]);
  const Axis c = locate(p[2], n[2]);
  const double fa = a.frac, fb = b.frac, fc = c.frac;
  const double v000 = v.at(a.i0, b.i0, c.i0), v001 = v.at(a.i0, b.i0, c.i1);
  const double v010 = v.at(a.i0, b.i1, c.i0), v011 = v.at(a.i0, b.i1, c.i1);
  const double v100 = v.at(a.i1, b.i0, c.i0), v101 = v.at(a.i1, b.i0, c.i1);
  const double v110 = v.at(a.i1, b.i1, c.i0), v111 = v.at(a.i1, b.i1, c.i1);

  const double c00 = v000 * (1 - fc) + v001 * fc;
  const double c01 = v010 * (1 - fc) + v011 * fc;
  const double c10 = v100 * (1 - fc) + v101 * fc;
  const double c11 = v110 * (1 - fc) + v111 * fc;
  const double c0 = c00 * (1 - fb) + c01 * fb;
  const double c1 = c10 * (1 - fb) + c11 * fb;

  grad[0] = a.clamped ? 0.0 : (c1 - c0);
  grad[1] = b.clamped ? 0.0 : ((c01 - c00) * (1 - fa) + (c11 - c10) * fa);
  if (c.clamped) {
    grad[2] = 0.0;
  } else {
    const double d0 = (v001 - v000) * (1 - fb) + (v011 - v010) * fb;
    const double d1 = (v101 - v100) * (1 - fb) + (v111 - v110) * fb;
    grad[2] = d0 * (1 - fa) + d1 * fa;
  }
  return c0 * (1 - fa) + c1 * fa;
}

Volume generate_phantom(const PhantomSpec& spec) {
  for (auto s : spec.size) {
    if (s < 8) throw ParameterError("phantom size components must be >= 8");
  }
  if (spec.num_blobs < 0) throw ParameterError("num_blobs must be >= 0");
  if (!(spec.intensity_range.first <= spec.intensity_range.second)) {
    throw ParameterError("intensity_range must satisfy lo <= hi");
  }
  std::string id = spec.id.empty() ? "phantom-" + std::to_string(spec.seed) : spec.id;
  Volume v(spec.size, spec.spacing, std::move(id), static_cast<float>(kAirHu));

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  struct Blob {
    Vec3d center;
    Vec3d sigma;
    double amplitude;
  };
  std::vector<Blob> blobs;
  for (int b = 0; b < spec.num_blobs; ++b) {
    Blob blob{};
    const double frac = 0.06 + 0.10 * unit(rng);
    for (int k = 0; k < 3; ++k) {
      const double n = static_cast<double>(spec.size[k]);
      blob.center[k] = n * (0.2 + 0.6 * unit(rng));
      blob.sigma[k] = n * frac * (0.8 + 0.4 * unit(rng));
    }
    const double peak = spec.intensity_range.first +
                        (spec.intensity_range.second - spec.intensity_range.first) * unit(rng);
    blob.amplitude = peak - kAirHu;
    blobs.push_back(blob);
  }

  const auto& n = spec.size;
  std::vector<double> acc(v.size(), kAirHu);
  for (const auto& blob : blobs) {
    std::array<std::int64_t, 3> lo{}, hi{};
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(blob.center[k] - 4 * blob.sigma[k])));
      hi[k] = std::min<std::int64_t>(n[k], static_cast<std::int64_t>(std::ceil(blob.center[k] + 4 * blob.sigma[k])) + 1);
    }
    for (std::int64_t d = lo[0]; d < hi[0]; ++d) {
      const double zd = (d - blob.center[0]) / blob.sigma[0];
      for (std::int64_t h = lo[1]; h < hi[1]; ++h) {
        const double zh = (h - blob.center[1]) / blob.sigma[1];
        for (std::int64_t w = lo[2]; w < hi[2]; ++w) {
          const double zw = (w - blob.center[2]) / blob.sigma[2];
          acc[v.index(d, h, w)] += blob.amplitude * std::exp(-0.5 * (zd * zd + zh * zh + zw * zw));
        }
      }
    }
  }
  auto out = v.data();
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return v;
}

Volume clip_normalize(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw ParameterError("clip_normalize requires lo < hi");
  Volume out = v;
  const double range = hi - lo;
  for (auto& x : out.data()) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    x = static_cast<float>((c - lo) / range);
  }
  return out;
}

Volume resample(const Volume& v, const Vec3d& factor) {
  Dims out_dims{};
  for (int k = 0; k < 3; ++k) {
    if (!(factor[k] > 0.0) || !std::isfinite(factor[k])) {
      throw ParameterError("resample factors must be positive");
    }
    out_dims[k] = static_cast<std::int64_t>(std::lround(static_cast<double>(v.dims()[k]) * factor[k]));
    if (out_dims[k] < 1) throw ParameterError("resample produces an empty dimension");
  }
  const Vec3d spacing{v.spacing()[0] / factor[0], v.spacing()[1] / factor[1], v.spacing()[2] / factor[2]};
  Volume out(out_dims, spacing, v.id());
  for (std::int64_t d = 0; d < out_dims[0]; ++d) {
    const double sd = (d + 0.5) / factor[0] - 0.5;
    for (std::int64_t h = 0; h < out_dims[1]; ++h) {
      const double sh = (h + 0.5) / factor[1] - 0.5;
      for (std::int64_t w = 0; w < out_dims[2]; ++w) {
        const double sw = (w + 0.5) / factor[2] - 0.5;
        out.at(d, h, w) = static_cast<float>(sample_trilinear(v, {sd, sh, sw}));
      }
    }
  }
  return out;
}

CropResult crop_background(const Volume& v, double threshold) {
  const auto& n = v.dims();
  Dims lo{n[0], n[1], n[2]};
  Dims hi{-1, -1, -1};
  for (std::int64_t d = 0; d < n[0]; ++d) {
    for (std::int64_t h = 0; h < n[1]; ++h) {
      for (std::int64_t w = 0; w < n[2]; ++w) {
        if (v.at(d, h, w) > threshold) {
          lo = {std::min(lo[0], d), std::min(lo[1], h), std::min(lo[2], w)};
          hi = {std::max(hi[0], d), std::max(hi[1], h), std::max(hi[2], w)};
        }
      }
    }
  }
  if (hi[0] < 0) return {v, {0, 0, 0}};
  const Dims size{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  return {crop(v, lo, size), lo};
}

Volume crop(const Volume& v, const Dims& corner, const Dims& size) {
  for (int k = 0; k < 3; ++k) {
    if (corner[k] < 0 || size[k] < 1 || corner[k] + size[k] > v.dims()[k]) {
      throw GeometryError("crop box outside volume");
    }
  }
  Volume out(size, v.spacing(), v.id());
  for (std::int64_t d = 0; d < size[0]; ++d) {
    for (std::int64_t h = 0; h < size[1]; ++h) {
      const float* src = &v.data()[v.index(corner[0] + d, corner[1] + h, corner[2])];
      std::copy(src, src + size[2], &out.data()[out.index(d, h, 0)]);
    }
  }
  return out;
}

Volume extract_resized(const Volume& v, const Vec3d& corner, const Vec3d& extent, const Dims& out) {
  for (int k = 0; k < 3; ++k) {
    if (!(extent[k] > 0.0)) throw ParameterError("extent must be positive");
  }
  Volume res(out, {v.spacing()[0] * extent[0] / out[0], v.spacing()[1] * extent[1] / out[1],
                   v.spacing()[2] * extent[2] / out[2]},
             v.id());
  Vec3d step{extent[0] / out[0], extent[1] / out[1], extent[2] / out[2]};
  for (std::int64_t d = 0; d < out[0]; ++d) {
    const double sd = corner[0] + (d + 0.5) * step[0] - 0.5;
    for (std::int64_t h = 0; h < out[1]; ++h) {
      const double sh = corner[1] + (h + 0.5) * step[1] - 0.5;
      for (std::int64_t w = 0; w < out[2]; ++w) {
        const double sw = corner[2] + (w + 0.5) * step[2] - 0.5;
        res.at(d, h, w) = static_cast<float>(sample_trilinear(v, {sd, sh, sw}));
      }
    }
  }
  return res;
}

void write_svol(const Volume& v, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  nlohmann::json header = {{"dims", {v.dims()[0], v.dims()[1], v.dims()[2]}},
                           {"spacing", {v.spacing()[0], v.spacing()[1], v.spacing()[2]}},
                           {"dtype", "f32"},
                           {"id", v.id()}};
  os << header.dump() << '\n';
  io::write_f32(os, v.data());
}

Volume read_svol(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("missing svol header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad svol header in " + path.string() + ": " + e.what());
  }
  if (header.value("dtype", "") != "f32") throw DataError("unsupported svol dtype");
  Dims dims{};
  Vec3d spacing{};
  try {
    for (int k = 0; k < 3; ++k) {
      dims[k] = header.at("dims").at(k).get<std::int64_t>();
      spacing[k] = header.at("spacing").at(k).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad svol header in " + path.string() + ": " + e.what());
  }
  for (auto d : dims) {
    if (d < 1) throw DataError("svol dims must be >= 1");
  }
  std::vector<float> data(static_cast<std::size_t>(voxel_count(dims)));
  io::read_f32(is, data);
  for (float x : data) {
    if (!std::isfinite(x)) throw DataError("non-finite voxel in " + path.string());
  }
  return Volume(dims, spacing, header.value("id", path.stem().string()), std::move(data));
}

}  // namespace spade
