#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>

#include "spade/trainer.hpp"

namespace spade {

namespace {

struct ProbeSampler {
  const std::vector<Volume>& volumes;
  const TransformSet& frames;
  const SamplingConfig& cfg;
  std::mt19937_64 rng;

  std::size_t pick_volume() { return std::uniform_int_distribution<std::size_t>(0, volumes.size() - 1)(rng); }

  // Unscaled crop (extent = crop_size, shrunk to fit) that is not mainly air.
  std::optional<Patch> crop(const Volume& v) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Patch p{v.id(), {}, {}};
    for (int a = 0; a < 3; ++a) {
      p.size[a] = std::min<double>(static_cast<double>(cfg.crop_size[a]), static_cast<double>(v.dims()[a]));
      p.corner[a] = unit(rng) * (static_cast<double>(v.dims()[a]) - p.size[a]);
    }
    const auto x = extract_resized(v, p.corner, p.size, cfg.crop_size);
    if (foreground_fraction(x, cfg.air_threshold) < cfg.min_foreground) return std::nullopt;
    return p;
  }
};

double cosine(const Network& net, std::span<const double> params, const Volume& a, const Patch& pa, const Volume& b,
              const Patch& pb, const Dims& size) {
  const auto ea = forward_global(net, params, extract_patch(a, pa, size));
  const auto eb = forward_global(net, params, extract_patch(b, pb, size));
  return dot(ea.values, eb.values);
}

}  // namespace

ProbeResult alignment_probe(const Network& net, std::span<const double> params, const std::vector<Volume>& volumes,
                            const TransformSet& frames, int n_pairs, const SamplingConfig& sampling,
                            std::uint64_t seed) {
  if (volumes.size() < 2) throw AvailabilityError("alignment probe needs at least two volumes", volumes.size());
  if (n_pairs < 1) throw ParameterError("n_pairs must be >= 1");
  ProbeSampler s{volumes, frames, sampling, std::mt19937_64(seed)};
  const int limit = sampling.max_rejections;
  ProbeResult out;

  auto distinct_pair = [&] {
    const std::size_t a = s.pick_volume();
    std::size_t b = s.pick_volume();
    while (b == a) b = s.pick_volume();
    return std::pair{a, b};
  };

  for (int n = 0; n < n_pairs; ++n) {
    int tries = 0;
    for (;; ++tries) {
      if (tries >= limit) throw SamplingExhaustedError("alignment probe found no corresponding crop pair");
      const auto [a, b] = distinct_pair();
      const auto pa = s.crop(volumes[a]);
      if (!pa) continue;
      Patch pb;
      try {
        pb = map_patch(*pa, find_frame(frames, volumes[a].id()), find_frame(frames, volumes[b].id()));
      } catch (const OutOfFieldError&) {
        continue;
      }
      out.corr += cosine(net, params, volumes[a], *pa, volumes[b], pb, sampling.crop_size);
      break;
    }
    for (tries = 0;; ++tries) {
      if (tries >= limit) throw SamplingExhaustedError("alignment probe found no non-overlapping crop pair");
      const auto [a, b] = distinct_pair();
      const auto pa = s.crop(volumes[a]);
      const auto pb = s.crop(volumes[b]);
      if (!pa || !pb) continue;
      const auto fa = to_template(*pa, find_frame(frames, volumes[a].id()).to_template);
      const auto fb = to_template(*pb, find_frame(frames, volumes[b].id()).to_template);
      if (patch_iou(fa, fb) > 0.0) continue;
      out.noncorr += cosine(net, params, volumes[a], *pa, volumes[b], *pb, sampling.crop_size);
      break;
    }
  }
  out.corr /= n_pairs;
  out.noncorr /= n_pairs;
  return out;
}

std::string make_report(const std::filesystem::path& run_dir, int window) {
  if (window < 1) throw ParameterError("report window must be >= 1");
  const auto path = run_dir / "metrics.csv";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw DataError("empty metrics file " + path.string());
  // Columns 2..5 are loss_global, loss_local, loss_recon, total.
  std::vector<std::string> rows;
  std::vector<std::array<double, 4>> losses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::array<double, 4> l{};
    for (int col = 0; std::getline(ss, cell, ','); ++col) {
      if (col >= 2 && col <= 5) {
        try {
          l[col - 2] = std::stod(cell);
        } catch (const std::exception&) {
          throw DataError("bad number '" + cell + "' in " + path.string());
        }
      }
    }
    rows.push_back(line);
    losses.push_back(l);
  }
  std::ostringstream out;
  out << header << ",ma_loss_global,ma_loss_local,ma_loss_recon,ma_total\n";
  std::array<double, 4> sum{};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int k = 0; k < 4; ++k) {
      sum[k] += losses[i][k];
      if (i >= static_cast<std::size_t>(window)) sum[k] -= losses[i - window][k];
    }
    const double n = static_cast<double>(std::min<std::size_t>(i + 1, window));
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g,%.9g", sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n);
    out << rows[i] << buf << '\n';
  }
  return out.str();
}

}  // namespace spade
