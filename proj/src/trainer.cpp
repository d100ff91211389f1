#include "spade/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include "spade/augment.hpp"
#include "spade/layers.hpp"

namespace spade {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t checksum(std::span<const double> v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double x : v) h = (h ^ std::bit_cast<std::uint64_t>(x)) * 1099511628211ULL;
  return h;
}

}  // namespace

// ---------------------------------------------------------------- corpus

void to_json(nlohmann::json& j, const CorpusSpec& c) {
  j = {{"seed", c.seed},         {"count", c.count},         {"held_out", c.held_out},
       {"size", c.size},         {"num_blobs", c.num_blobs}, {"extra_blobs", c.extra_blobs},
       {"max_shift", c.max_shift}, {"scale_range", c.scale_range}, {"noise_hu", c.noise_hu}};
}

void from_json(const nlohmann::json& j, CorpusSpec& c) {
  CorpusSpec d;
  c.seed = j.value("seed", d.seed);
  c.count = j.value("count", d.count);
  c.held_out = j.value("held_out", d.held_out);
  c.size = j.value("size", d.size);
  c.num_blobs = j.value("num_blobs", d.num_blobs);
  c.extra_blobs = j.value("extra_blobs", d.extra_blobs);
  c.max_shift = j.value("max_shift", d.max_shift);
  c.scale_range = j.value("scale_range", d.scale_range);
  c.noise_hu = j.value("noise_hu", d.noise_hu);
}

Volume perturb_phantom(const Volume& base, const AffineTransform& g, double noise_hu, std::uint64_t seed,
                       const std::string& id) {
  Volume w = warp(base, g, base.dims());
  Volume out(w.dims(), w.spacing(), id);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_hu > 0.0 ? noise_hu : 1.0);
  auto src = w.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<float>(src[i] + (noise_hu > 0.0 ? noise(rng) : 0.0));
  }
  return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.count < 1) throw ParameterError("corpus count must be >= 1");
  if (spec.held_out < 0 || spec.held_out >= spec.count) throw ParameterError("held_out must lie in [0, count)");
  if (spec.max_shift < 0.0 || !(spec.scale_range[0] > 0.0 && spec.scale_range[0] <= spec.scale_range[1])) {
    throw ParameterError("bad corpus perturbation ranges");
  }
  auto name = [](int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "vol-%03d", i);
    return std::string(buf);
  };
  Corpus c;
  c.template_id = name(0);
  PhantomSpec ps;
  ps.seed = spec.seed;
  ps.size = spec.size;
  ps.num_blobs = spec.num_blobs;
  ps.id = c.template_id;
  const Volume base = generate_phantom(ps);
  c.volumes.push_back({base, AffineTransform::identity()});

  std::mt19937_64 rng(mix(spec.seed, 1));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3d center{(spec.size[0] - 1) / 2.0, (spec.size[1] - 1) / 2.0, (spec.size[2] - 1) / 2.0};
  for (int i = 1; i < spec.count; ++i) {
    Vec3d s, t;
    for (int a = 0; a < 3; ++a) {
      s[a] = spec.scale_range[0] + (spec.scale_range[1] - spec.scale_range[0]) * unit(rng);
      t[a] = spec.max_shift * (2.0 * unit(rng) - 1.0);
    }
    const auto g = compose(AffineTransform::translate(t), AffineTransform::scale_about(s, center));
    Volume v = perturb_phantom(base, g, spec.noise_hu, mix(spec.seed, 1000 + i), name(i));
    if (spec.extra_blobs > 0) {
      PhantomSpec es = ps;
      es.seed = mix(spec.seed, 2000 + i);
      es.num_blobs = spec.extra_blobs;
      const Volume extra = generate_phantom(es);
      auto dst = v.data();
      auto add = extra.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += static_cast<float>(add[k] - kAirHu);
    }
    c.volumes.push_back({std::move(v), g});
  }
  for (int i = 0; i < spec.count; ++i) {
    (i < spec.count - spec.held_out ? c.train_ids : c.held_out_ids).push_back(name(i));
  }
  return c;
}

TransformSet prepare_corpus(const std::vector<Volume>& volumes, const std::string& template_id,
                            const RegistrationConfig& cfg, const std::optional<std::filesystem::path>& dir) {
  const Volume* templ = nullptr;
  for (const auto& v : volumes) {
    if (v.id() == template_id) templ = &v;
  }
  if (templ == nullptr) throw DataError("template " + template_id + " is not in the corpus");
  if (dir) std::filesystem::create_directories(*dir);
  TransformSet frames;
  for (const auto& v : volumes) {
    VolumeFrame f{v.id(), v.dims(), AffineTransform::identity()};
    if (v.id() != template_id) {
      const auto path = dir ? std::optional(*dir / (v.id() + ".affine.json")) : std::nullopt;
      if (path && std::filesystem::exists(*path)) {
        f.to_template = read_transform(*path).transform;
      } else {
        try {
          const auto r = register_affine(v, *templ, cfg);
          f.to_template = r.transform;
          if (path) write_transform({r.transform, v.id(), template_id, r.final_ncc}, *path);
        } catch (const NumericalError& e) {
          throw NumericalError("registration of " + v.id() + " failed: " + e.what());
        } catch (const Error& e) {
          throw DataError("registration of " + v.id() + " failed: " + e.what());
        }
      }
    } else if (dir) {
      write_transform({f.to_template, v.id(), template_id, 1.0}, *dir / (v.id() + ".affine.json"));
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!is_global(strategy_global)) throw ConfigError("strategy_global must be MoCo-baseline, G1, G2 or G3");
  if (strategy_local && is_global(*strategy_local)) throw ConfigError("strategy_local must be none or L1..L4");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ConfigError("sgd_momentum must lie in [0, 1)");
  if (!(stat_rate >= 0.0 && stat_rate <= 1.0)) throw ConfigError("stat_rate must lie in [0, 1]");
  if (bank_global < 1 || bank_local < 1) throw ConfigError("bank capacities must be >= 1");
  if (max_anchor_attempts < 1) throw ConfigError("max_anchor_attempts must be >= 1");
  sampling.validate();
  intensity.validate();
  loss.validate();
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"strategy_global", to_string(c.strategy_global)},
       {"strategy_local", c.strategy_local ? to_string(*c.strategy_local) : "none"},
       {"use_reconstruction", c.use_reconstruction},
       {"beta", c.beta},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"learning_rate", c.learning_rate},
       {"sgd_momentum", c.sgd_momentum},
       {"stat_rate", c.stat_rate},
       {"seed", c.seed},
       {"bank_global", c.bank_global},
       {"bank_local", c.bank_local},
       {"warmup_entries", c.warmup_entries},
       {"checkpoint_every", c.checkpoint_every},
       {"probe_pairs", c.probe_pairs},
       {"max_anchor_attempts", c.max_anchor_attempts},
       {"enqueue", "one momentum embedding per crop view"},
       {"sampling", c.sampling},
       {"intensity", c.intensity},
       {"loss",
        {{"tau", c.loss.tau},
         {"lambda", c.loss.lambda},
         {"lambda_r", c.loss.lambda_r},
         {"normalization", c.loss.normalization == ConNormalization::kPositives ? "positives" : "pairs"}}},
       {"model", c.model}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c = d;
  try {
    if (j.contains("strategy_global")) c.strategy_global = parse_strategy(j.at("strategy_global").get<std::string>());
    if (j.contains("strategy_local")) {
      const auto s = j.at("strategy_local").get<std::string>();
      c.strategy_local = s == "none" ? std::nullopt : std::optional(parse_strategy(s));
    }
    c.use_reconstruction = j.value("use_reconstruction", d.use_reconstruction);
    c.beta = j.value("beta", d.beta);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.steps = j.value("steps", d.steps);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.sgd_momentum = j.value("sgd_momentum", d.sgd_momentum);
    c.stat_rate = j.value("stat_rate", d.stat_rate);
    c.seed = j.value("seed", d.seed);
    c.bank_global = j.value("bank_global", d.bank_global);
    c.bank_local = j.value("bank_local", d.bank_local);
    c.warmup_entries = j.value("warmup_entries", d.warmup_entries);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.probe_pairs = j.value("probe_pairs", d.probe_pairs);
    c.max_anchor_attempts = j.value("max_anchor_attempts", d.max_anchor_attempts);
    if (j.contains("sampling")) c.sampling = j.at("sampling").get<SamplingConfig>();
    if (j.contains("intensity")) c.intensity = j.at("intensity").get<IntensityRanges>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.loss.tau = l.value("tau", d.loss.tau);
      c.loss.lambda = l.value("lambda", d.loss.lambda);
      c.loss.lambda_r = l.value("lambda_r", d.loss.lambda_r);
      const auto n = l.value("normalization", std::string("positives"));
      if (n != "positives" && n != "pairs") throw ConfigError("loss.normalization must be positives or pairs");
      c.loss.normalization = n == "pairs" ? ConNormalization::kPairs : ConNormalization::kPositives;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
}

std::string metrics_header() {
  return "step,lr,loss_global,loss_local,loss_recon,total,pos_global,neg_global,debiased_global,"
         "pos_local,neg_local,debiased_local,bank_global,bank_local";
}

std::string format_record(const StepRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%zu,%zu", r.step, r.lr,
                r.loss_global, r.loss_local, r.loss_recon, r.total, r.pos_global, r.neg_global, r.debiased_global,
                r.pos_local, r.neg_local, r.debiased_local, r.bank_global, r.bank_local);
  return buf;
}

// ---------------------------------------------------------------- training

Trainer::Trainer(TrainConfig cfg, std::vector<Volume> volumes, TransformSet frames)
    : cfg_(std::move(cfg)), volumes_(std::move(volumes)), frames_(std::move(frames)), net_(cfg_.model) {
  cfg_.validate();
  if (volumes_.empty()) throw AvailabilityError("no training volumes", 0);
  // Correspondences only ever point at training volumes.
  TransformSet own;
  for (const auto& v : volumes_) own.push_back(find_frame(frames_, v.id()));
  frames_ = std::move(own);
  params_.theta = net_.init_params(mix(cfg_.seed, 0xC0FFEE));
  params_.epsilon = params_.theta;
  velocity_.assign(params_.theta.size(), 0.0);
  trainable_ = net_.trainable_indices();
  bank_g_ = MemoryBank(cfg_.bank_global, net_.global_shape());
  bank_l_ = MemoryBank(cfg_.bank_local, net_.local_shape());
}

double Trainer::learning_rate_at(int step) const {
  if (cfg_.steps <= 0) return cfg_.learning_rate;
  return 0.5 * cfg_.learning_rate * (1.0 + std::cos(std::numbers::pi * step / cfg_.steps));
}

// One forward of one augmented crop, plus the gradients that reach it.
struct ViewRun {
  Network::Trunk trunk;
  SpatialAug spatial;
  Tensor target;  // spatially augmented clean crop
  Network::GlobalHead global;
  bool has_global = false;
  Tensor z_inv;                  // local logits mapped back to the crop frame
  std::vector<double> dglobal;   // d loss / d global embedding
  Tensor dz_inv;                 // d loss / d z_inv
  Tensor dz;                     // d loss / d z (augmented frame)
};

struct LocalUse {
  std::size_t view = 0;
  OverlapRegion region;
  Network::LocalHead head;
};

struct CropRun {
  Patch patch;
  TemplateFootprint footprint;
  std::size_t reg = 0;
  std::size_t mom[2] = {0, 0};
  std::vector<std::size_t> positives;  // regular views of corresponding crops
  std::vector<Patch> positive_patches;
};

struct Trainer::Impl {
  static ViewRun run_view(const Network& net, std::span<const double> params, const Tensor& x, SpatialAug spatial,
                          const IntensityAug& intensity, bool decode, bool global) {
    ViewRun r;
    r.spatial = spatial;
    r.target = apply_spatial(x, spatial);
    r.trunk = net.forward_trunk(params, apply_intensity(r.target, intensity), decode);
    if (global) {
      r.global = net.forward_global_head(params, r.trunk.f);
      r.has_global = true;
    }
    if (decode) r.z_inv = invert_spatial(r.trunk.z, spatial);
    return r;
  }

  static LocalUse local_embed(const Network& net, std::span<const double> params, const std::vector<ViewRun>& views,
                              std::size_t view, const Patch& own, const Patch& other) {
    const Tensor& z = views[view].z_inv;
    LocalUse u;
    u.view = view;
    u.region = overlap_region(own, other, {z.depth(), z.height(), z.width()});
    u.head = net.forward_local_head(params, slice(z, u.region.lo, u.region.size));
    return u;
  }

  static void add_to(std::vector<double>& acc, std::span<const double> g, double w) {
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += w * g[i];
  }

  static void add_local_grad(const Network& net, std::span<const double> params, std::vector<ViewRun>& views,
                             const LocalUse& u, std::span<const double> demb, std::span<double> grad) {
    const Tensor dslice = net.backward_local_head(params, u.head, demb, grad);
    ViewRun& v = views[u.view];
    if (v.dz_inv.size() == 0) v.dz_inv = Tensor(v.z_inv.channels(), v.z_inv.depth(), v.z_inv.height(), v.z_inv.width());
    scatter_add(v.dz_inv, dslice, u.region.lo);
  }

  static void backward(const Network& net, std::span<const double> params, ViewRun& v, std::span<double> grad) {
    Tensor df;
    if (!v.dglobal.empty()) df = net.backward_global_head(params, v.global, v.dglobal, grad);
    Tensor dz = v.dz;
    if (v.dz_inv.size() != 0) {
      const Tensor back = apply_spatial(v.dz_inv, v.spatial);
      if (dz.size() == 0) {
        dz = back;
      } else {
        for (std::size_t i = 0; i < dz.size(); ++i) dz.data[i] += back.data[i];
      }
    }
    if (df.size() == 0 && dz.size() == 0) return;
    net.backward_trunk(params, v.trunk, df.size() ? &df : nullptr, dz.size() ? &dz : nullptr, grad);
  }
};

StepEvaluation Trainer::evaluate(std::span<const double> theta) const {
  using I = Impl;
  const int t = step_;
  std::mt19937_64 rng(mix(cfg_.seed, static_cast<std::uint64_t>(t) + 1));
  if (theta.size() != net_.num_params()) throw ShapeError("theta has the wrong length");

  StepEvaluation out;
  StepRecord& rec = out.record;
  rec.step = t + 1;
  rec.lr = learning_rate_at(t);

  const auto& sc = cfg_.sampling;
  const StrategyId gs = cfg_.strategy_global;
  const auto ls = cfg_.strategy_local;
  const bool local_on = ls.has_value();
  const bool cross_local = local_on && (*ls == StrategyId::kL3 || *ls == StrategyId::kL4);
  const bool global_pos = gs != StrategyId::kMoco && sc.n_plus > 0;
  const bool need_corr = global_pos || (cross_local && sc.n_plus > 0);
  const bool square = sc.crop_size[1] == sc.crop_size[2];

  const BankSnapshot snap_g = bank_g_.snapshot();
  const BankSnapshot snap_l = bank_l_.snapshot();
  const bool global_active = snap_g.size() >= cfg_.warmup_entries;
  const bool local_active = local_on && snap_l.size() >= cfg_.warmup_entries;

  std::map<std::string, std::size_t> vol_index;
  for (std::size_t i = 0; i < volumes_.size(); ++i) vol_index[volumes_[i].id()] = i;

  // Anchors: one random volume per batch element, p crop pairs each.
  struct AnchorSet {
    std::size_t vol = 0;
    std::vector<PatchPair> pairs;
    std::vector<std::vector<PatchPair>> corr;
  };
  std::vector<AnchorSet> anchors;
  std::uniform_int_distribution<std::size_t> pick(0, volumes_.size() - 1);
  for (int b = 0; b < cfg_.batch_size; ++b) {
    bool ok = false;
    for (int attempt = 0; attempt < cfg_.max_anchor_attempts && !ok; ++attempt) {
      AnchorSet a;
      a.vol = pick(rng);
      const std::uint64_t seed = rng();
      try {
        a.pairs = sample_anchor_pairs(volumes_[a.vol], sc, seed);
        for (const auto& pr : a.pairs) {
          a.corr.push_back(need_corr ? select_corresponding(pr, frames_, sc.n_plus, &rng) : std::vector<PatchPair>{});
        }
        anchors.push_back(std::move(a));
        ok = true;
      } catch (const AvailabilityError&) {
      } catch (const SamplingExhaustedError&) {
      }
    }
    if (!ok) {
      throw AvailabilityError("step " + std::to_string(t + 1) + ": no anchor with usable correspondences after " +
                                  std::to_string(cfg_.max_anchor_attempts) + " attempts",
                              0);
    }
  }

  // Forward passes.
  const auto& eps = params_.epsilon;
  std::vector<ViewRun> reg, mom;
  std::vector<CropRun> crops;
  const bool decode_reg = local_on || cfg_.use_reconstruction;
  for (const auto& a : anchors) {
    const Volume& vol = volumes_[a.vol];
    const auto& frame = find_frame(frames_, vol.id());
    for (std::size_t q = 0; q < a.pairs.size(); ++q) {
      for (int c = 0; c < 2; ++c) {
        CropRun cr;
        cr.patch = c == 0 ? a.pairs[q].first : a.pairs[q].second;
        cr.footprint = to_template(cr.patch, frame.to_template);
        const Tensor x = extract_patch(vol, cr.patch, sc.crop_size);
        const SpatialAug s1 = random_spatial(rng, square), s2 = random_spatial(rng, square);
        const IntensityAug i1 = random_intensity(rng, cfg_.intensity), i2 = random_intensity(rng, cfg_.intensity);
        cr.reg = reg.size();
        reg.push_back(I::run_view(net_, theta, x, s1, i1, decode_reg, true));
        cr.mom[0] = mom.size();
        mom.push_back(I::run_view(net_, eps, x, s1, i1, local_on, true));
        cr.mom[1] = mom.size();
        mom.push_back(I::run_view(net_, eps, x, s2, i2, local_on, true));
        for (const auto& cp : a.corr[q]) {
          const Patch& pp = c == 0 ? cp.first : cp.second;
          const Tensor xp = extract_patch(volumes_.at(vol_index.at(pp.volume_id)), pp, sc.crop_size);
          const SpatialAug sp = random_spatial(rng, square);
          const IntensityAug ip = random_intensity(rng, cfg_.intensity);
          cr.positives.push_back(reg.size());
          cr.positive_patches.push_back(pp);
          reg.push_back(I::run_view(net_, theta, xp, sp, ip, cross_local, global_pos));
        }
        crops.push_back(std::move(cr));
      }
    }
  }

  std::vector<double>& grad = out.grad;
  grad.assign(net_.num_params(), 0.0);
  const auto& lc = cfg_.loss;

  // Global cohorts, one per crop.
  double loss_g = 0.0;
  if (global_active) {
    const double w = lc.lambda / static_cast<double>(crops.size());
    for (const auto& cr : crops) {
      std::vector<EmbeddingView> pos{mom[cr.mom[1]].global.embedding};
      if (global_pos) {
        for (auto k : cr.positives) pos.emplace_back(reg[k].global.embedding);
      }
      const auto cohort =
          build_global_cohorts(gs, reg[cr.reg].global.embedding, pos, cr.footprint, snap_g, sc.o);
      std::vector<bool> mask(cohort.positives.size(), false);
      for (std::size_t k = 0; k < cohort.online_count; ++k) mask[k] = k != 1;
      const auto r = con_loss(cohort.positives, cohort.negatives, lc.tau, lc.normalization, mask);
      loss_g += r.loss / static_cast<double>(crops.size());
      rec.pos_global += static_cast<double>(cohort.positives.size()) / crops.size();
      rec.neg_global += static_cast<double>(cohort.negatives.size()) / crops.size();
      rec.debiased_global += static_cast<double>(cohort.debiased) / crops.size();
      I::add_to(reg[cr.reg].dglobal, r.grads[0], w);
      for (std::size_t k = 2; k < cohort.online_count; ++k) I::add_to(reg[cr.positives[k - 2]].dglobal, r.grads[k], w);
    }
  }

  // Local cohorts, one per crop pair; momentum overlap embeddings for M_l.
  double loss_l = 0.0;
  std::vector<BankEntry>& local_entries = out.local_entries;
  if (local_on) {
    const std::size_t n_pairs = crops.size() / 2;
    const double w = (1.0 - lc.lambda) / static_cast<double>(n_pairs);
    for (std::size_t q = 0; q < n_pairs; ++q) {
      const CropRun& cj = crops[2 * q];
      const CropRun& ck = crops[2 * q + 1];
      const auto inter = intersect(cj.patch.box(), ck.patch.box());
      if (!inter) throw GeometryError("anchor crop pair has no overlap");
      const Patch overlap{cj.patch.volume_id, inter->corner, inter->size};
      const auto fp = to_template(overlap, find_frame(frames_, overlap.volume_id).to_template);

      for (int v = 0; v < 2; ++v) {
        for (const auto* pair : {&cj, &ck}) {
          const auto& other = pair == &cj ? ck : cj;
          const auto u = I::local_embed(net_, eps, mom, pair->mom[v], pair->patch, other.patch);
          local_entries.push_back({u.head.embedding, fp, 0});
        }
      }
      if (!local_active) continue;

      std::vector<LocalUse> uses;
      uses.push_back(I::local_embed(net_, theta, reg, cj.reg, cj.patch, ck.patch));
      uses.push_back(I::local_embed(net_, theta, reg, ck.reg, ck.patch, cj.patch));
      if (cross_local) {
        for (std::size_t i = 0; i < cj.positives.size(); ++i) {
          const Patch& pj = cj.positive_patches[i];
          const Patch& pk = ck.positive_patches[i];
          if (!intersect(pj.box(), pk.box())) continue;
          uses.push_back(I::local_embed(net_, theta, reg, cj.positives[i], pj, pk));
          uses.push_back(I::local_embed(net_, theta, reg, ck.positives[i], pk, pj));
        }
      }
      std::vector<EmbeddingView> cross;
      for (std::size_t i = 2; i < uses.size(); ++i) cross.emplace_back(uses[i].head.embedding);
      const auto cohort = build_local_cohorts(*ls, {uses[0].head.embedding, uses[1].head.embedding}, cross, fp,
                                              snap_l, sc.o);
      std::vector<bool> mask(cohort.positives.size(), false);
      for (std::size_t k = 0; k < cohort.online_count; ++k) mask[k] = true;
      const auto r = con_loss(cohort.positives, cohort.negatives, lc.tau, lc.normalization, mask);
      loss_l += r.loss / static_cast<double>(n_pairs);
      rec.pos_local += static_cast<double>(cohort.positives.size()) / n_pairs;
      rec.neg_local += static_cast<double>(cohort.negatives.size()) / n_pairs;
      rec.debiased_local += static_cast<double>(cohort.debiased) / n_pairs;
      for (std::size_t k = 0; k < cohort.online_count; ++k) {
        std::vector<double> demb(r.grads[k]);
        for (auto& x : demb) x *= w;
        I::add_local_grad(net_, theta, reg, uses[k], demb, grad);
      }
    }
  }

  // Reconstruction of the spatially augmented clean crop.
  double loss_r = 0.0;
  if (cfg_.use_reconstruction) {
    const double w = lc.lambda_r / static_cast<double>(crops.size());
    for (const auto& cr : crops) {
      ViewRun& v = reg[cr.reg];
      const Tensor out = net_.forward_reconstruction(theta, v.trunk.z);
      auto r = recon_loss(v.target, out);
      loss_r += r.loss / static_cast<double>(crops.size());
      for (auto& x : r.grad.data) x *= w;
      v.dz = net_.backward_reconstruction(theta, v.trunk.z, out, r.grad, grad);
    }
  }

  rec.loss_global = loss_g;
  rec.loss_local = loss_l;
  rec.loss_recon = loss_r;
  try {
    rec.total = total_loss(loss_g, loss_l, loss_r, lc);
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(t + 1) + ": " + e.what());
  }

  for (auto& v : reg) I::backward(net_, theta, v, grad);
  for (double g : grad) {
    if (!std::isfinite(g)) throw NumericalError("step " + std::to_string(t + 1) + ": non-finite gradient");
  }
  for (const auto& cr : crops) {
    for (int v = 0; v < 2; ++v) out.global_entries.push_back({mom[cr.mom[v]].global.embedding, cr.footprint, 0});
  }
  for (const auto& v : reg) {
    if (v.has_global) out.global_pooled.push_back(v.global.pooled);
    if (v.trunk.decoded) out.local_pooled.push_back(nn::grid_pool(v.z_inv, net_.config().local_grid));
  }
  rec.bank_global = bank_g_.size();
  rec.bank_local = bank_l_.size();
  return out;
}

StepRecord Trainer::step() {
  const std::uint64_t eps_before = checksum(params_.epsilon);
  StepEvaluation ev = evaluate(params_.theta);
  StepRecord& rec = ev.record;

  // SGD with momentum on theta only.
  for (const std::size_t i : trainable_) {
    velocity_[i] = cfg_.sgd_momentum * velocity_[i] + ev.grad[i];
    params_.theta[i] -= rec.lr * velocity_[i];
  }
  net_.update_head_stats(params_.theta, ev.global_pooled, ev.local_pooled, cfg_.stat_rate);
  if (checksum(params_.epsilon) != eps_before) {
    throw std::logic_error("momentum parameters changed outside momentum_update");
  }
  params_.epsilon = momentum_update(params_.theta, params_.epsilon, cfg_.beta);

  bank_g_.enqueue(ev.global_entries);
  if (cfg_.strategy_local) bank_l_.enqueue(ev.local_entries);
  rec.bank_global = bank_g_.size();
  rec.bank_local = bank_l_.size();
  ++step_;
  return rec;
}

// ---------------------------------------------------------------- runs

namespace {

std::string probe_row(int step, const ProbeResult& p) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g", step, p.corr, p.noncorr, p.margin());
  return buf;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const std::vector<Volume>& train, const std::vector<Volume>& probe,
                       const TransformSet& frames, const std::filesystem::path& out_dir,
                       const std::function<void(const StepRecord&)>& on_step) {
  Trainer tr(cfg, train, frames);
  const bool write = !out_dir.empty();
  std::ofstream metrics, probes;
  if (write) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
    metrics.open(out_dir / "metrics.csv");
    if (!metrics) throw DataError("cannot write " + (out_dir / "metrics.csv").string());
    metrics << metrics_header() << '\n';
  }
  const bool probing = probe.size() >= 2;
  const std::uint64_t probe_seed = mix(cfg.seed, 0x9B0BE);
  auto run_probe = [&] {
    return alignment_probe(tr.network(), tr.params().theta, probe, frames, cfg.probe_pairs, cfg.sampling,
                           probe_seed);
  };
  RunResult res;
  if (probing) {
    res.initial_probe = run_probe();
    if (write) {
      probes.open(out_dir / "probe.csv");
      probes << "step,corr,noncorr,margin\n" << probe_row(0, *res.initial_probe) << '\n';
    }
  }
  auto checkpoint = [&](int step) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06d.bin", step);
    save_checkpoint(tr.network(), tr.params(), out_dir / name, {{"step", step}, {"config", cfg}});
  };
  for (int s = 1; s <= cfg.steps; ++s) {
    res.records.push_back(tr.step());
    if (write) metrics << format_record(res.records.back()) << '\n';
    if (on_step) on_step(res.records.back());
    const bool due = cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0;
    if (due || s == cfg.steps) {
      if (write) {
        metrics.flush();
        checkpoint(s);
      }
      if (probing) {
        res.final_probe = run_probe();
        if (write) probes << probe_row(s, *res.final_probe) << '\n' << std::flush;
      }
    }
  }
  if (write) {
    tr.global_bank().save(out_dir / "bank_global.bin");
    tr.local_bank().save(out_dir / "bank_local.bin");
  }
  return res;
}

}  // namespace spade
