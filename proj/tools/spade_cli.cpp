// Command-line front end: phantom generation, registration, patch IoU,
// cohort audit, training, probing and reporting.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"

#include "spade/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spade;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SPADE_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("SPADE_SEED is not an unsigned integer: ") + s);
  }
}

std::vector<Volume> load_volumes(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".svol") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .svol volumes in " + dir.string());
  std::vector<Volume> out;
  for (const auto& f : files) out.push_back(read_svol(f));
  return out;
}

// Corpus layout: template plus train/held-out split, from corpus.json when
// present, otherwise every volume trains and the first (or named) is the template.
struct Layout {
  std::string template_id;
  std::vector<std::string> train, held_out;
};

Layout read_layout(const fs::path& dir, const std::vector<Volume>& volumes, const std::string& template_override) {
  Layout l;
  const auto manifest = dir / "corpus.json";
  if (fs::exists(manifest)) {
    const auto j = read_json(manifest);
    l.template_id = j.at("template_id").get<std::string>();
    l.train = j.at("train_ids").get<std::vector<std::string>>();
    l.held_out = j.at("held_out_ids").get<std::vector<std::string>>();
  } else {
    l.template_id = volumes.front().id();
    for (const auto& v : volumes) l.train.push_back(v.id());
  }
  if (!template_override.empty()) l.template_id = template_override;
  return l;
}

std::vector<Volume> select(const std::vector<Volume>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const Volume*> by_id;
  for (const auto& v : all) by_id[v.id()] = &v;
  std::vector<Volume> out;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("volume " + id + " listed in corpus.json is missing");
    out.push_back(clip_normalize(*it->second, -1000.0, 1000.0));
  }
  return out;
}

RegistrationConfig registration_config(const json& j) {
  RegistrationConfig c;
  if (!j.contains("registration")) return c;
  const auto& r = j.at("registration");
  c.learning_rate = r.value("learning_rate", c.learning_rate);
  c.min_iterations = r.value("min_iterations", c.min_iterations);
  c.max_iterations = r.value("max_iterations", c.max_iterations);
  c.downsample_factor = r.value("downsample_factor", c.downsample_factor);
  c.background_threshold = r.value("background_threshold", c.background_threshold);
  c.convergence_tol = r.value("convergence_tol", c.convergence_tol);
  c.convergence_window = r.value("convergence_window", c.convergence_window);
  c.validate();
  return c;
}

TransformSet load_transforms(const fs::path& dir, const std::vector<std::string>& ids,
                             const std::map<std::string, Dims>& dims) {
  TransformSet frames;
  for (const auto& id : ids) {
    const auto path = dir / (id + ".affine.json");
    if (!fs::exists(path)) throw DataError("missing transform " + path.string());
    const auto it = dims.find(id);
    frames.push_back({id, it == dims.end() ? Dims{1, 1, 1} : it->second, read_transform(path).transform});
  }
  return frames;
}

// ---------------------------------------------------------------- commands

int cmd_phantom_gen(const fs::path& spec_path, const fs::path& out) {
  const auto j = read_json(spec_path);
  CorpusSpec spec;
  try {
    spec = j.get<CorpusSpec>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad phantom spec: ") + e.what());
  }
  if (auto s = env_seed()) spec.seed = *s;
  const auto corpus = generate_corpus(spec);
  fs::create_directories(out);
  json truth = json::object();
  for (const auto& cv : corpus.volumes) {
    write_svol(cv.volume, out / (cv.volume.id() + ".svol"));
    json m = json::array();
    for (int r = 0; r < 3; ++r) m.push_back({cv.ground_truth.matrix(r, 0), cv.ground_truth.matrix(r, 1),
                                             cv.ground_truth.matrix(r, 2)});
    truth[cv.volume.id()] = {{"matrix", m},
                             {"translation", {cv.ground_truth.translation[0], cv.ground_truth.translation[1],
                                              cv.ground_truth.translation[2]}}};
  }
  write_json({{"template_id", corpus.template_id},
              {"train_ids", corpus.train_ids},
              {"held_out_ids", corpus.held_out_ids},
              {"spec", spec},
              {"ground_truth_warps", truth}},
             out / "corpus.json");
  std::cout << json{{"volumes", corpus.volumes.size()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_register(const fs::path& moving, const fs::path& templ, const fs::path& out, const fs::path& config) {
  const auto cfg = config.empty() ? RegistrationConfig{} : registration_config(read_json(config));
  const auto m = read_svol(moving);
  const auto t = read_svol(templ);
  const auto r = register_affine(m, t, cfg);
  write_transform({r.transform, m.id(), t.id(), r.final_ncc}, out);
  std::cout << json{{"moving_id", m.id()},     {"template_id", t.id()},       {"initial_ncc", r.initial_ncc},
                    {"final_ncc", r.final_ncc}, {"iterations", r.iterations}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_iou(const fs::path& a_path, const fs::path& b_path, const fs::path& transforms) {
  Patch a, b;
  try {
    a = read_json(a_path).get<Patch>();
    b = read_json(b_path).get<Patch>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad patch file: ") + e.what());
  }
  const auto ta = read_transform(transforms / (a.volume_id + ".affine.json")).transform;
  const auto tb = read_transform(transforms / (b.volume_id + ".affine.json")).transform;
  std::cout << json(patch_iou(to_template(a, ta), to_template(b, tb))).dump() << '\n';
  return 0;
}

// Audit of cohort membership for one step's anchors. The bank is either a
// saved global bank or footprints of crops drawn across the corpus.
int cmd_sample(const std::string& strategy_name, const fs::path& volumes_dir, const fs::path& transforms,
               const fs::path& config, const fs::path& bank_path, int bank_size, const fs::path& out) {
  const auto strategy = parse_strategy(strategy_name);
  TrainConfig cfg;
  if (!config.empty()) cfg = read_json(config).get<TrainConfig>();
  if (auto s = env_seed()) cfg.seed = *s;
  cfg.sampling.validate();
  const auto raw = load_volumes(volumes_dir);
  const auto layout = read_layout(volumes_dir, raw, "");
  const auto volumes = select(raw, layout.train);
  std::map<std::string, Dims> dims;
  for (const auto& v : raw) dims[v.id()] = v.dims();
  const auto frames = load_transforms(transforms, layout.train, dims);

  std::mt19937_64 rng(cfg.seed);
  BankSnapshot bank;
  std::map<const BankEntry*, std::string> labels;
  if (!bank_path.empty()) {
    const auto loaded = MemoryBank::load(bank_path);
    bank = loaded.snapshot();
    for (const auto& e : bank) labels[e.get()] = "age-" + std::to_string(e->age);
  } else {
    const auto dim = static_cast<std::size_t>(cfg.model.global_dim);
    for (int n = 0; n < bank_size; ++n) {
      const auto& v = volumes[rng() % volumes.size()];
      const auto pairs = sample_anchor_pairs(v, cfg.sampling, rng());
      const auto& p = pairs.front().first;
      auto e = std::make_shared<BankEntry>();
      e->embedding.assign(dim, 0.0);
      e->embedding[static_cast<std::size_t>(n) % dim] = 1.0;
      e->footprint = to_template(p, find_frame(frames, v.id()).to_template);
      e->age = static_cast<std::uint64_t>(n);
      labels[e.get()] = json(p).dump();
      bank.push_back(std::move(e));
    }
  }

  const auto& anchor_vol = volumes[rng() % volumes.size()];
  const auto pairs = sample_anchor_pairs(anchor_vol, cfg.sampling, rng());
  const auto& frame = find_frame(frames, anchor_vol.id());
  json anchors = json::array();
  const std::vector<double> unit = [&] {
    std::vector<double> u(bank.empty() ? 1 : bank.front()->embedding.size(), 0.0);
    u[0] = 1.0;
    return u;
  }();
  for (const auto& pr : pairs) {
    for (const auto* p : {&pr.first, &pr.second}) {
      const auto fp = to_template(*p, frame.to_template);
      json item{{"patch", *p}, {"footprint", fp}};
      if (is_global(strategy)) {
        std::vector<Patch> positives;
        if (strategy != StrategyId::kMoco) positives = select_positive_volumes(*p, frames, cfg.sampling.n_plus, &rng);
        std::vector<EmbeddingView> pos(positives.size() + 1, EmbeddingView(unit));
        const auto c = build_global_cohorts(strategy, unit, pos, fp, bank, cfg.sampling.o);
        item["positive_patches"] = positives;
        item["online_positives"] = c.online_count;
        json promoted = json::array(), negatives = json::array();
        for (const auto& e : c.bank_positives) {
          promoted.push_back({{"entry", labels[e.get()]}, {"iou", patch_iou(fp, e->footprint)}});
        }
        for (const auto& e : c.bank_negatives) {
          negatives.push_back({{"entry", labels[e.get()]}, {"iou", patch_iou(fp, e->footprint)}});
        }
        item["bank_positives"] = promoted;
        item["negatives"] = negatives;
        item["debiased"] = c.debiased;
      } else {
        const auto inter = intersect(pr.first.box(), pr.second.box());
        const Patch ov{p->volume_id, inter->corner, inter->size};
        const auto ofp = to_template(ov, frame.to_template);
        const auto c = build_local_cohorts(strategy, {unit, unit}, {}, ofp, bank, cfg.sampling.o);
        item["overlap_footprint"] = ofp;
        json negatives = json::array(), promoted = json::array();
        for (const auto& e : c.bank_negatives) {
          negatives.push_back({{"entry", labels[e.get()]}, {"iou", patch_iou(ofp, e->footprint)}});
        }
        for (const auto& e : c.bank_positives) {
          promoted.push_back({{"entry", labels[e.get()]}, {"iou", patch_iou(ofp, e->footprint)}});
        }
        item["bank_positives"] = promoted;
        item["negatives"] = negatives;
        item["debiased"] = c.debiased;
      }
      anchors.push_back(item);
    }
  }
  const json result{{"strategy", to_string(strategy)},
                    {"o", cfg.sampling.o},
                    {"anchor_volume", anchor_vol.id()},
                    {"bank_size", bank.size()},
                    {"anchors", anchors}};
  write_json(result, out);
  std::cout << json{{"anchors", anchors.size()}, {"bank_size", bank.size()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_train(const fs::path& config, const fs::path& volumes_dir, const fs::path& transforms, const fs::path& out) {
  const auto j = read_json(config);
  auto cfg = j.get<TrainConfig>();
  if (auto s = env_seed()) cfg.seed = *s;
  cfg.validate();
  const auto reg = registration_config(j);
  const auto raw = load_volumes(volumes_dir);
  const auto layout = read_layout(volumes_dir, raw, j.value("template_id", std::string()));
  fs::create_directories(transforms);
  const auto frames = prepare_corpus(raw, layout.template_id, reg, transforms);
  const auto train = select(raw, layout.train);
  const auto probe = select(raw, layout.held_out);
  const auto res = run_training(cfg, train, probe, frames, out, [&](const StepRecord& r) {
    if (r.step % 100 == 0 || r.step == cfg.steps) {
      std::cerr << "step " << r.step << "/" << cfg.steps << " total " << r.total << "\n";
    }
  });
  json summary{{"steps", res.records.size()}, {"out", out.string()}};
  if (!res.records.empty()) summary["final_total"] = res.records.back().total;
  if (res.initial_probe) summary["initial_margin"] = res.initial_probe->margin();
  if (res.final_probe) summary["final_margin"] = res.final_probe->margin();
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_probe(const fs::path& checkpoint, const fs::path& volumes_dir, const fs::path& transforms,
              const fs::path& config, int pairs) {
  const auto ck = load_checkpoint(checkpoint);
  TrainConfig cfg;
  if (!config.empty()) {
    cfg = read_json(config).get<TrainConfig>();
  } else if (ck.header.contains("config")) {
    cfg = ck.header.at("config").get<TrainConfig>();
  }
  if (auto s = env_seed()) cfg.seed = *s;
  const auto raw = load_volumes(volumes_dir);
  const auto layout = read_layout(volumes_dir, raw, "");
  std::vector<std::string> ids = layout.held_out.size() >= 2 ? layout.held_out : layout.train;
  TransformSet frames;
  if (!transforms.empty()) {
    std::map<std::string, Dims> dims;
    for (const auto& v : raw) dims[v.id()] = v.dims();
    frames = load_transforms(transforms, ids, dims);
  } else {
    frames = prepare_corpus(raw, layout.template_id);
  }
  const Network net(ck.config);
  const auto r = alignment_probe(net, ck.params.theta, select(raw, ids), frames, pairs > 0 ? pairs : cfg.probe_pairs,
                                 cfg.sampling, cfg.seed);
  std::cout << json{{"mean_corr_cos", r.corr}, {"mean_noncorr_cos", r.noncorr}, {"margin", r.margin()}}.dump()
            << '\n';
  return 0;
}

int cmd_report(const fs::path& run, const fs::path& out, int window) {
  const auto csv = make_report(run, window);
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream f(out);
    if (!f) throw DataError("cannot write " + out.string());
    f << csv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Correspondence-aware contrastive pretraining on 3D volumes"};
  app.require_subcommand(1);

  fs::path spec, out, moving, templ, config, a, b, transforms, volumes, checkpoint, run, bank;
  std::string strategy = "G3";
  int pairs = 0, window = 50, bank_size = 256;

  auto* gen = app.add_subcommand("phantom-gen", "Generate a synthetic phantom corpus");
  gen->add_option("--spec", spec, "Corpus spec JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* reg = app.add_subcommand("register", "Affinely register a volume to a template");
  reg->add_option("--moving", moving)->required();
  reg->add_option("--template", templ)->required();
  reg->add_option("--out", out, "Transform JSON to write")->required();
  reg->add_option("--config", config, "JSON with a \"registration\" section");

  auto* iou = app.add_subcommand("iou", "Template-space IoU of two patches");
  iou->add_option("--a", a)->required();
  iou->add_option("--b", b)->required();
  iou->add_option("--transforms", transforms)->required();

  auto* smp = app.add_subcommand("sample", "Write cohort membership for one batch of anchors");
  smp->add_option("--strategy", strategy)->required();
  smp->add_option("--volumes", volumes)->required();
  smp->add_option("--transforms", transforms)->required();
  smp->add_option("--config", config);
  smp->add_option("--bank", bank, "Saved global or local bank to audit against");
  smp->add_option("--bank-size", bank_size, "Entries of the synthetic audit bank")->check(CLI::PositiveNumber);
  smp->add_option("--out", out)->required();

  auto* trn = app.add_subcommand("train", "Run pretraining");
  trn->add_option("--config", config)->required();
  trn->add_option("--volumes", volumes)->required();
  trn->add_option("--transforms", transforms, "Transform directory; missing transforms are computed")->required();
  trn->add_option("--out", out)->required();

  auto* prb = app.add_subcommand("probe", "Alignment probe of a checkpoint");
  prb->add_option("--checkpoint", checkpoint)->required();
  prb->add_option("--volumes", volumes)->required();
  prb->add_option("--transforms", transforms);
  prb->add_option("--config", config);
  prb->add_option("--pairs", pairs);

  auto* rep = app.add_subcommand("report", "Plot-ready CSV from a run directory");
  rep->add_option("--run", run)->required();
  rep->add_option("--out", out);
  rep->add_option("--window", window);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*gen) return cmd_phantom_gen(spec, out);
    if (*reg) return cmd_register(moving, templ, out, config);
    if (*iou) return cmd_iou(a, b, transforms);
    if (*smp) return cmd_sample(strategy, volumes, transforms, config, bank, bank_size, out);
    if (*trn) return cmd_train(config, volumes, transforms, out);
    if (*prb) return cmd_probe(checkpoint, volumes, transforms, config, pairs);
    if (*rep) return cmd_report(run, out, window);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
