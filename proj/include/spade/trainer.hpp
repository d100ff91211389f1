#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spade/augment.hpp"
#include "spade/losses.hpp"
#include "spade/memory_bank.hpp"
#include "spade/network.hpp"
#include "spade/registration.hpp"
#include "spade/sampling.hpp"

namespace spade {

// ---------------------------------------------------------------- corpus

/// A template phantom plus copies warped by random affines, each with a few
/// extra blobs of its own and mild noise.
struct CorpusSpec {
  std::uint64_t seed = 7;
  int count = 20;  // including the template
  int held_out = 4;
  Dims size{32, 64, 64};
  int num_blobs = 12;
  int extra_blobs = 2;
  double max_shift = 4.0;
  std::array<double, 2> scale_range{0.9, 1.1};
  double noise_hu = 5.0;
};

void to_json(nlohmann::json& j, const CorpusSpec& c);
void from_json(const nlohmann::json& j, CorpusSpec& c);

struct CorpusVolume {
  Volume volume;                 // raw intensities
  AffineTransform ground_truth;  // template -> volume warp used to build it (identity for the template)
};

struct Corpus {
  std::string template_id;
  std::vector<CorpusVolume> volumes;  // template first
  std::vector<std::string> train_ids;
  std::vector<std::string> held_out_ids;
};

Corpus generate_corpus(const CorpusSpec& spec);

/// Phantom `base` warped by `g` (template -> volume), plus seeded noise.
Volume perturb_phantom(const Volume& base, const AffineTransform& g, double noise_hu, std::uint64_t seed,
                       const std::string& id);

/// Registers every volume to the template (identity for the template itself).
/// Transforms already present in `dir` are reused; new ones are written there
/// when `dir` is given. Registration failures are rethrown naming the volume.
TransformSet prepare_corpus(const std::vector<Volume>& volumes, const std::string& template_id,
                            const RegistrationConfig& cfg = {},
                            const std::optional<std::filesystem::path>& dir = std::nullopt);

// ---------------------------------------------------------------- training

struct TrainConfig {
  StrategyId strategy_global = StrategyId::kG3;
  std::optional<StrategyId> strategy_local = StrategyId::kL2;
  bool use_reconstruction = true;
  double beta = 0.99;
  int batch_size = 1;  // anchor volumes per step
  int steps = 2000;
  double learning_rate = 0.01;
  double sgd_momentum = 0.9;
  double stat_rate = 0.1;  // running head statistics update rate
  std::uint64_t seed = 0;
  std::size_t bank_global = 16000;
  std::size_t bank_local = 1000;
  std::size_t warmup_entries = 64;
  int checkpoint_every = 500;
  int probe_pairs = 64;
  int max_anchor_attempts = 50;
  SamplingConfig sampling;
  IntensityRanges intensity;
  LossConfig loss;
  ModelConfig model;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One row of metrics.csv.
struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss_global = 0.0;
  double loss_local = 0.0;
  double loss_recon = 0.0;
  double total = 0.0;
  double pos_global = 0.0;  // mean cohort sizes over anchors
  double neg_global = 0.0;
  double debiased_global = 0.0;
  double pos_local = 0.0;
  double neg_local = 0.0;
  double debiased_local = 0.0;
  std::size_t bank_global = 0;
  std::size_t bank_local = 0;
};

std::string metrics_header();
std::string format_record(const StepRecord& r);

struct StepEvaluation {
  StepRecord record;  // lr and bank sizes describe the trainer before the step
  std::vector<double> grad;
  std::vector<BankEntry> global_entries, local_entries;
  std::vector<std::vector<double>> global_pooled;  // raw head inputs of the regular views
  std::vector<Tensor> local_pooled;
};

class Trainer {
 public:
  /// `volumes` are normalized to [0, 1]; `frames` must cover every volume.
  Trainer(TrainConfig cfg, std::vector<Volume> volumes, TransformSet frames);

  /// Runs the next optimization step and returns its metrics.
  StepRecord step();
  /// Loss, gradient and bank entries of the next step evaluated at `theta`,
  /// with the current momentum parameters and banks. Leaves the trainer unchanged.
  StepEvaluation evaluate(std::span<const double> theta) const;

  int steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const Network& network() const { return net_; }
  const ModelParams& params() const { return params_; }
  const MemoryBank& global_bank() const { return bank_g_; }
  const MemoryBank& local_bank() const { return bank_l_; }
  MemoryBank& global_bank() { return bank_g_; }
  MemoryBank& local_bank() { return bank_l_; }
  double learning_rate_at(int step) const;

 private:
  struct Impl;
  TrainConfig cfg_;
  std::vector<Volume> volumes_;
  TransformSet frames_;
  Network net_;
  ModelParams params_;
  std::vector<double> velocity_;
  std::vector<std::size_t> trainable_;
  MemoryBank bank_g_, bank_l_;
  int step_ = 0;
};

// ---------------------------------------------------------------- probe

struct ProbeResult {
  double corr = 0.0;     // mean cosine of corresponding crops
  double noncorr = 0.0;  // mean cosine of crops with zero template overlap
  double margin() const { return corr - noncorr; }
};

/// Global-embedding cosines over n_pairs corresponding and n_pairs
/// non-corresponding crop pairs drawn from distinct held-out volumes.
ProbeResult alignment_probe(const Network& net, std::span<const double> params, const std::vector<Volume>& volumes,
                            const TransformSet& frames, int n_pairs, const SamplingConfig& sampling,
                            std::uint64_t seed);

// ---------------------------------------------------------------- runs

struct RunResult {
  std::vector<StepRecord> records;
  std::optional<ProbeResult> initial_probe;
  std::optional<ProbeResult> final_probe;
};

/// Full training run. Writes config.json, metrics.csv, checkpoints every
/// cfg.checkpoint_every steps and, when probe volumes are given, probe.csv.
/// `out_dir` may be empty to skip all files.
RunResult run_training(const TrainConfig& cfg, const std::vector<Volume>& train, const std::vector<Volume>& probe,
                       const TransformSet& frames, const std::filesystem::path& out_dir,
                       const std::function<void(const StepRecord&)>& on_step = {});

/// Plot-ready table built from a run directory's metrics.csv: every column
/// plus trailing moving averages of the losses.
std::string make_report(const std::filesystem::path& run_dir, int window = 50);

}  // namespace spade
