#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "spade/layers.hpp"
#include "spade/tensor.hpp"

namespace spade {

/// Desk-scale UNet-like network: a two-stage 3D conv encoder f, a pointwise
/// decoder g with a skip connection, the global projection h_g, the local
/// projection h_l and a sigmoid reconstruction head.
struct ModelConfig {
  int kernel = 3;             // encoder kernel size; 1 gives a purely pointwise encoder
  int enc1_channels = 4;
  int enc2_channels = 8;
  int local_channels = 8;     // channels of the local logits Z
  int global_hidden = 64;
  int global_dim = 128;
  int local_hidden = 32;
  int local_dim = 64;
  int local_grid = 3;
  bool layer_norm = true;     // per-sample normalization after each trunk convolution but the last
  bool head_standardize = true;  // standardize head inputs with running statistics

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named slice of the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::vector<std::int64_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool trainable = true;  // false for running statistics, which gradients treat as constants
};

/// Unit-norm embedding; `shape` is {dim} for global and {C, H, W} for local.
struct Embedding {
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

class Network {
 public:
  explicit Network(ModelConfig cfg = {});

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_params() const { return num_params_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const;

  /// He-uniform weights, zero biases; deterministic in `seed`.
  std::vector<double> init_params(std::uint64_t seed) const;
  /// Indices of gradient-trained parameters.
  std::vector<std::size_t> trainable_indices() const;

  /// Moves the head statistics stored in `params` toward the mean and variance
  /// of the given raw head inputs: stat <- (1 - rate) stat + rate batch_stat.
  /// Local inputs are grid-pooled logits; every grid cell counts as a sample.
  void update_head_stats(std::span<double> params, const std::vector<std::vector<double>>& global_pooled,
                         const std::vector<Tensor>& local_pooled, double rate) const;

  /// Activations kept for the backward pass.
  struct Trunk {
    Tensor x, a1, p1, f;   // encoder: input, stage-1 output, pooled, stage-2 output (global logits)
    Tensor c, d1, z;       // decoder: concat, hidden, local logits Z
    nn::LayerNormState n1, n2, nd;
    bool decoded = false;
  };
  Trunk forward_trunk(std::span<const double> params, const Tensor& patch, bool decode) const;
  /// Back-propagates gradients arriving at the encoder output and/or Z.
  void backward_trunk(std::span<const double> params, const Trunk& trunk, const Tensor* df, const Tensor* dz,
                      std::span<double> grad) const;

  struct GlobalHead {
    std::vector<double> pooled, scaled, hidden, out;
    std::array<std::int64_t, 4> in_shape{};
    double norm = 1.0;
    std::vector<double> embedding;
  };
  GlobalHead forward_global_head(std::span<const double> params, const Tensor& f) const;
  Tensor backward_global_head(std::span<const double> params, const GlobalHead& head,
                              std::span<const double> dembedding, std::span<double> grad) const;

  struct LocalHead {
    std::array<std::int64_t, 4> in_shape{};
    Tensor pooled, scaled, hidden, out;
    double norm = 1.0;
    std::vector<double> embedding;  // flattened local_dim x grid x grid
  };
  LocalHead forward_local_head(std::span<const double> params, const Tensor& z) const;
  Tensor backward_local_head(std::span<const double> params, const LocalHead& head,
                             std::span<const double> dembedding, std::span<double> grad) const;

  /// sigmoid(1x1 conv of Z).
  Tensor forward_reconstruction(std::span<const double> params, const Tensor& z) const;
  Tensor backward_reconstruction(std::span<const double> params, const Tensor& z, const Tensor& recon,
                                 const Tensor& drecon, std::span<double> grad) const;

  std::vector<std::int64_t> global_shape() const { return {cfg_.global_dim}; }
  std::vector<std::int64_t> local_shape() const { return {cfg_.local_dim, cfg_.local_grid, cfg_.local_grid}; }

 private:
  std::span<const double> view(std::span<const double> params, const std::string& name) const;
  std::span<double> view(std::span<double> grad, const std::string& name) const;
  void check_params(std::span<const double> params) const;

  ModelConfig cfg_;
  std::vector<ParamBlock> blocks_;
  std::size_t num_params_ = 0;
};

/// v_g = h_g(f(P)) for a single-channel patch tensor.
Embedding forward_global(const Network& net, std::span<const double> params, const Tensor& patch);

struct LocalForward {
  Tensor z;
  Embedding embedding;
};
/// Z = g(f(P)) and v_l = h_l(Z).
LocalForward forward_local(const Network& net, std::span<const double> params, const Tensor& patch);

/// Regular (theta) and momentum (epsilon) parameter vectors.
struct ModelParams {
  std::vector<double> theta;
  std::vector<double> epsilon;
};

/// epsilon' = beta * epsilon + (1 - beta) * theta, elementwise.
std::vector<double> momentum_update(std::span<const double> theta, std::span<const double> epsilon, double beta);

/// Checkpoint: one JSON header line (model config, parameter blocks, count)
/// followed by little-endian f32 theta then epsilon.
void save_checkpoint(const Network& net, const ModelParams& params, const std::filesystem::path& path,
                     const nlohmann::json& extra);
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  nlohmann::json header;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace spade
