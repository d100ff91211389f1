#pragma once

#include <span>
#include <string>
#include <vector>

#include "spade/tensor.hpp"

namespace spade {

/// How the pair sum of the complete contrastive loss is normalized.
enum class ConNormalization {
  kPositives,  // 1 / |positives|
  kPairs,      // 1 / number of unordered pairs
};

struct LossConfig {
  double tau = 0.2;
  double lambda = 0.5;
  double lambda_r = 10.0;
  ConNormalization normalization = ConNormalization::kPositives;

  void validate() const;
};

/// Embeddings are flat unit vectors; local tensors are passed flattened, which
/// makes the dot product the Frobenius inner product.
using EmbeddingView = std::span<const double>;

double dot(EmbeddingView a, EmbeddingView b);

struct NceResult {
  double loss = 0.0;
  std::vector<double> grad_v;
  std::vector<double> grad_v_plus;
};

/// -log(exp(v.v+/tau) / (exp(v.v+/tau) + sum exp(v.v-/tau))), stabilized by
/// max-subtraction. Negatives are constants.
NceResult nce_loss(EmbeddingView v, EmbeddingView v_plus, std::span<const EmbeddingView> negatives, double tau);

struct ConResult {
  double loss = 0.0;
  std::size_t pairs = 0;
  std::size_t terms = 0;  // directed NCE evaluations
  std::vector<std::vector<double>> grads;  // one per positive; empty when not requested
};

/// Symmetric NCE summed over all unordered pairs of distinct positives.
/// `requires_grad` (same length as positives, or empty for all) selects which
/// positives get a gradient. Throws CohortError when fewer than two positives.
ConResult con_loss(std::span<const EmbeddingView> positives, std::span<const EmbeddingView> negatives, double tau,
                   ConNormalization normalization = ConNormalization::kPositives,
                   const std::vector<bool>& requires_grad = {});

struct ReconResult {
  double loss = 0.0;
  Tensor grad;  // with respect to the (sigmoid-activated) output
};

/// Mean squared error over all voxels.
ReconResult recon_loss(const Tensor& target, const Tensor& output);

/// lambda * global + (1 - lambda) * local + lambda_r * recon. Throws
/// NumericalError naming the first non-finite component.
double total_loss(double global, double local, double recon, const LossConfig& cfg);

}  // namespace spade
