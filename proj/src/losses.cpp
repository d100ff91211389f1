#include "spade/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace spade {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(lambda_r >= 0.0)) throw ConfigError("lambda_r must be >= 0");
}

double dot(EmbeddingView a, EmbeddingView b) {
  if (a.size() != b.size()) throw ShapeError("embedding sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

NceResult nce_loss(EmbeddingView v, EmbeddingView v_plus, std::span<const EmbeddingView> negatives, double tau) {
  if (!(tau > 0.0)) throw ParameterError("tau must be > 0");
  const std::size_t n = v.size();
  const double s_pos = dot(v, v_plus) / tau;
  std::vector<double> s_neg(negatives.size());
  double m = s_pos;
  for (std::size_t k = 0; k < negatives.size(); ++k) {
    s_neg[k] = dot(v, negatives[k]) / tau;
    m = std::max(m, s_neg[k]);
  }
  const double e_pos = std::exp(s_pos - m);
  double denom = e_pos;
  for (double s : s_neg) denom += std::exp(s - m);

  NceResult r;
  r.loss = negatives.empty() ? 0.0 : -(s_pos - m) + std::log(denom);
  const double p_pos = e_pos / denom;
  r.grad_v.assign(n, 0.0);
  r.grad_v_plus.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    r.grad_v[i] = (p_pos - 1.0) * v_plus[i] / tau;
    r.grad_v_plus[i] = (p_pos - 1.0) * v[i] / tau;
  }
  for (std::size_t k = 0; k < negatives.size(); ++k) {
    const double q = std::exp(s_neg[k] - m) / denom / tau;
    for (std::size_t i = 0; i < n; ++i) r.grad_v[i] += q * negatives[k][i];
  }
  return r;
}

ConResult con_loss(std::span<const EmbeddingView> positives, std::span<const EmbeddingView> negatives, double tau,
                   ConNormalization normalization, const std::vector<bool>& requires_grad) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (!(tau > 0.0)) throw ParameterError("tau must be > 0");
  const auto P = static_cast<Eigen::Index>(positives.size());
  if (P < 2) throw CohortError("complete contrastive loss needs at least two positives, got " + std::to_string(P));
  if (!requires_grad.empty() && requires_grad.size() != positives.size()) {
    throw ShapeError("requires_grad length differs");
  }
  const auto n = static_cast<Eigen::Index>(positives[0].size());
  const auto N = static_cast<Eigen::Index>(negatives.size());
  Mat pos(P, n), neg(N, n);
  for (Eigen::Index i = 0; i < P; ++i) {
    if (static_cast<Eigen::Index>(positives[i].size()) != n) throw ShapeError("positive embedding sizes differ");
    std::copy(positives[i].begin(), positives[i].end(), pos.row(i).data());
  }
  for (Eigen::Index k = 0; k < N; ++k) {
    if (static_cast<Eigen::Index>(negatives[k].size()) != n) {
      throw ShapeError("negative embedding size differs from positives");
    }
    std::copy(negatives[k].begin(), negatives[k].end(), neg.row(k).data());
  }
  std::vector<Eigen::Index> wanted;  // positives that receive a gradient
  std::vector<Eigen::Index> slot(static_cast<std::size_t>(P), -1);
  for (Eigen::Index i = 0; i < P; ++i) {
    if (requires_grad.empty() || requires_grad[static_cast<std::size_t>(i)]) {
      slot[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(wanted.size());
      wanted.push_back(i);
    }
  }
  const auto G = static_cast<Eigen::Index>(wanted.size());

  // Log-sum-exp pieces of every positive against the negatives, and for
  // positives with a gradient the softmax-weighted mean negative.
  std::vector<double> neg_max(static_cast<std::size_t>(P), -std::numeric_limits<double>::infinity());
  std::vector<double> neg_sum(static_cast<std::size_t>(P), 0.0);
  Mat neg_mean = Mat::Zero(G, n);
  if (N > 0) {
    Mat s = (pos * neg.transpose()) / tau;
    Mat q(G, N);
    for (Eigen::Index i = 0; i < P; ++i) {
      auto row = s.row(i);
      const double m = row.maxCoeff();
      double sum = 0.0;
      for (Eigen::Index k = 0; k < N; ++k) {
        row(k) = std::exp(row(k) - m);
        sum += row(k);
      }
      neg_max[static_cast<std::size_t>(i)] = m;
      neg_sum[static_cast<std::size_t>(i)] = sum;
      const auto g = slot[static_cast<std::size_t>(i)];
      if (g >= 0) q.row(g) = row / sum;
    }
    neg_mean = q * neg;
  }

  const Mat sim = (pos * pos.transpose()) / tau;
  // grad_g = sum_j coef(g, j) pos_j + neg_coef(g) neg_mean_g
  Mat coef = Mat::Zero(G, P);
  std::vector<double> neg_coef(static_cast<std::size_t>(G), 0.0);
  // Directed term NCE(anchor i, positive j).
  auto term = [&](Eigen::Index i, Eigen::Index j) {
    const double s_ij = sim(i, j);
    double loss = 0.0, p = 1.0;
    if (N > 0) {
      const auto iu = static_cast<std::size_t>(i);
      const double m = std::max(s_ij, neg_max[iu]);
      const double e = std::exp(s_ij - m);
      const double denom = e + neg_sum[iu] * std::exp(neg_max[iu] - m);
      loss = -(s_ij - m) + std::log(denom);
      p = e / denom;
    }
    const auto gi = slot[static_cast<std::size_t>(i)], gj = slot[static_cast<std::size_t>(j)];
    if (gi >= 0) {
      coef(gi, j) += (p - 1.0) / tau;
      neg_coef[static_cast<std::size_t>(gi)] += (1.0 - p) / tau;
    }
    if (gj >= 0) coef(gj, i) += (p - 1.0) / tau;
    return loss;
  };
  ConResult r;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < P; ++i) {
    for (Eigen::Index j = i + 1; j < P; ++j) {
      sum += term(i, j);
      sum += term(j, i);
      ++r.pairs;
      r.terms += 2;
    }
  }
  const double norm = normalization == ConNormalization::kPositives ? static_cast<double>(P)
                                                                   : static_cast<double>(r.pairs);
  r.loss = sum / norm;
  Mat grad = coef * pos;
  for (Eigen::Index g = 0; g < G; ++g) grad.row(g) += neg_coef[static_cast<std::size_t>(g)] * neg_mean.row(g);
  grad /= norm;
  r.grads.resize(positives.size());
  for (Eigen::Index g = 0; g < G; ++g) {
    r.grads[static_cast<std::size_t>(wanted[static_cast<std::size_t>(g)])].assign(grad.row(g).data(),
                                                                                 grad.row(g).data() + n);
  }
  return r;
}

ReconResult recon_loss(const Tensor& target, const Tensor& output) {
  if (!target.same_shape(output)) throw ShapeError("reconstruction target and output shapes differ");
  ReconResult r;
  r.grad = Tensor(output.channels(), output.depth(), output.height(), output.width());
  const double N = static_cast<double>(output.size());
  double s = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double diff = output.data[i] - target.data[i];
    s += diff * diff;
    r.grad.data[i] = 2.0 * diff / N;
  }
  r.loss = s / N;
  return r;
}

double total_loss(double global, double local, double recon, const LossConfig& cfg) {
  if (!std::isfinite(global)) throw NumericalError("global contrastive loss is not finite");
  if (!std::isfinite(local)) throw NumericalError("local contrastive loss is not finite");
  if (!std::isfinite(recon)) throw NumericalError("reconstruction loss is not finite");
  return cfg.lambda * global + (1.0 - cfg.lambda) * local + cfg.lambda_r * recon;
}

}  // namespace spade
