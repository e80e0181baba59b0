#pragma once

// Loss terms: multi-bandwidth Gaussian kernel, biased MMD, the contrastive
// adaptation loss over answer and context/question class means, span
// cross-entropy, and the combined objective ce + beta * con.

#include <cstddef>
#include <span>
#include <vector>

#include "caqa/model.hpp"
#include "caqa/tensor.hpp"

namespace caqa {

/// Either an explicit list of bandwidths, or the median heuristic: median
/// pairwise squared distance of the points at hand times each multiplier.
struct KernelConfig {
  std::vector<double> bandwidths;
  bool median_heuristic = true;
  std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0};

  static KernelConfig fixed(std::vector<double> gammas);
  static KernelConfig median(std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0});

  /// Throws InvalidArgument when a bandwidth or multiplier is not positive.
  void validate() const;
};

/// Concrete bandwidths for `points` [N,H]. The median is a plain number: no
/// gradient flows through it. If every pairwise distance is zero the
/// multipliers are applied to 1.
std::vector<double> resolve_bandwidths(const KernelConfig& kernel, const Tensor& points);

/// Mean over bandwidths of exp(-||x - y||^2 / gamma).
double gaussian_kernel(std::span<const double> x, std::span<const double> y, std::span<const double> gammas);

/// K[i,j] = gaussian_kernel(x_i, y_j), differentiable in x [N,H] and y [M,H].
/// Squared distances are clamped at zero before exponentiation.
Tensor kernel_matrix(const Tensor& x, const Tensor& y, std::span<const double> gammas);

/// Biased V-statistic: mean k(X,X) + mean k(Y,Y) - 2 mean k(X,Y).
Tensor mmd_squared(const Tensor& x, const Tensor& y, std::span<const double> gammas);
/// Plain-value form over sets of vectors; median bandwidths pool X and Y.
double mmd_squared(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y,
                   const KernelConfig& kernel);

struct ClassMeans {
  Tensor answer_mean;  // [H]
  Tensor cq_mean;      // [H]
  DomainTag domain = DomainTag::Source;
};

/// x_a over answer positions; x_cq over (question + context) minus answer.
/// Special tokens belong to neither.
ClassMeans class_means(const Tensor& features, const TokenizedSample& sample);

/// As printed: + answer/answer + cq/cq - answer/cq. Similarity-flipped
/// negates the two same-class groups.
enum class SignVariant { AsPrinted, SimilarityFlipped };
/// Mixed batch pairs every sample with every sample; domain-separated runs
/// the same-class sums over source x target pairs only.
enum class PairingVariant { MixedBatch, DomainSeparated };

struct ContrastiveConfig {
  double beta = 0.001;
  double noise_sigma = 0.0;
  KernelConfig kernel = KernelConfig::median();
  SignVariant sign_variant = SignVariant::AsPrinted;
  PairingVariant pairing_variant = PairingVariant::MixedBatch;

  void validate() const;
};

/// Per-term values of the contrastive loss, before the sign variant.
struct ContrastiveTerms {
  Tensor answer_answer;  // normalized same-class sum over answer means
  Tensor cq_cq;
  Tensor answer_cq;
  Tensor loss;
  std::vector<double> bandwidths;
};

ContrastiveTerms contrastive_terms(std::span<const ClassMeans> batch, const ContrastiveConfig& config);
/// Explicit bandwidths bypass config.kernel (used to freeze median-heuristic
/// bandwidths for finite differences).
ContrastiveTerms contrastive_terms(std::span<const ClassMeans> batch, const ContrastiveConfig& config,
                                   std::span<const double> gammas);
Tensor contrastive_loss(std::span<const ClassMeans> batch, const ContrastiveConfig& config);

/// Mean of -log softmax(start)[gold.start] and -log softmax(end)[gold.end].
Tensor span_cross_entropy(const SpanLogits& logits, const AnswerSpan& gold);

Tensor total_loss(const Tensor& ce, const Tensor& con, const ContrastiveConfig& config);
double total_loss(double ce, double con, const ContrastiveConfig& config);

}  // namespace caqa
