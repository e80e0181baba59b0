#include "caqa/adaptation.hpp"

#include <algorithm>
#include <cmath>

#include "caqa/error.hpp"

namespace caqa {

KernelConfig KernelConfig::fixed(std::vector<double> gammas) {
  KernelConfig k;
  k.bandwidths = std::move(gammas);
  k.median_heuristic = false;
  k.multipliers.clear();
  return k;
}

KernelConfig KernelConfig::median(std::vector<double> multipliers) {
  KernelConfig k;
  k.median_heuristic = true;
  k.multipliers = std::move(multipliers);
  return k;
}

void KernelConfig::validate() const {
  const auto& list = median_heuristic ? multipliers : bandwidths;
  const char* what = median_heuristic ? "median multiplier" : "bandwidth";
  if (list.empty()) throw InvalidArgument(std::string("kernel: at least one ") + what + " required");
  for (double g : list)
    if (!(g > 0.0) || !std::isfinite(g))
      throw InvalidArgument(std::string("kernel: ") + what + " must be positive, got " + std::to_string(g));
}

std::vector<double> resolve_bandwidths(const KernelConfig& kernel, const Tensor& points) {
  kernel.validate();
  if (!kernel.median_heuristic) return kernel.bandwidths;
  const std::size_t n = points.dim(0), h = points.dim(1);
  auto v = points.values();
  std::vector<double> d;
  d.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h; ++c) {
        const double t = v[i * h + c] - v[j * h + c];
        s += t * t;
      }
      d.push_back(s);
    }
  double med = 0.0;
  if (!d.empty()) {
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size();
    med = m % 2 ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2]);
  }
  if (!(med > 0.0)) med = 1.0;
  std::vector<double> out;
  for (double mult : kernel.multipliers) out.push_back(med * mult);
  return out;
}

namespace {

void check_gammas(std::span<const double> gammas) {
  if (gammas.empty()) throw InvalidArgument("kernel: no bandwidths");
  for (double g : gammas)
    if (!(g > 0.0)) throw InvalidArgument("kernel: bandwidth must be positive, got " + std::to_string(g));
}

}  // namespace

double gaussian_kernel(std::span<const double> x, std::span<const double> y, std::span<const double> gammas) {
  if (x.size() != y.size())
    throw ShapeError("gaussian_kernel: dimensions " + std::to_string(x.size()) + " and " +
                     std::to_string(y.size()) + " differ");
  check_gammas(gammas);
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
  double k = 0.0;
  for (double g : gammas) k += std::exp(-d / g);
  return k / static_cast<double>(gammas.size());
}

Tensor kernel_matrix(const Tensor& x, const Tensor& y, std::span<const double> gammas) {
  check_gammas(gammas);
  Tensor d = clamp_min(pairwise_sq_dist(x, y), 0.0);
  Tensor k;
  for (double g : gammas) {
    Tensor term = exp(scale(d, -1.0 / g));
    k = k ? add(k, term) : term;
  }
  return gammas.size() == 1 ? k : scale(k, 1.0 / static_cast<double>(gammas.size()));
}

Tensor mmd_squared(const Tensor& x, const Tensor& y, std::span<const double> gammas) {
  Tensor xx = mean(kernel_matrix(x, x, gammas));
  Tensor yy = mean(kernel_matrix(y, y, gammas));
  Tensor xy = mean(kernel_matrix(x, y, gammas));
  return sub(add(xx, yy), scale(xy, 2.0));
}

namespace {

Tensor to_matrix(const std::vector<std::vector<double>>& rows, const char* what) {
  if (rows.empty()) throw InvalidArgument(std::string("mmd: ") + what + " set is empty");
  const std::size_t h = rows[0].size();
  std::vector<double> flat;
  flat.reserve(rows.size() * h);
  for (const auto& r : rows) {
    if (r.size() != h) throw ShapeError(std::string("mmd: ragged vectors in ") + what + " set");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor::from({rows.size(), h}, std::move(flat));
}

}  // namespace

double mmd_squared(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y,
                   const KernelConfig& kernel) {
  Tensor tx = to_matrix(x, "first");
  Tensor ty = to_matrix(y, "second");
  if (tx.dim(1) != ty.dim(1)) throw ShapeError("mmd: sets have different dimensions");
  NoGradGuard no_grad;
  std::vector<double> gammas;
  if (kernel.median_heuristic) {
    std::vector<std::vector<double>> pooled = x;
    pooled.insert(pooled.end(), y.begin(), y.end());
    gammas = resolve_bandwidths(kernel, to_matrix(pooled, "pooled"));
  } else {
    kernel.validate();
    gammas = kernel.bandwidths;
  }
  return mmd_squared(tx, ty, gammas).item();
}

ClassMeans class_means(const Tensor& features, const TokenizedSample& sample) {
  if (features.ndim() != 2 || features.dim(0) != sample.length())
    throw ShapeError("class_means: features " + shape_str(features.shape()) + " vs sample length " +
                     std::to_string(sample.length()));
  std::vector<std::uint8_t> cq(sample.length(), 0);
  bool any_answer = false, any_cq = false;
  for (std::size_t i = 0; i < sample.length(); ++i) {
    any_answer = any_answer || sample.answer_mask[i];
    cq[i] = (sample.question_mask[i] || sample.context_mask[i]) && !sample.answer_mask[i];
    any_cq = any_cq || cq[i];
  }
  if (!any_answer) throw InvalidArgument("class_means: sample " + sample.id + " has an empty answer mask");
  if (!any_cq) throw InvalidArgument("class_means: sample " + sample.id + " has no context/question tokens");
  return {masked_mean(features, sample.answer_mask), masked_mean(features, cq), sample.domain};
}

void ContrastiveConfig::validate() const {
  std::vector<std::string> problems;
  if (!(beta >= 0.0) || !std::isfinite(beta)) problems.push_back("beta: must be a finite value >= 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
    problems.push_back("noise_sigma: must be a finite value >= 0");
  try {
    kernel.validate();
  } catch (const InvalidArgument& e) {
    problems.push_back(std::string("bandwidths: ") + e.what());
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

ContrastiveTerms contrastive_terms(std::span<const ClassMeans> batch, const ContrastiveConfig& config) {
  if (batch.empty()) throw InvalidArgument("contrastive_loss: empty batch");
  std::vector<double> gammas;
  if (config.kernel.median_heuristic) {
    std::vector<Tensor> all;
    for (const auto& m : batch) {
      all.push_back(m.answer_mean);
      all.push_back(m.cq_mean);
    }
    NoGradGuard no_grad;
    gammas = resolve_bandwidths(config.kernel, stack_rows(all));
  } else {
    config.kernel.validate();
    gammas = config.kernel.bandwidths;
  }
  return contrastive_terms(batch, config, gammas);
}

ContrastiveTerms contrastive_terms(std::span<const ClassMeans> batch, const ContrastiveConfig& config,
                                   std::span<const double> gammas) {
  if (batch.empty()) throw InvalidArgument("contrastive_loss: empty batch");
  std::vector<Tensor> answers, cqs;
  for (const auto& m : batch) {
    answers.push_back(m.answer_mean);
    cqs.push_back(m.cq_mean);
  }
  Tensor a = stack_rows(answers);
  Tensor c = stack_rows(cqs);

  ContrastiveTerms t;
  t.bandwidths.assign(gammas.begin(), gammas.end());
  t.answer_cq = mean(kernel_matrix(a, c, gammas));
  if (config.pairing_variant == PairingVariant::MixedBatch) {
    t.answer_answer = mean(kernel_matrix(a, a, gammas));
    t.cq_cq = mean(kernel_matrix(c, c, gammas));
  } else {
    std::vector<Tensor> as, at, cs, ct;
    for (const auto& m : batch) {
      const bool src = m.domain == DomainTag::Source;
      (src ? as : at).push_back(m.answer_mean);
      (src ? cs : ct).push_back(m.cq_mean);
    }
    if (as.empty() || at.empty())
      throw InvalidArgument("contrastive_loss: domain-separated pairing needs both source and target samples");
    // Symmetrized over (source, target) and (target, source) ordered pairs.
    // The kernel is symmetric so both halves agree and the mean over the
    // |S| x |T| block equals the mean over all 2|S||T| ordered pairs.
    t.answer_answer = mean(kernel_matrix(stack_rows(as), stack_rows(at), gammas));
    t.cq_cq = mean(kernel_matrix(stack_rows(cs), stack_rows(ct), gammas));
  }
  if (config.sign_variant == SignVariant::AsPrinted)
    t.loss = sub(add(t.answer_answer, t.cq_cq), t.answer_cq);
  else
    t.loss = sub(t.answer_cq, add(t.answer_answer, t.cq_cq));
  return t;
}

Tensor contrastive_loss(std::span<const ClassMeans> batch, const ContrastiveConfig& config) {
  return contrastive_terms(batch, config).loss;
}

Tensor span_cross_entropy(const SpanLogits& logits, const AnswerSpan& gold) {
  const std::size_t l = logits.start.numel();
  if (logits.end.numel() != l) throw ShapeError("span_cross_entropy: start/end lengths differ");
  if (gold.start >= l || gold.end >= l || gold.start > gold.end)
    throw InvalidArgument("span_cross_entropy: gold span (" + std::to_string(gold.start) + ", " +
                          std::to_string(gold.end) + ") outside sequence of length " + std::to_string(l));
  Tensor s = select(log_softmax(logits.start), gold.start);
  Tensor e = select(log_softmax(logits.end), gold.end);
  return scale(add(s, e), -0.5);
}

Tensor total_loss(const Tensor& ce, const Tensor& con, const ContrastiveConfig& config) {
  return add(ce, scale(con, config.beta));
}

double total_loss(double ce, double con, const ContrastiveConfig& config) { return ce + config.beta * con; }

}  // namespace caqa
