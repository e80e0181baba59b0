#pragma once

// Training: configuration, mixed source/synthetic batching, AdamW with
// gradient clipping, the ce + beta * con objective, grid search over
// (beta, sigma), and run-directory outputs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caqa/adaptation.hpp"
#include "caqa/datagen.hpp"
#include "caqa/eval.hpp"
#include "caqa/model.hpp"

namespace caqa {

/// balanced: every batch holds ceil(share * B) source samples and the rest
/// synthetic until one side runs out. source_only: plain shuffled batches
/// over the source set.
enum class MixingPolicy { Balanced, SourceOnly };
/// dev_f1: highest F1 on the selection set. train_loss: lowest mean L_ce
/// over the final training epoch.
enum class SelectionCriterion { DevF1, TrainLoss };

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  MixingPolicy mixing = MixingPolicy::Balanced;
  double source_share = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  std::size_t max_answer_len = 64;
  /// Evaluate dev sets every this many epochs (and after the last one).
  std::size_t eval_every = 1;
  ContrastiveConfig contrastive;
  EncoderConfig encoder;

  /// Throws ConfigError listing every invalid field by key name.
  void validate() const;

  /// INI with sections [train], [contrastive] and [encoder]; keys are the
  /// field names above. Unknown keys are errors. Missing keys keep defaults.
  static TrainConfig from_ini(const std::filesystem::path& path);
  static TrainConfig from_ini_string(const std::string& text);
  std::string to_ini() const;
  std::string to_json() const;
};

std::string_view to_string(MixingPolicy p);
std::string_view to_string(SelectionCriterion c);
std::string_view to_string(SignVariant v);
std::string_view to_string(PairingVariant v);

/// Reference into the source (Source) or synthetic (TargetSynthetic) set.
struct BatchItem {
  DomainTag domain = DomainTag::Source;
  std::size_t index = 0;
  bool operator==(const BatchItem&) const = default;
};
using Batch = std::vector<BatchItem>;

class MixedBatchSampler {
 public:
  /// Throws InvalidArgument when the policy cannot be satisfied.
  MixedBatchSampler(std::size_t source_size, std::size_t synthetic_size, std::size_t batch_size,
                    MixingPolicy policy, double source_share, std::uint64_t seed);

  /// Batches for one epoch; every included sample appears exactly once.
  std::vector<Batch> epoch(std::size_t e) const;

 private:
  std::size_t ns_, nt_, batch_;
  MixingPolicy policy_;
  double share_;
  std::uint64_t seed_;
};

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps, double weight_decay);
  /// Applies one update from the parameters' accumulated gradients.
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_gradients(std::span<Tensor> params, double max_norm);
double gradient_norm(std::span<const Tensor> params);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double ce = 0.0;
  double con = 0.0;
  double qa = 0.0;
  double grad_norm = 0.0;
  std::size_t batch_size = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_ce = 0.0;
  double mean_qa = 0.0;
  std::vector<std::pair<std::string, EvalResult>> metrics;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  TrainConfig config;
};

struct NamedDataset {
  std::string name;
  const DomainDataset* data = nullptr;
};

struct TrainResult {
  QAModel model;
  TrainReport report;
};

/// Losses of one batch without touching the optimizer. `noise_seed_base`
/// seeds per-sample embedding noise.
struct BatchLoss {
  Tensor ce;
  Tensor con;
  Tensor qa;
};
BatchLoss batch_loss(const QAModel& model, std::span<const TokenizedSample* const> batch,
                     const ContrastiveConfig& config, std::uint64_t noise_seed_base);

/// Noise seed base used by train() for the given global step.
std::uint64_t step_noise_seed(std::uint64_t seed, std::size_t step);

/// Tokenizes every sample; throws InvalidArgument naming the first sample
/// that does not fit the model.
std::vector<TokenizedSample> tokenize_dataset(const DomainDataset& data, DomainTag domain, std::size_t max_len);

using StepCallback = std::function<void(const StepRecord&)>;

/// Throws DivergenceError if a loss or gradient turns non-finite.
TrainResult train(const TrainConfig& config, const DomainDataset& source, const DomainDataset& synthetic,
                  std::span<const NamedDataset> dev, const StepCallback& on_step = {});

/// Writes config.ini, steps.csv, epochs.json and model.ckpt into dir.
void write_run(const std::filesystem::path& dir, const TrainResult& result);

struct GridCell {
  double beta = 0.0;
  double sigma = 0.0;
  bool ok = false;
  std::string error;
  double dev_em = 0.0;
  double dev_f1 = 0.0;
  double train_ce = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  /// Index into cells; empty if every cell failed.
  std::optional<std::size_t> best;
};

/// Trains one model per (beta, sigma) cell with the base seed. `selection`
/// is evaluated after training for the dev_f1 criterion. Failed cells are
/// recorded and skipped. Ties go to the smaller beta, then smaller sigma.
GridResult grid_search(const TrainConfig& base, std::span<const double> betas, std::span<const double> sigmas,
                       SelectionCriterion criterion, const DomainDataset& source, const DomainDataset& synthetic,
                       const DomainDataset* selection);

/// Index of the winning cell under the criterion and tie-break rule.
std::optional<std::size_t> select_best(std::span<const GridCell> cells, SelectionCriterion criterion);

void write_grid(const std::filesystem::path& path, const GridResult& grid);

}  // namespace caqa
