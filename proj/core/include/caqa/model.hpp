#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caqa/tensor.hpp"

namespace caqa {

enum class DomainTag { Source, TargetSynthetic, Target };

std::string_view to_string(DomainTag tag);
DomainTag domain_from_string(std::string_view s);

/// Token-level answer interval, both ends inclusive.
struct AnswerSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const AnswerSpan&) const = default;
};

/// Byte-level input layout: [CLS] question [SEP] context [SEP].
/// Token ids 0..3 are reserved, so text bytes below 4 cannot be encoded.
inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kClsId = 1;
inline constexpr std::size_t kSepId = 2;
inline constexpr std::size_t kFirstByteId = 4;

struct TokenizedSample {
  std::string id;
  std::vector<std::size_t> token_ids;
  std::vector<std::uint8_t> question_mask;
  std::vector<std::uint8_t> context_mask;
  std::vector<std::uint8_t> answer_mask;
  std::optional<AnswerSpan> answer;
  DomainTag domain = DomainTag::Source;
  /// Token index of the first context byte; context byte i sits at
  /// context_offset + i.
  std::size_t context_offset = 0;

  std::size_t length() const { return token_ids.size(); }
  /// Throws InvalidArgument describing the first violated invariant.
  void validate() const;
};

/// `answer` is (byte offset, byte length) within `context`.
/// Throws InvalidArgument on reserved bytes, an out-of-range answer, or a
/// sequence longer than `max_len`.
TokenizedSample tokenize(std::string_view question, std::string_view context,
                         std::optional<std::pair<std::size_t, std::size_t>> answer, DomainTag domain,
                         std::size_t max_len, std::string id = {});

/// Builds a sample directly from token ids and segment lengths, bypassing
/// byte encoding. Used for small-vocabulary experiments and tests.
TokenizedSample make_sample(std::span<const std::size_t> question_ids,
                            std::span<const std::size_t> context_ids, std::optional<AnswerSpan> context_answer,
                            DomainTag domain);

struct EncoderConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 1234;

  /// Throws ConfigError listing every violated field.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct SpanLogits {
  Tensor start;  // [L]
  Tensor end;    // [L]
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// The Gaussian perturbation added to token embeddings: n draws of N(0, sigma)
/// from a generator seeded with `seed`.
std::vector<double> embedding_noise(std::size_t n, double sigma, std::uint64_t seed);

/// Post-LN transformer encoder with learned positions and a linear
/// start/end span head.
class QAModel {
 public:
  explicit QAModel(const EncoderConfig& config);
  QAModel(const QAModel&) = delete;
  QAModel& operator=(const QAModel&) = delete;
  QAModel(QAModel&&) = default;
  QAModel& operator=(QAModel&&) = default;

  const EncoderConfig& config() const { return config_; }

  /// Per-token features [L, H]. Noise is added to the token embeddings before
  /// the positional embeddings; sigma = 0 is the exact noiseless pass.
  Tensor encode(const TokenizedSample& sample, double noise_sigma = 0.0, std::uint64_t noise_seed = 0) const;
  Tensor encode(std::span<const std::size_t> token_ids, double noise_sigma = 0.0,
                std::uint64_t noise_seed = 0) const;

  SpanLogits span_logits(const Tensor& features) const;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Sets the span head to zero (uniform start/end distributions).
  void zero_span_head();

  /// Independent copy of every parameter.
  QAModel clone() const;

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor w1, b1, w2, b2;
    Tensor ln2_g, ln2_b;
  };

  void bind();  // refresh named handles from params_

  EncoderConfig config_;
  std::vector<NamedTensor> params_;
  Tensor tok_emb_, pos_emb_, emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
  Tensor head_w_, head_b_;
};

/// Highest-scoring (s, e) with s <= e <= s + max_answer_len - 1 and both
/// inside the context mask. Ties go to the smallest s, then the smallest e.
/// Throws InvalidArgument if the context mask is empty.
AnswerSpan predict_span(std::span<const double> start_scores, std::span<const double> end_scores,
                        std::span<const std::uint8_t> context_mask, std::size_t max_answer_len);
AnswerSpan predict_span(const SpanLogits& logits, std::span<const std::uint8_t> context_mask,
                        std::size_t max_answer_len);

// Checkpoints: binary container, magic "CAQACKPT", format version, encoder
// config header, then named parameter arrays.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const QAModel& model, const std::filesystem::path& path);
QAModel load_checkpoint(const std::filesystem::path& path);
/// Rejects a checkpoint whose stored config differs from `expected`.
QAModel load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

}  // namespace caqa
