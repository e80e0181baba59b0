#pragma once

// Synthetic QA data: corpus containers, a word-level n-gram toy generator
// with cloze questions, LM and roundtrip filtering, two synthetic domains
// with a controllable shift, and SQuAD-layout file I/O.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caqa/model.hpp"

namespace caqa {

struct RawQASample {
  std::string id;
  std::string question;
  std::string context;
  std::string answer;
  /// Byte offset of the answer inside the context.
  std::size_t answer_start = 0;

  /// Throws InvalidArgument when the context does not contain the answer at
  /// answer_start.
  void validate() const;
  bool operator==(const RawQASample&) const = default;
};

struct ContextOnly {
  std::string id;
  std::string text;
  std::string domain;
  bool operator==(const ContextOnly&) const = default;
};

struct GenCandidate {
  std::string context_id;
  std::string question;
  std::string answer;
  std::size_t answer_start = 0;
  /// One probability per answer word.
  std::vector<double> token_probs;
  /// Product of token_probs.
  double lm_score = 1.0;
  bool operator==(const GenCandidate&) const = default;
};

enum class Provenance { Human, Synthetic };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct DomainDataset {
  std::vector<RawQASample> samples;
  DomainTag domain = DomainTag::Source;
  Provenance provenance = Provenance::Human;
  /// Records dropped while loading because the answer offset did not match.
  std::size_t rejected = 0;
};

/// Whitespace-delimited words with their byte offsets.
struct Word {
  std::string_view text;
  std::size_t offset = 0;
};
std::vector<Word> split_words(std::string_view text);

/// Tokenizes a sample for the model; the answer span covers the answer bytes.
TokenizedSample to_tokenized(const RawQASample& s, DomainTag domain, std::size_t max_len);

// ---------------------------------------------------------------------------
// Toy generator

enum class NgramOrder { Unigram, Bigram };

/// Word-level n-gram model with add-one smoothing. The vocabulary size V is
/// the number of distinct training words plus one slot for unseen words, so
/// every conditional distribution sums to one:
///   P(w)        = (c(w) + 1) / (N + V)
///   P(w | prev) = (c(prev w) + 1) / (c(prev as history) + V)
class ToyGenerator {
 public:
  /// Throws InvalidArgument on an empty corpus or one without any words.
  static ToyGenerator fit(std::span<const ContextOnly> corpus, NgramOrder order, std::uint64_t seed);

  NgramOrder order() const { return order_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t vocab_size() const { return unigram_.size() + 1; }
  std::size_t total_words() const { return total_; }

  double unigram_prob(std::string_view w) const;
  double bigram_prob(std::string_view prev, std::string_view w) const;
  /// Probability of w given the preceding word; unigram order or an empty
  /// `prev` ignores the history.
  double word_prob(std::string_view prev, std::string_view w) const;

  bool operator==(const ToyGenerator&) const = default;

 private:
  NgramOrder order_ = NgramOrder::Unigram;
  std::uint64_t seed_ = 0;
  std::size_t total_ = 0;
  std::map<std::string, std::size_t, std::less<>> unigram_;
  std::map<std::string, std::size_t, std::less<>> history_;
  std::map<std::pair<std::string, std::string>, std::size_t> bigram_;
};

struct GenerateOptions {
  std::size_t max_answer_words = 10;
  /// Context words kept on each side of the placeholder in the question.
  std::size_t question_window = 2;
};

inline constexpr std::string_view kClozePlaceholder = "@";

/// Cloze question for words [first, last]: up to `window` words either side
/// with the answer replaced by the placeholder.
std::string cloze_question(std::span<const Word> words, std::size_t first, std::size_t last, std::size_t window);

/// n seeded word-aligned span proposals with cloze questions and per-word LM
/// probabilities. The first answer word is conditioned on the preceding
/// context word when there is one. Throws InvalidArgument if n == 0 or the
/// context has no words.
std::vector<GenCandidate> generate_candidates(const ToyGenerator& gen, const ContextOnly& ctx, std::size_t n,
                                              std::uint64_t seed, const GenerateOptions& opts = {});

/// Geometric mean of the token probabilities.
double length_normalized_score(const GenCandidate& c);

/// The k highest-scoring candidates in descending score order; equal scores
/// keep their input order.
std::vector<GenCandidate> lm_filter(std::span<const GenCandidate> cands, std::size_t k,
                                    bool length_normalized = false);

struct RoundtripDrop {
  std::size_t index = 0;
  std::string reason;
};

/// Answer text a QA model extracts for a sample; throws caqa::Error when the
/// sample cannot be processed.
using AnswerPredictor = std::function<std::string(const RawQASample&)>;

/// Keeps candidates whose predicted answer, normalized, equals the
/// normalized generated answer. Candidates the predictor rejects are
/// dropped and reported through `dropped`.
std::vector<GenCandidate> roundtrip_filter(std::span<const GenCandidate> cands, const ContextOnly& ctx,
                                           const AnswerPredictor& predict,
                                           std::vector<RoundtripDrop>* dropped = nullptr);
std::vector<GenCandidate> roundtrip_filter(std::span<const GenCandidate> cands, const ContextOnly& ctx,
                                           const QAModel& model, std::size_t max_answer_len,
                                           std::vector<RoundtripDrop>* dropped = nullptr);

struct SyntheticOptions {
  std::size_t k = 5;
  /// Proposals per context before filtering = proposal_factor * k.
  std::size_t proposal_factor = 4;
  /// Without the LM filter the first k distinct proposals are kept.
  bool lm_filter = true;
  bool length_normalized = false;
  /// Roundtrip filtering runs when a model is given.
  const QAModel* roundtrip_model = nullptr;
  std::size_t max_answer_len = 64;
  GenerateOptions generate;
};

struct SyntheticResult {
  DomainDataset dataset;
  /// Every candidate that survived filtering, in output order.
  std::vector<GenCandidate> candidates;
  /// Every distinct proposal before filtering.
  std::vector<GenCandidate> proposals;
  std::vector<std::string> drop_log;
};

/// Runs generation and filtering over every context. Duplicate span
/// proposals within a context collapse to their first occurrence. Each
/// context gets its own seed derived from `seed` and its index.
SyntheticResult build_synthetic_dataset(const ToyGenerator& gen, std::span<const ContextOnly> contexts,
                                        std::uint64_t seed, const SyntheticOptions& opts = {});

// ---------------------------------------------------------------------------
// Synthetic domains

/// Two corpora of lowercase filler words around one capitalized entity
/// answer per context. `shift` in [0, 1] moves the target from the source
/// distribution (0) to its own word-frequency profile and answer-length mean
/// (1).
struct DomainShiftSpec {
  std::size_t source_samples = 1000;
  std::size_t target_samples = 1000;
  std::size_t filler_vocab = 32;
  std::size_t entity_vocab = 16;
  std::size_t context_words = 8;
  double zipf_exponent = 1.0;
  double source_answer_mean = 1.89;
  double target_answer_mean = 4.43;
  std::size_t max_answer_words = 10;
  std::size_t question_window = 2;
  double shift = 1.0;

  /// Throws ConfigError listing each invalid field.
  void validate() const;
};

struct SyntheticDomains {
  DomainDataset source;
  std::vector<ContextOnly> target_contexts;
  /// Gold questions for the target contexts; evaluation only.
  DomainDataset target_gold;
};

SyntheticDomains make_synthetic_domains(const DomainShiftSpec& spec, std::uint64_t seed);

/// Deterministic pronounceable pseudo-word for index i (< 4900).
std::string pseudo_word(std::size_t i);

// ---------------------------------------------------------------------------
// Files

/// SQuAD v1.1 layout. Samples sharing a context are written as one
/// paragraph. Throws FormatError with a JSON path for malformed records;
/// records whose answer does not sit at answer_start are counted in
/// `rejected` and skipped.
DomainDataset load_squad_json(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const DomainDataset& data);

/// Context-only corpus as a SQuAD file whose paragraphs have empty qas.
std::vector<ContextOnly> load_contexts(const std::filesystem::path& path);
void write_contexts(const std::filesystem::path& path, std::span<const ContextOnly> contexts);

/// One JSON object per line.
void write_candidates(const std::filesystem::path& path, std::span<const GenCandidate> cands);
std::vector<GenCandidate> load_candidates(const std::filesystem::path& path);

}  // namespace caqa
