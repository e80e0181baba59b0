#pragma once

// Answer normalization, EM/F1, dataset evaluation, MMD domain gap between
// answer-mean features, and PCA projection of token features.

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caqa/adaptation.hpp"
#include "caqa/datagen.hpp"
#include "caqa/model.hpp"

namespace caqa {

/// Lowercase, drop ASCII punctuation, drop the words a/an/the, collapse
/// whitespace.
std::string normalize_answer(std::string_view text);

struct EmF1 {
  double em = 0.0;  // 0 or 1
  double f1 = 0.0;  // [0, 1]
};

EmF1 em_f1(std::string_view prediction, std::string_view gold);

struct SampleRecord {
  std::string id;
  std::string prediction;
  std::string gold;
  double em = 0.0;
  double f1 = 0.0;
  /// Non-empty when the sample could not be scored (counted as 0, 0).
  std::string error;
};

struct EvalResult {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  std::size_t count = 0;
  std::vector<SampleRecord> records;
};

/// Aggregates records into percentages. Throws InvalidArgument when empty.
EvalResult aggregate(std::vector<SampleRecord> records);

/// Predicted answer text for a sample under the model (noiseless pass).
std::string predict_answer(const QAModel& model, const RawQASample& sample, DomainTag domain,
                           std::size_t max_answer_len);

/// Throws InvalidArgument on an empty dataset.
EvalResult evaluate(const QAModel& model, const DomainDataset& data, std::size_t max_answer_len);

void write_metrics(const std::filesystem::path& path, const EvalResult& result, const std::string& config_json);

/// Answer-mean features of every tokenizable sample under the frozen model.
std::vector<std::vector<double>> answer_features(const QAModel& model, const DomainDataset& data);

/// mmd_squared between the source and target answer-mean features.
double domain_gap(const QAModel& model, const DomainDataset& source, const DomainDataset& target,
                  const KernelConfig& kernel);

enum class TokenClass { Answer, Question, Other };
std::string_view to_string(TokenClass c);

struct ProjectedPoints {
  std::vector<std::array<double, 2>> coords;
  std::array<double, 2> explained_variance_ratio{};
  /// Unit principal directions, each of length H.
  std::array<std::vector<double>, 2> components;
  std::vector<double> mean;
};

/// Projects mean-centered rows onto the top two principal directions. Each
/// component's first loading with magnitude above 1e-12 is made positive.
/// Throws InvalidArgument for fewer than 2 rows or zero total variance.
ProjectedPoints pca_project(const std::vector<std::vector<double>>& features);

/// Symmetric eigendecomposition by cyclic Jacobi rotations; eigenvalues in
/// descending order, eigenvectors as columns of `vectors` (row-major n x n).
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<double> vectors;
};
SymmetricEigen symmetric_eigen(std::vector<double> matrix, std::size_t n);

struct TokenFeatures {
  std::vector<std::vector<double>> features;
  std::vector<TokenClass> labels;
  std::vector<std::string> sample_ids;
};

/// Per-token final-layer features for up to `max_samples` samples. Context
/// tokens outside the answer and special tokens are labelled Other.
TokenFeatures token_features(const QAModel& model, const DomainDataset& data, std::size_t max_samples);

/// CSV with header "x,y,label,sample_id", preceded by comment lines with the
/// explained-variance ratios and the special-token labelling rule.
void write_pca_dump(const std::filesystem::path& path, const ProjectedPoints& points, const TokenFeatures& tokens);

}  // namespace caqa
