#include "caqa/model.hpp"

#include <cmath>
#include <random>

#include "caqa/error.hpp"

namespace caqa {

std::string_view to_string(DomainTag tag) {
  switch (tag) {
    case DomainTag::Source: return "source";
    case DomainTag::TargetSynthetic: return "target_synthetic";
    case DomainTag::Target: return "target";
  }
  return "source";
}

DomainTag domain_from_string(std::string_view s) {
  if (s == "source") return DomainTag::Source;
  if (s == "target_synthetic") return DomainTag::TargetSynthetic;
  if (s == "target") return DomainTag::Target;
  throw InvalidArgument("unknown domain tag '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Samples

void TokenizedSample::validate() const {
  const std::size_t l = token_ids.size();
  if (l == 0) throw InvalidArgument("sample " + id + ": empty token sequence");
  if (question_mask.size() != l || context_mask.size() != l || answer_mask.size() != l)
    throw InvalidArgument("sample " + id + ": mask lengths differ from sequence length");
  bool any_context = false;
  for (std::size_t i = 0; i < l; ++i) {
    const bool special = token_ids[i] == kClsId || token_ids[i] == kSepId;
    if (question_mask[i] && context_mask[i])
      throw InvalidArgument("sample " + id + ": question and context masks overlap at " + std::to_string(i));
    if (special && (question_mask[i] || context_mask[i] || answer_mask[i]))
      throw InvalidArgument("sample " + id + ": special token at " + std::to_string(i) + " carries a class");
    if (!special && !question_mask[i] && !context_mask[i])
      throw InvalidArgument("sample " + id + ": token " + std::to_string(i) + " belongs to no class");
    if (answer_mask[i] && !context_mask[i])
      throw InvalidArgument("sample " + id + ": answer token " + std::to_string(i) + " outside context");
    any_context = any_context || context_mask[i];
  }
  if (!any_context) throw InvalidArgument("sample " + id + ": empty context");
  if (answer) {
    if (answer->start > answer->end || answer->end >= l)
      throw InvalidArgument("sample " + id + ": answer span out of range");
    for (std::size_t i = 0; i < l; ++i) {
      const bool inside = i >= answer->start && i <= answer->end;
      if (static_cast<bool>(answer_mask[i]) != inside)
        throw InvalidArgument("sample " + id + ": answer mask disagrees with answer span");
    }
  } else {
    for (auto a : answer_mask)
      if (a) throw InvalidArgument("sample " + id + ": answer mask set without an answer span");
  }
}

TokenizedSample make_sample(std::span<const std::size_t> question_ids, std::span<const std::size_t> context_ids,
                            std::optional<AnswerSpan> context_answer, DomainTag domain) {
  if (context_ids.empty()) throw InvalidArgument("make_sample: empty context");
  TokenizedSample s;
  s.domain = domain;
  const std::size_t l = question_ids.size() + context_ids.size() + 3;
  s.token_ids.reserve(l);
  s.question_mask.assign(l, 0);
  s.context_mask.assign(l, 0);
  s.answer_mask.assign(l, 0);
  s.token_ids.push_back(kClsId);
  for (auto id : question_ids) {
    s.question_mask[s.token_ids.size()] = 1;
    s.token_ids.push_back(id);
  }
  s.token_ids.push_back(kSepId);
  s.context_offset = s.token_ids.size();
  for (auto id : context_ids) {
    s.context_mask[s.token_ids.size()] = 1;
    s.token_ids.push_back(id);
  }
  s.token_ids.push_back(kSepId);
  if (context_answer) {
    if (context_answer->start > context_answer->end || context_answer->end >= context_ids.size())
      throw InvalidArgument("make_sample: answer outside context");
    s.answer = AnswerSpan{s.context_offset + context_answer->start, s.context_offset + context_answer->end};
    for (std::size_t i = s.answer->start; i <= s.answer->end; ++i) s.answer_mask[i] = 1;
  }
  s.validate();
  return s;
}

TokenizedSample tokenize(std::string_view question, std::string_view context,
                         std::optional<std::pair<std::size_t, std::size_t>> answer, DomainTag domain,
                         std::size_t max_len, std::string id) {
  const std::size_t l = question.size() + context.size() + 3;
  if (l > max_len)
    throw InvalidArgument("sample " + id + ": " + std::to_string(l) + " tokens exceed maximum length " +
                          std::to_string(max_len));
  if (context.empty()) throw InvalidArgument("sample " + id + ": empty context");
  auto bytes = [&](std::string_view text, const char* what) {
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const auto b = static_cast<unsigned char>(text[i]);
      if (b < kFirstByteId)
        throw InvalidArgument("sample " + id + ": reserved byte " + std::to_string(b) + " in " + what +
                              " at offset " + std::to_string(i));
      ids.push_back(b);
    }
    return ids;
  };
  const auto q = bytes(question, "question");
  const auto c = bytes(context, "context");
  std::optional<AnswerSpan> span;
  if (answer) {
    const auto [start, len] = *answer;
    if (len == 0 || start + len > context.size())
      throw InvalidArgument("sample " + id + ": answer [" + std::to_string(start) + ", +" + std::to_string(len) +
                            ") outside context of length " + std::to_string(context.size()));
    span = AnswerSpan{start, start + len - 1};
  }
  auto s = make_sample(q, c, span, domain);
  s.id = std::move(id);
  return s;
}

// ---------------------------------------------------------------------------
// Config

void EncoderConfig::validate() const {
  std::vector<std::string> problems;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) problems.push_back(std::string(name) + ": must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(hidden_dim, "hidden_dim");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(ffn_dim, "ffn_dim");
  positive(max_seq_len, "max_seq_len");
  if (num_heads && hidden_dim % num_heads)
    problems.push_back("hidden_dim: " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                       std::to_string(num_heads));
  if (vocab_size && vocab_size <= kSepId) problems.push_back("vocab_size: must exceed the reserved ids");
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

// ---------------------------------------------------------------------------
// Model

std::vector<double> embedding_noise(std::size_t n, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw InvalidArgument("noise sigma must be non-negative");
  std::vector<double> out(n, 0.0);
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : out) v = dist(rng);
  return out;
}

QAModel::QAModel(const EncoderConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t h = config_.hidden_dim, f = config_.ffn_dim;
  auto uniform = [&](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  auto constant = [](Shape shape, double c) { return Tensor::full(std::move(shape), c, true); };
  auto add = [&](std::string name, Tensor t) { params_.push_back({std::move(name), std::move(t)}); };

  const double emb_bound = 0.1;
  const double h_bound = 1.0 / std::sqrt(static_cast<double>(h));
  const double f_bound = 1.0 / std::sqrt(static_cast<double>(f));
  add("embeddings.token", uniform({config_.vocab_size, h}, emb_bound));
  add("embeddings.position", uniform({config_.max_seq_len, h}, emb_bound));
  add("embeddings.ln.gamma", constant({h}, 1.0));
  add("embeddings.ln.beta", constant({h}, 0.0));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "attn.wq", uniform({h, h}, h_bound));
    add(p + "attn.bq", constant({h}, 0.0));
    add(p + "attn.wk", uniform({h, h}, h_bound));
    add(p + "attn.bk", constant({h}, 0.0));
    add(p + "attn.wv", uniform({h, h}, h_bound));
    add(p + "attn.bv", constant({h}, 0.0));
    add(p + "attn.wo", uniform({h, h}, h_bound));
    add(p + "attn.bo", constant({h}, 0.0));
    add(p + "ln1.gamma", constant({h}, 1.0));
    add(p + "ln1.beta", constant({h}, 0.0));
    add(p + "ffn.w1", uniform({h, f}, h_bound));
    add(p + "ffn.b1", constant({f}, 0.0));
    add(p + "ffn.w2", uniform({f, h}, f_bound));
    add(p + "ffn.b2", constant({h}, 0.0));
    add(p + "ln2.gamma", constant({h}, 1.0));
    add(p + "ln2.beta", constant({h}, 0.0));
  }
  add("head.w", uniform({h, 2}, h_bound));
  add("head.b", constant({2}, 0.0));
  bind();
}

void QAModel::bind() {
  std::size_t i = 0;
  auto next = [&]() -> Tensor& { return params_.at(i++).value; };
  tok_emb_ = next();
  pos_emb_ = next();
  emb_ln_g_ = next();
  emb_ln_b_ = next();
  layers_.assign(config_.num_layers, {});
  for (auto& layer : layers_) {
    layer.wq = next();
    layer.bq = next();
    layer.wk = next();
    layer.bk = next();
    layer.wv = next();
    layer.bv = next();
    layer.wo = next();
    layer.bo = next();
    layer.ln1_g = next();
    layer.ln1_b = next();
    layer.w1 = next();
    layer.b1 = next();
    layer.w2 = next();
    layer.b2 = next();
    layer.ln2_g = next();
    layer.ln2_b = next();
  }
  head_w_ = next();
  head_b_ = next();
}

std::size_t QAModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void QAModel::zero_span_head() {
  for (auto& v : head_w_.mutable_values()) v = 0.0;
  for (auto& v : head_b_.mutable_values()) v = 0.0;
}

QAModel QAModel::clone() const {
  QAModel copy(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].value.values();
    auto dst = copy.params_[i].value.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

Tensor QAModel::encode(const TokenizedSample& sample, double noise_sigma, std::uint64_t noise_seed) const {
  return encode(sample.token_ids, noise_sigma, noise_seed);
}

Tensor QAModel::encode(std::span<const std::size_t> ids, double noise_sigma, std::uint64_t noise_seed) const {
  const std::size_t l = ids.size(), h = config_.hidden_dim;
  if (l == 0) throw InvalidArgument("encode: empty sequence");
  if (l > config_.max_seq_len)
    throw InvalidArgument("encode: sequence of " + std::to_string(l) + " tokens exceeds maximum length " +
                          std::to_string(config_.max_seq_len));
  if (noise_sigma < 0.0) throw InvalidArgument("encode: noise sigma must be non-negative");

  Tensor x = embedding(tok_emb_, ids);
  if (noise_sigma > 0.0) x = add(x, Tensor::from({l, h}, embedding_noise(l * h, noise_sigma, noise_seed)));
  std::vector<std::size_t> positions(l);
  for (std::size_t i = 0; i < l; ++i) positions[i] = i;
  x = add(x, embedding(pos_emb_, positions));
  x = layer_norm(x, emb_ln_g_, emb_ln_b_);

  const std::size_t heads = config_.num_heads, dh = h / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& layer : layers_) {
    Tensor q = add(matmul(x, layer.wq), layer.bq);
    Tensor k = add(matmul(x, layer.wk), layer.bk);
    Tensor v = add(matmul(x, layer.wv), layer.bv);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
      outs.push_back(matmul(att, vh));
    }
    Tensor attn = heads == 1 ? outs[0] : concat_cols(outs);
    attn = add(matmul(attn, layer.wo), layer.bo);
    x = layer_norm(add(x, attn), layer.ln1_g, layer.ln1_b);
    Tensor ff = add(matmul(gelu(add(matmul(x, layer.w1), layer.b1)), layer.w2), layer.b2);
    x = layer_norm(add(x, ff), layer.ln2_g, layer.ln2_b);
  }
  return x;
}

SpanLogits QAModel::span_logits(const Tensor& features) const {
  if (features.ndim() != 2 || features.dim(1) != config_.hidden_dim)
    throw ShapeError("span_logits: expected [L," + std::to_string(config_.hidden_dim) + "] features, got " +
                     shape_str(features.shape()));
  Tensor scores = transpose(add(matmul(features, head_w_), head_b_));  // [2, L]
  return {row(scores, 0), row(scores, 1)};
}

// ---------------------------------------------------------------------------
// Decoding

AnswerSpan predict_span(std::span<const double> start_scores, std::span<const double> end_scores,
                        std::span<const std::uint8_t> context_mask, std::size_t max_answer_len) {
  const std::size_t l = start_scores.size();
  if (end_scores.size() != l || context_mask.size() != l)
    throw ShapeError("predict_span: score and mask lengths differ");
  if (max_answer_len == 0) throw InvalidArgument("predict_span: max_answer_len must be at least 1");
  bool found = false;
  AnswerSpan best;
  double best_score = 0.0;
  for (std::size_t s = 0; s < l; ++s) {
    if (!context_mask[s]) continue;
    for (std::size_t e = s; e < l && e < s + max_answer_len; ++e) {
      if (!context_mask[e]) continue;
      const double score = start_scores[s] + end_scores[e];
      if (!found || score > best_score) {
        found = true;
        best_score = score;
        best = {s, e};
      }
    }
  }
  if (!found) throw InvalidArgument("predict_span: empty context mask");
  return best;
}

AnswerSpan predict_span(const SpanLogits& logits, std::span<const std::uint8_t> context_mask,
                        std::size_t max_answer_len) {
  return predict_span(logits.start.values(), logits.end.values(), context_mask, max_answer_len);
}

}  // namespace caqa
