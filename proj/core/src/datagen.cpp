#include "caqa/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "caqa/error.hpp"
#include "caqa/eval.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace caqa {

using nlohmann::json;

std::string_view to_string(Provenance p) { return p == Provenance::Human ? "human" : "synthetic"; }

Provenance provenance_from_string(std::string_view s) {
  if (s == "human") return Provenance::Human;
  if (s == "synthetic") return Provenance::Synthetic;
  throw InvalidArgument("unknown provenance '" + std::string(s) + "'");
}

void RawQASample::validate() const {
  if (answer.empty()) throw InvalidArgument("sample " + id + ": empty answer");
  if (answer_start + answer.size() > context.size() || context.compare(answer_start, answer.size(), answer) != 0)
    throw InvalidArgument("sample " + id + ": answer '" + answer + "' not found at offset " +
                          std::to_string(answer_start));
}

std::vector<Word> split_words(std::string_view text) {
  std::vector<Word> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t b = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > b) out.push_back({text.substr(b, i - b), b});
  }
  return out;
}

TokenizedSample to_tokenized(const RawQASample& s, DomainTag domain, std::size_t max_len) {
  s.validate();
  return tokenize(s.question, s.context, std::pair{s.answer_start, s.answer.size()}, domain, max_len, s.id);
}

// ---------------------------------------------------------------------------
// Toy generator

ToyGenerator ToyGenerator::fit(std::span<const ContextOnly> corpus, NgramOrder order, std::uint64_t seed) {
  if (corpus.empty()) throw InvalidArgument("fit_toy_generator: empty corpus");
  ToyGenerator g;
  g.order_ = order;
  g.seed_ = seed;
  for (const auto& ctx : corpus) {
    auto words = split_words(ctx.text);
    for (std::size_t i = 0; i < words.size(); ++i) {
      ++g.unigram_[std::string(words[i].text)];
      ++g.total_;
      if (order == NgramOrder::Bigram && i + 1 < words.size()) {
        ++g.history_[std::string(words[i].text)];
        ++g.bigram_[{std::string(words[i].text), std::string(words[i + 1].text)}];
      }
    }
  }
  if (g.total_ == 0) throw InvalidArgument("fit_toy_generator: corpus contains no words");
  return g;
}

double ToyGenerator::unigram_prob(std::string_view w) const {
  auto it = unigram_.find(w);
  const double c = it == unigram_.end() ? 0.0 : static_cast<double>(it->second);
  return (c + 1.0) / static_cast<double>(total_ + vocab_size());
}

double ToyGenerator::bigram_prob(std::string_view prev, std::string_view w) const {
  auto h = history_.find(prev);
  const double ch = h == history_.end() ? 0.0 : static_cast<double>(h->second);
  auto b = bigram_.find({std::string(prev), std::string(w)});
  const double cb = b == bigram_.end() ? 0.0 : static_cast<double>(b->second);
  return (cb + 1.0) / (ch + static_cast<double>(vocab_size()));
}

double ToyGenerator::word_prob(std::string_view prev, std::string_view w) const {
  if (order_ == NgramOrder::Unigram || prev.empty()) return unigram_prob(w);
  return bigram_prob(prev, w);
}

std::string cloze_question(std::span<const Word> words, std::size_t first, std::size_t last, std::size_t window) {
  std::string q;
  auto append = [&](std::string_view w) {
    if (!q.empty()) q += ' ';
    q += w;
  };
  for (std::size_t i = first > window ? first - window : 0; i < first; ++i) append(words[i].text);
  append(kClozePlaceholder);
  for (std::size_t i = last + 1; i < words.size() && i <= last + window; ++i) append(words[i].text);
  return q;
}

std::vector<GenCandidate> generate_candidates(const ToyGenerator& gen, const ContextOnly& ctx, std::size_t n,
                                              std::uint64_t seed, const GenerateOptions& opts) {
  if (n == 0) throw InvalidArgument("generate_candidates: n must be at least 1");
  if (opts.max_answer_words == 0) throw InvalidArgument("generate_candidates: max_answer_words must be positive");
  auto words = split_words(ctx.text);
  if (words.empty()) throw InvalidArgument("generate_candidates: context " + ctx.id + " has no words");
  std::mt19937_64 rng(seed);
  std::vector<GenCandidate> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t first = std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng);
    const std::size_t room = std::min(opts.max_answer_words, words.size() - first);
    const std::size_t len = std::uniform_int_distribution<std::size_t>(1, room)(rng);
    const std::size_t last = first + len - 1;
    GenCandidate c;
    c.context_id = ctx.id;
    c.answer_start = words[first].offset;
    c.answer = std::string(ctx.text.substr(c.answer_start, words[last].offset + words[last].text.size() - c.answer_start));
    c.question = cloze_question(words, first, last, opts.question_window);
    for (std::size_t i = first; i <= last; ++i) {
      const std::string_view prev = i > 0 ? words[i - 1].text : std::string_view{};
      c.token_probs.push_back(gen.word_prob(prev, words[i].text));
      c.lm_score *= c.token_probs.back();
    }
    out.push_back(std::move(c));
  }
  return out;
}

double length_normalized_score(const GenCandidate& c) {
  if (c.token_probs.empty()) return c.lm_score;
  double s = 0.0;
  for (double p : c.token_probs) s += std::log(p);
  return std::exp(s / static_cast<double>(c.token_probs.size()));
}

std::vector<GenCandidate> lm_filter(std::span<const GenCandidate> cands, std::size_t k, bool length_normalized) {
  if (k == 0) throw InvalidArgument("lm_filter: k must be at least 1");
  std::vector<double> score(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i)
    score[i] = length_normalized ? length_normalized_score(cands[i]) : cands[i].lm_score;
  std::vector<std::size_t> idx(cands.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(std::min(k, idx.size()));
  std::vector<GenCandidate> out;
  for (auto i : idx) out.push_back(cands[i]);
  return out;
}

std::vector<GenCandidate> roundtrip_filter(std::span<const GenCandidate> cands, const ContextOnly& ctx,
                                           const AnswerPredictor& predict, std::vector<RoundtripDrop>* dropped) {
  std::vector<GenCandidate> out;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    RawQASample s{ctx.id, c.question, ctx.text, c.answer, c.answer_start};
    try {
      if (normalize_answer(predict(s)) == normalize_answer(c.answer)) out.push_back(c);
    } catch (const Error& e) {
      if (dropped) dropped->push_back({i, e.what()});
    }
  }
  return out;
}

std::vector<GenCandidate> roundtrip_filter(std::span<const GenCandidate> cands, const ContextOnly& ctx,
                                           const QAModel& model, std::size_t max_answer_len,
                                           std::vector<RoundtripDrop>* dropped) {
  return roundtrip_filter(
      cands, ctx,
      [&](const RawQASample& s) { return predict_answer(model, s, DomainTag::TargetSynthetic, max_answer_len); },
      dropped);
}

SyntheticResult build_synthetic_dataset(const ToyGenerator& gen, std::span<const ContextOnly> contexts,
                                        std::uint64_t seed, const SyntheticOptions& opts) {
  if (opts.k == 0) throw InvalidArgument("build_synthetic_dataset: k must be at least 1");
  if (opts.proposal_factor == 0) throw InvalidArgument("build_synthetic_dataset: proposal_factor must be positive");
  SyntheticResult r;
  r.dataset.domain = DomainTag::TargetSynthetic;
  r.dataset.provenance = Provenance::Synthetic;
  for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
    const auto& ctx = contexts[ci];
    std::vector<GenCandidate> pool;
    try {
      auto raw = generate_candidates(gen, ctx, opts.k * opts.proposal_factor, detail::mix_seed(seed, ci), opts.generate);
      std::set<std::pair<std::size_t, std::size_t>> seen;
      for (auto& c : raw)
        if (seen.insert({c.answer_start, c.answer.size()}).second) pool.push_back(std::move(c));
    } catch (const InvalidArgument& e) {
      r.drop_log.push_back("context " + ctx.id + ": " + e.what());
      continue;
    }
    r.proposals.insert(r.proposals.end(), pool.begin(), pool.end());
    std::vector<GenCandidate> kept;
    if (opts.lm_filter) {
      kept = lm_filter(pool, opts.k, opts.length_normalized);
    } else {
      kept.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(opts.k, pool.size())));
    }
    if (opts.roundtrip_model) {
      std::vector<RoundtripDrop> drops;
      kept = roundtrip_filter(kept, ctx, *opts.roundtrip_model, opts.max_answer_len, &drops);
      for (const auto& d : drops) r.drop_log.push_back("context " + ctx.id + " candidate " + std::to_string(d.index) + ": " + d.reason);
    }
    for (std::size_t j = 0; j < kept.size(); ++j) {
      r.dataset.samples.push_back({ctx.id + "-q" + std::to_string(j), kept[j].question, ctx.text, kept[j].answer,
                                   kept[j].answer_start});
      r.candidates.push_back(kept[j]);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic domains

void DomainShiftSpec::validate() const {
  std::vector<std::string> p;
  if (source_samples == 0) p.push_back("source_samples: must be positive");
  if (target_samples == 0) p.push_back("target_samples: must be positive");
  if (filler_vocab == 0) p.push_back("filler_vocab: must be positive");
  if (entity_vocab == 0) p.push_back("entity_vocab: must be positive");
  if (filler_vocab + entity_vocab > 4900) p.push_back("filler_vocab + entity_vocab: at most 4900 pseudo-words");
  if (!std::isfinite(zipf_exponent) || zipf_exponent < 0.0) p.push_back("zipf_exponent: must be finite and >= 0");
  if (max_answer_words == 0) p.push_back("max_answer_words: must be positive");
  for (auto [v, name] : {std::pair{source_answer_mean, "source_answer_mean"}, {target_answer_mean, "target_answer_mean"}})
    if (!std::isfinite(v) || v < 1.0 || v > static_cast<double>(max_answer_words))
      p.push_back(std::string(name) + ": must lie in [1, max_answer_words]");
  if (!(shift >= 0.0 && shift <= 1.0)) p.push_back("shift: must lie in [0, 1]");
  if (!p.empty()) throw ConfigError(std::move(p));
}

std::string pseudo_word(std::size_t i) {
  static constexpr std::string_view cons = "bdfgklmnprstvz";
  static constexpr std::string_view vow = "aeiou";
  constexpr std::size_t ns = 70;
  if (i >= ns * ns) throw InvalidArgument("pseudo_word: index " + std::to_string(i) + " out of range");
  auto syl = [&](std::size_t s) { return std::string{cons[s / 5], vow[s % 5]}; };
  const std::size_t a = i % ns;
  const std::size_t b = (i / ns + 31 * a) % ns;
  return syl(a) + syl(b);
}

namespace {

std::vector<double> zipf_profile(std::size_t n, double a, bool reversed) {
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::pow(static_cast<double>(reversed ? n - i : i + 1), -a);
  const double z = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> mix(const std::vector<double>& a, const std::vector<double>& b, double t) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
  return out;
}

struct DomainProfile {
  std::vector<double> filler;
  std::vector<double> entity;
  double answer_mean;
};

RawQASample draw_sample(const DomainShiftSpec& spec, const DomainProfile& prof, std::mt19937_64& rng,
                        std::string id) {
  std::discrete_distribution<std::size_t> filler(prof.filler.begin(), prof.filler.end());
  std::discrete_distribution<std::size_t> entity(prof.entity.begin(), prof.entity.end());
  std::size_t len = 1;
  if (prof.answer_mean > 1.0) len += std::poisson_distribution<std::size_t>(prof.answer_mean - 1.0)(rng);
  len = std::min(len, spec.max_answer_words);
  const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, spec.context_words)(rng);

  std::vector<std::string> words;
  for (std::size_t i = 0; i < spec.context_words; ++i) words.push_back(pseudo_word(filler(rng)));
  std::vector<std::string> ans;
  for (std::size_t i = 0; i < len; ++i) {
    std::string w = pseudo_word(spec.filler_vocab + entity(rng));
    w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    ans.push_back(std::move(w));
  }
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), ans.begin(), ans.end());

  RawQASample s;
  s.id = std::move(id);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s.context += ' ';
    if (i == pos) s.answer_start = s.context.size();
    s.context += words[i];
  }
  auto w = split_words(s.context);
  s.answer = s.context.substr(s.answer_start, w[pos + len - 1].offset + w[pos + len - 1].text.size() - s.answer_start);
  s.question = cloze_question(w, pos, pos + len - 1, spec.question_window);
  return s;
}

}  // namespace

SyntheticDomains make_synthetic_domains(const DomainShiftSpec& spec, std::uint64_t seed) {
  spec.validate();
  DomainProfile src{zipf_profile(spec.filler_vocab, spec.zipf_exponent, false),
                    zipf_profile(spec.entity_vocab, spec.zipf_exponent, false), spec.source_answer_mean};
  DomainProfile tgt{mix(src.filler, zipf_profile(spec.filler_vocab, spec.zipf_exponent, true), spec.shift),
                    mix(src.entity, zipf_profile(spec.entity_vocab, spec.zipf_exponent, true), spec.shift),
                    spec.source_answer_mean + spec.shift * (spec.target_answer_mean - spec.source_answer_mean)};

  SyntheticDomains out;
  out.source.domain = DomainTag::Source;
  out.source.provenance = Provenance::Human;
  out.target_gold.domain = DomainTag::Target;
  out.target_gold.provenance = Provenance::Human;

  char buf[32];
  std::mt19937_64 rs(detail::mix_seed(seed, 0));
  for (std::size_t i = 0; i < spec.source_samples; ++i) {
    std::snprintf(buf, sizeof buf, "src-%05zu", i);
    out.source.samples.push_back(draw_sample(spec, src, rs, buf));
  }
  std::mt19937_64 rt(detail::mix_seed(seed, 1));
  for (std::size_t i = 0; i < spec.target_samples; ++i) {
    std::snprintf(buf, sizeof buf, "tgt-%05zu", i);
    auto s = draw_sample(spec, tgt, rt, buf);
    out.target_contexts.push_back({s.id, s.context, "target"});
    out.target_gold.samples.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("write failed for " + path.string());
}

const json& field(const json& obj, const char* key, const std::string& where, json::value_t type) {
  if (!obj.is_object()) throw FormatError(where, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw FormatError(where + "." + key, "missing field");
  const bool ok = it->type() == type || (type == json::value_t::number_unsigned && it->is_number_integer() &&
                                         it->get<std::int64_t>() >= 0);
  if (!ok) throw FormatError(where + "." + key, std::string("expected ") + json(type).type_name() + ", found " +
                                                    it->type_name());
  return *it;
}

std::string str_field(const json& obj, const char* key, const std::string& where) {
  return field(obj, key, where, json::value_t::string).get<std::string>();
}

std::string idx(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

json article_header(DomainTag domain, Provenance prov) {
  return {{"title", std::string(to_string(domain))}, {"provenance", std::string(to_string(prov))}};
}

}  // namespace

DomainDataset load_squad_json(const std::filesystem::path& path) {
  const json doc = read_json(path);
  const auto& data = field(doc, "data", "$", json::value_t::array);
  DomainDataset out;
  bool domain_set = false;
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string wa = idx("$.data", a);
    const auto& art = data[a];
    const auto& paras = field(art, "paragraphs", wa, json::value_t::array);
    if (!domain_set && art.contains("title") && art["title"].is_string()) {
      try {
        out.domain = domain_from_string(art["title"].get<std::string>());
      } catch (const InvalidArgument&) {
      }
      domain_set = true;
    }
    if (art.contains("provenance") && art["provenance"].is_string()) {
      try {
        out.provenance = provenance_from_string(art["provenance"].get<std::string>());
      } catch (const InvalidArgument&) {
      }
    }
    for (std::size_t p = 0; p < paras.size(); ++p) {
      const std::string wp = idx(wa + ".paragraphs", p);
      const std::string context = str_field(paras[p], "context", wp);
      const auto& qas = field(paras[p], "qas", wp, json::value_t::array);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string wq = idx(wp + ".qas", q);
        RawQASample s;
        s.id = str_field(qas[q], "id", wq);
        s.question = str_field(qas[q], "question", wq);
        s.context = context;
        const auto& answers = field(qas[q], "answers", wq, json::value_t::array);
        if (answers.empty()) throw FormatError(wq + ".answers", "no answers");
        const std::string wans = idx(wq + ".answers", 0);
        s.answer = str_field(answers[0], "text", wans);
        s.answer_start = field(answers[0], "answer_start", wans, json::value_t::number_unsigned).get<std::size_t>();
        try {
          s.validate();
        } catch (const InvalidArgument&) {
          ++out.rejected;
          continue;
        }
        out.samples.push_back(std::move(s));
      }
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const DomainDataset& data) {
  json paragraphs = json::array();
  for (std::size_t i = 0; i < data.samples.size();) {
    const auto& ctx = data.samples[i].context;
    json qas = json::array();
    for (; i < data.samples.size() && data.samples[i].context == ctx; ++i) {
      const auto& s = data.samples[i];
      qas.push_back({{"id", s.id},
                     {"question", s.question},
                     {"answers", json::array({{{"text", s.answer}, {"answer_start", s.answer_start}}})}});
    }
    paragraphs.push_back({{"context", ctx}, {"qas", std::move(qas)}});
  }
  json art = article_header(data.domain, data.provenance);
  art["paragraphs"] = std::move(paragraphs);
  json doc = {{"version", "1.1"}, {"data", json::array({std::move(art)})}};
  write_text(path, doc.dump(1) + "\n");
}

std::vector<ContextOnly> load_contexts(const std::filesystem::path& path) {
  const json doc = read_json(path);
  const auto& data = field(doc, "data", "$", json::value_t::array);
  std::vector<ContextOnly> out;
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string wa = idx("$.data", a);
    const auto& paras = field(data[a], "paragraphs", wa, json::value_t::array);
    std::string domain = data[a].contains("title") && data[a]["title"].is_string() ? data[a]["title"].get<std::string>()
                                                                                     : "target";
    for (std::size_t p = 0; p < paras.size(); ++p) {
      const std::string wp = idx(wa + ".paragraphs", p);
      ContextOnly c;
      c.text = str_field(paras[p], "context", wp);
      if (c.text.empty()) throw FormatError(wp + ".context", "empty context");
      c.id = paras[p].contains("context_id") ? str_field(paras[p], "context_id", wp) : "c" + std::to_string(out.size());
      c.domain = domain;
      out.push_back(std::move(c));
    }
  }
  return out;
}

void write_contexts(const std::filesystem::path& path, std::span<const ContextOnly> contexts) {
  json paragraphs = json::array();
  for (const auto& c : contexts)
    paragraphs.push_back({{"context", c.text}, {"context_id", c.id}, {"qas", json::array()}});
  const std::string domain = contexts.empty() ? "target" : contexts.front().domain;
  json doc = {{"version", "1.1"}, {"data", json::array({{{"title", domain}, {"paragraphs", std::move(paragraphs)}}})}};
  write_text(path, doc.dump(1) + "\n");
}

void write_candidates(const std::filesystem::path& path, std::span<const GenCandidate> cands) {
  std::string text;
  for (const auto& c : cands) {
    json j = {{"context_id", c.context_id}, {"question", c.question},       {"answer", c.answer},
              {"answer_start", c.answer_start}, {"token_probs", c.token_probs}, {"lm_score", c.lm_score}};
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

std::vector<GenCandidate> load_candidates(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::vector<GenCandidate> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(n);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(where, e.what());
    }
    GenCandidate c;
    c.context_id = str_field(j, "context_id", where);
    c.question = str_field(j, "question", where);
    c.answer = str_field(j, "answer", where);
    c.answer_start = field(j, "answer_start", where, json::value_t::number_unsigned).get<std::size_t>();
    c.token_probs = field(j, "token_probs", where, json::value_t::array).get<std::vector<double>>();
    c.lm_score = j.at("lm_score").get<double>();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace caqa
