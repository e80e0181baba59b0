#include "caqa/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "caqa/error.hpp"
#include "json.hpp"

namespace caqa {

std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) continue;
    lowered += static_cast<char>(std::tolower(c));
  }
  std::string out;
  std::istringstream words(lowered);
  std::string w;
  while (words >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

EmF1 em_f1(std::string_view prediction, std::string_view gold) {
  const std::string p = normalize_answer(prediction), g = normalize_answer(gold);
  EmF1 r;
  r.em = p == g ? 1.0 : 0.0;
  auto tokens = [](const std::string& s) {
    std::map<std::string, int> m;
    std::istringstream is(s);
    std::string w;
    int n = 0;
    while (is >> w) {
      ++m[w];
      ++n;
    }
    return std::pair{m, n};
  };
  auto [pm, pn] = tokens(p);
  auto [gm, gn] = tokens(g);
  if (pn == 0 || gn == 0) {
    r.f1 = pn == gn ? 1.0 : 0.0;
    return r;
  }
  int common = 0;
  for (const auto& [w, c] : pm) {
    auto it = gm.find(w);
    if (it != gm.end()) common += std::min(c, it->second);
  }
  if (common == 0) return r;
  const double precision = static_cast<double>(common) / pn;
  const double recall = static_cast<double>(common) / gn;
  r.f1 = 2.0 * precision * recall / (precision + recall);
  return r;
}

EvalResult aggregate(std::vector<SampleRecord> records) {
  if (records.empty()) throw InvalidArgument("evaluate: empty dataset");
  EvalResult r;
  double em = 0.0, f1 = 0.0;
  for (const auto& s : records) {
    em += s.em;
    f1 += s.f1;
  }
  r.count = records.size();
  r.em = 100.0 * em / static_cast<double>(r.count);
  r.f1 = 100.0 * f1 / static_cast<double>(r.count);
  r.records = std::move(records);
  return r;
}

std::string predict_answer(const QAModel& model, const RawQASample& sample, DomainTag domain,
                           std::size_t max_answer_len) {
  NoGradGuard no_grad;
  auto t = tokenize(sample.question, sample.context, std::nullopt, domain, model.config().max_seq_len, sample.id);
  auto span = predict_span(model.span_logits(model.encode(t)), t.context_mask, max_answer_len);
  return sample.context.substr(span.start - t.context_offset, span.end - span.start + 1);
}

EvalResult evaluate(const QAModel& model, const DomainDataset& data, std::size_t max_answer_len) {
  if (data.samples.empty()) throw InvalidArgument("evaluate: empty dataset");
  std::vector<SampleRecord> records;
  records.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    SampleRecord rec{s.id, "", s.answer, 0.0, 0.0, ""};
    try {
      rec.prediction = predict_answer(model, s, data.domain, max_answer_len);
      auto m = em_f1(rec.prediction, rec.gold);
      rec.em = m.em;
      rec.f1 = m.f1;
    } catch (const Error& e) {
      rec.error = e.what();
    }
    records.push_back(std::move(rec));
  }
  return aggregate(std::move(records));
}

void write_metrics(const std::filesystem::path& path, const EvalResult& result, const std::string& config_json) {
  nlohmann::ordered_json j;
  j["config"] = config_json.empty() ? nlohmann::ordered_json::object() : nlohmann::ordered_json::parse(config_json);
  j["em"] = result.em;
  j["f1"] = result.f1;
  j["count"] = result.count;
  auto& recs = j["records"] = nlohmann::ordered_json::array();
  for (const auto& r : result.records) {
    nlohmann::ordered_json o = {{"id", r.id}, {"prediction", r.prediction}, {"gold", r.gold}, {"em", r.em}, {"f1", r.f1}};
    if (!r.error.empty()) o["error"] = r.error;
    recs.push_back(std::move(o));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << j.dump(1) << "\n";
}

std::vector<std::vector<double>> answer_features(const QAModel& model, const DomainDataset& data) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> out;
  for (const auto& s : data.samples) {
    TokenizedSample t;
    try {
      t = to_tokenized(s, data.domain, model.config().max_seq_len);
    } catch (const InvalidArgument&) {
      continue;
    }
    auto m = class_means(model.encode(t), t);
    auto v = m.answer_mean.values();
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

double domain_gap(const QAModel& model, const DomainDataset& source, const DomainDataset& target,
                  const KernelConfig& kernel) {
  return mmd_squared(answer_features(model, source), answer_features(model, target), kernel);
}

std::string_view to_string(TokenClass c) {
  switch (c) {
    case TokenClass::Answer: return "answer";
    case TokenClass::Question: return "question";
    case TokenClass::Other: return "other";
  }
  return "other";
}

SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw ShapeError("symmetric_eigen: expected " + std::to_string(n * n) + " entries");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  double scale = 0.0;
  for (double x : a) scale += x * x;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    if (off <= 1e-30 * scale || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return at(x, x) > at(y, y); });
  SymmetricEigen r;
  r.values.resize(n);
  r.vectors.resize(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    r.values[c] = at(order[c], order[c]);
    for (std::size_t k = 0; k < n; ++k) r.vectors[k * n + c] = v[k * n + order[c]];
  }
  return r;
}

ProjectedPoints pca_project(const std::vector<std::vector<double>>& x) {
  if (x.size() < 2) throw InvalidArgument("pca_project: need at least 2 points, got " + std::to_string(x.size()));
  const std::size_t n = x.size(), h = x[0].size();
  if (h == 0) throw InvalidArgument("pca_project: zero-dimensional features");
  for (const auto& r : x)
    if (r.size() != h) throw ShapeError("pca_project: ragged feature rows");
  ProjectedPoints out;
  out.mean.assign(h, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < h; ++j) out.mean[j] += r[j];
  for (auto& m : out.mean) m /= static_cast<double>(n);
  std::vector<double> cov(h * h, 0.0);
  for (const auto& r : x)
    for (std::size_t i = 0; i < h; ++i) {
      const double di = r[i] - out.mean[i];
      for (std::size_t j = i; j < h; ++j) cov[i * h + j] += di * (r[j] - out.mean[j]);
    }
  double total = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = i; j < h; ++j) {
      cov[i * h + j] /= static_cast<double>(n - 1);
      cov[j * h + i] = cov[i * h + j];
    }
    total += cov[i * h + i];
  }
  if (!(total > 0.0)) throw InvalidArgument("pca_project: data has zero variance");
  auto eig = symmetric_eigen(std::move(cov), h);
  for (std::size_t c = 0; c < 2; ++c) {
    auto& comp = out.components[c];
    comp.assign(h, 0.0);
    if (c < h)
      for (std::size_t k = 0; k < h; ++k) comp[k] = eig.vectors[k * h + c];
    for (double val : comp)
      if (std::abs(val) > 1e-12) {
        if (val < 0)
          for (auto& y : comp) y = -y;
        break;
      }
    const double lam = c < h ? std::max(0.0, eig.values[c]) : 0.0;
    out.explained_variance_ratio[c] = std::min(1.0, lam / total);
  }
  out.coords.reserve(n);
  for (const auto& r : x) {
    std::array<double, 2> p{0.0, 0.0};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < h; ++k) p[c] += (r[k] - out.mean[k]) * out.components[c][k];
    out.coords.push_back(p);
  }
  return out;
}

TokenFeatures token_features(const QAModel& model, const DomainDataset& data, std::size_t max_samples) {
  NoGradGuard no_grad;
  TokenFeatures out;
  std::size_t used = 0;
  for (const auto& s : data.samples) {
    if (used == max_samples) break;
    TokenizedSample t;
    try {
      t = to_tokenized(s, data.domain, model.config().max_seq_len);
    } catch (const InvalidArgument&) {
      continue;
    }
    ++used;
    Tensor f = model.encode(t);
    const std::size_t h = f.dim(1);
    auto v = f.values();
    for (std::size_t i = 0; i < t.length(); ++i) {
      out.features.emplace_back(v.begin() + i * h, v.begin() + (i + 1) * h);
      out.labels.push_back(t.answer_mask[i]     ? TokenClass::Answer
                           : t.question_mask[i] ? TokenClass::Question
                                                : TokenClass::Other);
      out.sample_ids.push_back(s.id);
    }
  }
  return out;
}

void write_pca_dump(const std::filesystem::path& path, const ProjectedPoints& points, const TokenFeatures& tokens) {
  if (points.coords.size() != tokens.labels.size())
    throw ShapeError("write_pca_dump: " + std::to_string(points.coords.size()) + " points for " +
                     std::to_string(tokens.labels.size()) + " tokens");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  char buf[64];
  os << "# explained_variance_ratio";
  for (double r : points.explained_variance_ratio) {
    std::snprintf(buf, sizeof buf, " %.17g", r);
    os << buf;
  }
  os << "\n# special tokens and non-answer context tokens are labelled other\n";
  os << "x,y,label,sample_id\n";
  for (std::size_t i = 0; i < points.coords.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,", points.coords[i][0], points.coords[i][1]);
    os << buf << to_string(tokens.labels[i]) << ',' << tokens.sample_ids[i] << '\n';
  }
  if (!os) throw Error("write failed for " + path.string());
}

}  // namespace caqa
