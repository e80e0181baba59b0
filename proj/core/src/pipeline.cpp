#include "caqa/pipeline.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "caqa/error.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace caqa {

namespace pt = boost::property_tree;

std::string_view to_string(MixingPolicy p) { return p == MixingPolicy::Balanced ? "balanced" : "source_only"; }
std::string_view to_string(SelectionCriterion c) { return c == SelectionCriterion::DevF1 ? "dev_f1" : "train_loss"; }
std::string_view to_string(SignVariant v) { return v == SignVariant::AsPrinted ? "as_printed" : "similarity_flipped"; }
std::string_view to_string(PairingVariant v) {
  return v == PairingVariant::MixedBatch ? "mixed_batch" : "domain_separated";
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  std::vector<std::string> p;
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) p.push_back("train.learning_rate: must be > 0");
  if (epochs == 0) p.push_back("train.epochs: must be >= 1");
  if (batch_size == 0) p.push_back("train.batch_size: must be >= 1");
  if (mixing == MixingPolicy::Balanced && batch_size < 2)
    p.push_back("train.batch_size: must be >= 2 with balanced mixing");
  if (contrastive.pairing_variant == PairingVariant::DomainSeparated && batch_size < 2)
    p.push_back("train.batch_size: must be >= 2 with domain_separated pairing");
  if (!(source_share > 0.0 && source_share < 1.0)) p.push_back("train.source_share: must lie in (0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) p.push_back("train.adam_beta1: must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) p.push_back("train.adam_beta2: must lie in [0, 1)");
  if (!(adam_epsilon > 0.0) || !std::isfinite(adam_epsilon)) p.push_back("train.adam_epsilon: must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) p.push_back("train.weight_decay: must be >= 0");
  if (!(grad_clip > 0.0) || !std::isfinite(grad_clip)) p.push_back("train.grad_clip: must be > 0");
  if (max_answer_len == 0) p.push_back("train.max_answer_len: must be >= 1");
  if (eval_every == 0) p.push_back("train.eval_every: must be >= 1");
  try {
    contrastive.validate();
  } catch (const ConfigError& e) {
    for (const auto& s : e.problems()) p.push_back("contrastive." + s);
  }
  try {
    encoder.validate();
  } catch (const ConfigError& e) {
    for (const auto& s : e.problems()) p.push_back("encoder." + s);
  }
  if (!p.empty()) throw ConfigError(std::move(p));
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

class IniReader {
 public:
  explicit IniReader(const pt::ptree& tree) : tree_(tree) {}

  void read(const std::string& section, const std::string& key, double& out) {
    if (auto v = take(section, key)) {
      try {
        std::size_t used = 0;
        const double d = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
        out = d;
      } catch (const std::exception&) {
        problem(section, key, "expected a number, got '" + *v + "'");
      }
    }
  }
  void read(const std::string& section, const std::string& key, std::size_t& out) {
    if (auto v = take(section, key)) {
      try {
        std::size_t used = 0;
        if (v->empty() || (*v)[0] == '-') throw std::invalid_argument("negative");
        const auto u = std::stoull(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
        out = static_cast<std::size_t>(u);
      } catch (const std::exception&) {
        problem(section, key, "expected a non-negative integer, got '" + *v + "'");
      }
    }
  }
  void read(const std::string& section, const std::string& key, std::uint64_t& out, int) {
    std::size_t tmp = out;
    read(section, key, tmp);
    out = tmp;
  }
  template <typename E>
  void read_enum(const std::string& section, const std::string& key, E& out,
                 std::initializer_list<std::pair<std::string_view, E>> options) {
    if (auto v = take(section, key)) {
      for (const auto& [name, value] : options)
        if (*v == name) {
          out = value;
          return;
        }
      std::string allowed;
      for (const auto& [name, value] : options) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
      problem(section, key, "expected one of " + allowed + ", got '" + *v + "'");
    }
  }
  void read_list(const std::string& section, const std::string& key, std::vector<double>& out) {
    if (auto v = take(section, key)) {
      if (auto vals = parse_doubles(*v))
        out = std::move(*vals);
      else
        problem(section, key, "expected a comma-separated list of numbers, got '" + *v + "'");
    }
  }
  static std::optional<std::vector<double>> parse_doubles(const std::string& text) {
    std::vector<double> vals;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t used = 0;
        item.erase(0, item.find_first_not_of(' '));
        item.erase(item.find_last_not_of(' ') + 1);
        vals.push_back(std::stod(item, &used));
        if (used != item.size()) return std::nullopt;
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
    return vals;
  }
  std::optional<std::string> take(const std::string& section, const std::string& key) {
    auto s = tree_.get_child_optional(section);
    if (!s) return std::nullopt;
    auto v = s->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    seen_.push_back(section + "." + key);
    return *v;
  }
  void problem(const std::string& section, const std::string& key, const std::string& what) {
    problems_.push_back(section + "." + key + ": " + what);
  }
  std::vector<std::string> finish() {
    for (const auto& [section, child] : tree_) {
      if (child.empty()) {
        problems_.push_back(section + ": key outside any section");
        continue;
      }
      if (section != "train" && section != "contrastive" && section != "encoder" && section != "data") {
        problems_.push_back(section + ": unknown section");
        continue;
      }
      if (section == "data") continue;
      for (const auto& [key, value] : child)
        if (std::find(seen_.begin(), seen_.end(), section + "." + key) == seen_.end())
          problems_.push_back(section + "." + key + ": unknown key");
    }
    return std::move(problems_);
  }

 private:
  const pt::ptree& tree_;
  std::vector<std::string> seen_;
  std::vector<std::string> problems_;
};

TrainConfig from_tree(const pt::ptree& tree) {
  TrainConfig c;
  IniReader r(tree);
  r.read("train", "learning_rate", c.learning_rate);
  r.read("train", "epochs", c.epochs);
  r.read("train", "batch_size", c.batch_size);
  r.read_enum("train", "mixing", c.mixing,
              {{"balanced", MixingPolicy::Balanced}, {"source_only", MixingPolicy::SourceOnly}});
  r.read("train", "source_share", c.source_share);
  r.read("train", "adam_beta1", c.adam_beta1);
  r.read("train", "adam_beta2", c.adam_beta2);
  r.read("train", "adam_epsilon", c.adam_epsilon);
  r.read("train", "weight_decay", c.weight_decay);
  r.read("train", "grad_clip", c.grad_clip);
  r.read("train", "seed", c.seed, 0);
  r.read("train", "max_answer_len", c.max_answer_len);
  r.read("train", "eval_every", c.eval_every);

  auto& k = c.contrastive;
  r.read("contrastive", "beta", k.beta);
  r.read("contrastive", "noise_sigma", k.noise_sigma);
  r.read_enum("contrastive", "sign_variant", k.sign_variant,
              {{"as_printed", SignVariant::AsPrinted}, {"similarity_flipped", SignVariant::SimilarityFlipped}});
  r.read_enum("contrastive", "pairing_variant", k.pairing_variant,
              {{"mixed_batch", PairingVariant::MixedBatch}, {"domain_separated", PairingVariant::DomainSeparated}});
  if (auto bw = r.take("contrastive", "bandwidths")) {
    if (*bw == "median") {
      k.kernel.median_heuristic = true;
    } else if (auto vals = IniReader::parse_doubles(*bw)) {
      k.kernel = KernelConfig::fixed(std::move(*vals));
    } else {
      r.problem("contrastive", "bandwidths", "expected 'median' or a comma-separated list, got '" + *bw + "'");
    }
  }
  r.read_list("contrastive", "multipliers", k.kernel.multipliers);

  auto& e = c.encoder;
  r.read("encoder", "vocab_size", e.vocab_size);
  r.read("encoder", "hidden_dim", e.hidden_dim);
  r.read("encoder", "num_layers", e.num_layers);
  r.read("encoder", "num_heads", e.num_heads);
  r.read("encoder", "ffn_dim", e.ffn_dim);
  r.read("encoder", "max_seq_len", e.max_seq_len);
  r.read("encoder", "seed", e.seed, 0);

  auto problems = r.finish();
  try {
    c.validate();
  } catch (const ConfigError& err) {
    problems.insert(problems.end(), err.problems().begin(), err.problems().end());
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

}  // namespace

TrainConfig TrainConfig::from_ini_string(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({std::string("config: ") + e.what()});
  }
  return from_tree(tree);
}

TrainConfig TrainConfig::from_ini(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"config: cannot open " + path.string()});
  std::stringstream ss;
  ss << is.rdbuf();
  return from_ini_string(ss.str());
}

std::string TrainConfig::to_ini() const {
  std::ostringstream os;
  os << "[train]\n"
     << "learning_rate = " << fmt_double(learning_rate) << "\n"
     << "epochs = " << epochs << "\n"
     << "batch_size = " << batch_size << "\n"
     << "mixing = " << to_string(mixing) << "\n"
     << "source_share = " << fmt_double(source_share) << "\n"
     << "adam_beta1 = " << fmt_double(adam_beta1) << "\n"
     << "adam_beta2 = " << fmt_double(adam_beta2) << "\n"
     << "adam_epsilon = " << fmt_double(adam_epsilon) << "\n"
     << "weight_decay = " << fmt_double(weight_decay) << "\n"
     << "grad_clip = " << fmt_double(grad_clip) << "\n"
     << "seed = " << seed << "\n"
     << "max_answer_len = " << max_answer_len << "\n"
     << "eval_every = " << eval_every << "\n\n"
     << "[contrastive]\n"
     << "beta = " << fmt_double(contrastive.beta) << "\n"
     << "noise_sigma = " << fmt_double(contrastive.noise_sigma) << "\n"
     << "sign_variant = " << to_string(contrastive.sign_variant) << "\n"
     << "pairing_variant = " << to_string(contrastive.pairing_variant) << "\n"
     << "bandwidths = "
     << (contrastive.kernel.median_heuristic ? std::string("median") : join_doubles(contrastive.kernel.bandwidths))
     << "\n"
     << "multipliers = " << join_doubles(contrastive.kernel.multipliers) << "\n\n"
     << "[encoder]\n"
     << "vocab_size = " << encoder.vocab_size << "\n"
     << "hidden_dim = " << encoder.hidden_dim << "\n"
     << "num_layers = " << encoder.num_layers << "\n"
     << "num_heads = " << encoder.num_heads << "\n"
     << "ffn_dim = " << encoder.ffn_dim << "\n"
     << "max_seq_len = " << encoder.max_seq_len << "\n"
     << "seed = " << encoder.seed << "\n";
  return os.str();
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["train"] = {{"learning_rate", learning_rate}, {"epochs", epochs},
                {"batch_size", batch_size},       {"mixing", std::string(to_string(mixing))},
                {"source_share", source_share},   {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},       {"adam_epsilon", adam_epsilon},
                {"weight_decay", weight_decay},   {"grad_clip", grad_clip},
                {"seed", seed},                   {"max_answer_len", max_answer_len},
                {"eval_every", eval_every}};
  nlohmann::ordered_json k = {{"beta", contrastive.beta},
                              {"noise_sigma", contrastive.noise_sigma},
                              {"sign_variant", std::string(to_string(contrastive.sign_variant))},
                              {"pairing_variant", std::string(to_string(contrastive.pairing_variant))}};
  if (contrastive.kernel.median_heuristic)
    k["bandwidths"] = "median";
  else
    k["bandwidths"] = contrastive.kernel.bandwidths;
  k["multipliers"] = contrastive.kernel.multipliers;
  j["contrastive"] = std::move(k);
  j["encoder"] = {{"vocab_size", encoder.vocab_size}, {"hidden_dim", encoder.hidden_dim},
                  {"num_layers", encoder.num_layers}, {"num_heads", encoder.num_heads},
                  {"ffn_dim", encoder.ffn_dim},       {"max_seq_len", encoder.max_seq_len},
                  {"seed", encoder.seed}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Batching

MixedBatchSampler::MixedBatchSampler(std::size_t source_size, std::size_t synthetic_size, std::size_t batch_size,
                                     MixingPolicy policy, double source_share, std::uint64_t seed)
    : ns_(source_size), nt_(synthetic_size), batch_(batch_size), policy_(policy), share_(source_share), seed_(seed) {
  if (batch_ == 0) throw InvalidArgument("batch sampler: batch size must be positive");
  if (ns_ == 0) throw InvalidArgument("batch sampler: source set is empty");
  if (policy_ == MixingPolicy::Balanced) {
    if (batch_ < 2) throw InvalidArgument("batch sampler: balanced mixing needs batch size >= 2");
    if (nt_ == 0) throw InvalidArgument("batch sampler: balanced mixing needs a non-empty synthetic set");
    if (!(share_ > 0.0 && share_ < 1.0)) throw InvalidArgument("batch sampler: source share must lie in (0, 1)");
  }
}

std::vector<Batch> MixedBatchSampler::epoch(std::size_t e) const {
  std::mt19937_64 rng(detail::mix_seed(seed_, e));
  std::vector<std::size_t> s(ns_), t(policy_ == MixingPolicy::Balanced ? nt_ : 0);
  std::iota(s.begin(), s.end(), 0);
  std::iota(t.begin(), t.end(), 0);
  std::shuffle(s.begin(), s.end(), rng);
  std::shuffle(t.begin(), t.end(), rng);

  std::vector<Batch> out;
  std::size_t is = 0, it = 0;
  const auto per_source = policy_ == MixingPolicy::Balanced
                              ? std::min(batch_ - 1, static_cast<std::size_t>(std::ceil(share_ * batch_)))
                              : batch_;
  const std::size_t per_target = batch_ - per_source;
  while (is < s.size() || it < t.size()) {
    Batch b;
    std::size_t take_s = std::min(per_source, s.size() - is);
    std::size_t take_t = std::min(per_target, t.size() - it);
    const std::size_t gap = batch_ - take_s - take_t;
    if (gap > 0) {
      const std::size_t extra_s = std::min(gap, s.size() - is - take_s);
      take_s += extra_s;
      take_t += std::min(gap - extra_s, t.size() - it - take_t);
    }
    for (std::size_t k = 0; k < take_s; ++k) b.push_back({DomainTag::Source, s[is++]});
    for (std::size_t k = 0; k < take_t; ++k) b.push_back({DomainTag::TargetSynthetic, t[it++]});
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

AdamW::AdamW(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto g = params_[k].grad_view();
    auto w = params_[k].mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      w[i] -= lr_ * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * w[i]);
    }
  }
}

double gradient_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.grad_view()) s += g * g;
  return std::sqrt(s);
}

double clip_gradients(std::span<Tensor> params, double max_norm) {
  const double norm = gradient_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

std::uint64_t step_noise_seed(std::uint64_t seed, std::size_t step) { return detail::mix_seed(seed ^ 0x5eedULL, step); }

std::vector<TokenizedSample> tokenize_dataset(const DomainDataset& data, DomainTag domain, std::size_t max_len) {
  std::vector<TokenizedSample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) out.push_back(to_tokenized(s, domain, max_len));
  return out;
}

BatchLoss batch_loss(const QAModel& model, std::span<const TokenizedSample* const> batch,
                     const ContrastiveConfig& config, std::uint64_t noise_seed_base) {
  if (batch.empty()) throw InvalidArgument("batch_loss: empty batch");
  Tensor ce;
  std::vector<ClassMeans> means;
  bool has_source = false, has_target = false;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = *batch[i];
    if (!s.answer) throw InvalidArgument("batch_loss: sample " + s.id + " has no answer");
    Tensor f = model.encode(s, config.noise_sigma, detail::mix_seed(noise_seed_base, i));
    Tensor l = span_cross_entropy(model.span_logits(f), *s.answer);
    ce = ce ? add(ce, l) : l;
    means.push_back(class_means(f, s));
    (s.domain == DomainTag::Source ? has_source : has_target) = true;
  }
  BatchLoss out;
  out.ce = scale(ce, 1.0 / static_cast<double>(batch.size()));
  if (config.pairing_variant == PairingVariant::DomainSeparated && !(has_source && has_target))
    out.con = Tensor::scalar(0.0);
  else
    out.con = contrastive_loss(means, config);
  out.qa = total_loss(out.ce, out.con, config);
  return out;
}

TrainResult train(const TrainConfig& config, const DomainDataset& source, const DomainDataset& synthetic,
                  std::span<const NamedDataset> dev, const StepCallback& on_step) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto src = tokenize_dataset(source, DomainTag::Source, config.encoder.max_seq_len);
  const auto syn = config.mixing == MixingPolicy::Balanced
                       ? tokenize_dataset(synthetic, DomainTag::TargetSynthetic, config.encoder.max_seq_len)
                       : std::vector<TokenizedSample>{};
  MixedBatchSampler sampler(src.size(), syn.size(), config.batch_size, config.mixing, config.source_share,
                            config.seed);

  TrainResult r{QAModel(config.encoder), {}};
  r.report.seed = config.seed;
  r.report.config = config;
  std::vector<Tensor> params;
  for (auto& p : r.model.parameters()) params.push_back(p.value);
  AdamW opt(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon,
            config.weight_decay);

  long last_finite = -1;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double sum_ce = 0.0, sum_qa = 0.0;
    std::size_t n = 0;
    for (const auto& batch : sampler.epoch(epoch)) {
      std::vector<const TokenizedSample*> ptrs;
      for (const auto& item : batch) ptrs.push_back(item.domain == DomainTag::Source ? &src[item.index] : &syn[item.index]);
      for (auto& p : params) p.zero_grad();
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.batch_size = batch.size();
      try {
        auto loss = batch_loss(r.model, ptrs, config.contrastive, step_noise_seed(config.seed, step));
        rec.ce = loss.ce.item();
        rec.con = loss.con.item();
        rec.qa = loss.qa.item();
        loss.qa.backward();
      } catch (const NonFiniteError& e) {
        throw DivergenceError("step " + std::to_string(step) + ": " + e.what(), last_finite);
      }
      rec.grad_norm = clip_gradients(params, config.grad_clip);
      if (!std::isfinite(rec.grad_norm))
        throw DivergenceError("step " + std::to_string(step) + ": non-finite gradient norm", last_finite);
      opt.step();
      last_finite = static_cast<long>(step);
      sum_ce += rec.ce;
      sum_qa += rec.qa;
      ++n;
      r.report.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
    EpochRecord er;
    er.epoch = epoch;
    er.mean_ce = sum_ce / static_cast<double>(n);
    er.mean_qa = sum_qa / static_cast<double>(n);
    if ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs)
      for (const auto& d : dev) er.metrics.emplace_back(d.name, evaluate(r.model, *d.data, config.max_answer_len));
    r.report.epochs.push_back(std::move(er));
  }
  r.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("write failed for " + path.string());
}

}  // namespace

void write_run(const std::filesystem::path& dir, const TrainResult& result) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.ini", result.report.config.to_ini());
  std::string steps = "step,epoch,l_ce,l_con,l_qa,grad_norm\n";
  for (const auto& s : result.report.steps)
    steps += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt_double(s.ce) + "," +
             fmt_double(s.con) + "," + fmt_double(s.qa) + "," + fmt_double(s.grad_norm) + "\n";
  write_text(dir / "steps.csv", steps);
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& e : result.report.epochs) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [name, res] : e.metrics) m[name] = {{"em", res.em}, {"f1", res.f1}, {"count", res.count}};
    epochs.push_back({{"epoch", e.epoch}, {"mean_l_ce", e.mean_ce}, {"mean_l_qa", e.mean_qa}, {"metrics", m}});
  }
  write_text(dir / "epochs.json", epochs.dump(1) + "\n");
  save_checkpoint(result.model, dir / "model.ckpt");
}

// ---------------------------------------------------------------------------
// Grid search

std::optional<std::size_t> select_best(std::span<const GridCell> cells, SelectionCriterion criterion) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (!c.ok) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = cells[*best];
    const double sc = criterion == SelectionCriterion::DevF1 ? c.dev_f1 : -c.train_ce;
    const double sb = criterion == SelectionCriterion::DevF1 ? b.dev_f1 : -b.train_ce;
    if (sc > sb || (sc == sb && (c.beta < b.beta || (c.beta == b.beta && c.sigma < b.sigma)))) best = i;
  }
  return best;
}

GridResult grid_search(const TrainConfig& base, std::span<const double> betas, std::span<const double> sigmas,
                       SelectionCriterion criterion, const DomainDataset& source, const DomainDataset& synthetic,
                       const DomainDataset* selection) {
  if (betas.empty() || sigmas.empty()) throw InvalidArgument("grid_search: empty grid");
  if (criterion == SelectionCriterion::DevF1 && (!selection || selection->samples.empty()))
    throw InvalidArgument("grid_search: dev_f1 criterion needs a non-empty selection set");
  GridResult g;
  for (double beta : betas)
    for (double sigma : sigmas) {
      GridCell cell;
      cell.beta = beta;
      cell.sigma = sigma;
      try {
        TrainConfig cfg = base;
        cfg.contrastive.beta = beta;
        cfg.contrastive.noise_sigma = sigma;
        auto r = train(cfg, source, synthetic, {});
        cell.train_ce = r.report.epochs.back().mean_ce;
        if (selection) {
          auto ev = evaluate(r.model, *selection, cfg.max_answer_len);
          cell.dev_em = ev.em;
          cell.dev_f1 = ev.f1;
        }
        cell.ok = true;
      } catch (const Error& e) {
        cell.error = e.what();
      }
      g.cells.push_back(std::move(cell));
    }
  g.best = select_best(g.cells, criterion);
  return g;
}

void write_grid(const std::filesystem::path& path, const GridResult& grid) {
  std::string s = "beta,sigma,status,dev_em,dev_f1,train_l_ce,selected,error\n";
  for (std::size_t i = 0; i < grid.cells.size(); ++i) {
    const auto& c = grid.cells[i];
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    s += fmt_double(c.beta) + "," + fmt_double(c.sigma) + "," + (c.ok ? "ok" : "failed") + "," +
         fmt_double(c.dev_em) + "," + fmt_double(c.dev_f1) + "," + fmt_double(c.train_ce) + "," +
         (grid.best && *grid.best == i ? "1" : "0") + "," + err + "\n";
  }
  write_text(path, s);
}

}  // namespace caqa
