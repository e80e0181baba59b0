#include "cli.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "caqa/datagen.hpp"
#include "caqa/error.hpp"
#include "caqa/eval.hpp"
#include "caqa/pipeline.hpp"
#include "json.hpp"

namespace caqa::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_stamp(const char* format) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

fs::path clean(const fs::path& p) {
  auto n = p.lexically_normal();
  if (n.has_filename()) return n;
  return n.parent_path();
}

/// Output directory assembled under a hidden sibling and renamed into place
/// by commit(); removed on any other exit.
class Staging {
 public:
  explicit Staging(fs::path dest) : dest_(clean(dest)) {
    if (fs::exists(dest_)) throw UsageError("output directory already exists: " + dest_.string());
    auto parent = dest_.parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    tmp_ = parent / ("." + dest_.filename().string() + ".partial-" + std::to_string(::getpid()));
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;
  ~Staging() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }
  const fs::path& dir() const { return tmp_; }
  const fs::path& dest() const { return dest_; }
  void commit() {
    fs::rename(tmp_, dest_);
    committed_ = true;
  }

 private:
  fs::path dest_, tmp_;
  bool committed_ = false;
};

fs::path run_directory(const std::string& out, const std::string& subcommand, std::uint64_t seed) {
  if (!out.empty()) return out;
  const char* env = std::getenv("CAQA_RUN_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  const std::string base = subcommand + "-" + utc_stamp("%Y%m%dT%H%M%SZ") + "-s" + std::to_string(seed);
  fs::path p = root / base;
  for (int i = 1; fs::exists(p); ++i) p = root / (base + "-" + std::to_string(i));
  return p;
}

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) throw UsageError(flag + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(flag + ": no such file: " + path);
}

/// Lists every regular file in dir (sorted) with its checksum, then writes
/// manifest.json next to them.
void write_manifest(const fs::path& dir, const std::string& subcommand, std::uint64_t seed, json config,
                    json inputs) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  json outputs = json::array();
  for (const auto& f : files)
    outputs.push_back({{"path", f.generic_string()},
                       {"bytes", fs::file_size(dir / f)},
                       {"sha256", sha256_file((dir / f).string())}});
  json m;
  m["subcommand"] = subcommand;
  m["seed"] = seed;
  m["config"] = std::move(config);
  m["inputs"] = std::move(inputs);
  m["outputs"] = std::move(outputs);
  m["created_utc"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
  std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  os << m.dump(1) << "\n";
  if (!os) throw Error("cannot write manifest in " + dir.string());
}

json absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

// ---------------------------------------------------------------------------
// Data section of training configs

struct DataPaths {
  std::string source;
  std::string synthetic;
  std::vector<std::string> dev;
  std::string selection;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

DataPaths read_data_section(const fs::path& config_path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(config_path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({std::string("config: ") + e.what()});
  }
  DataPaths d;
  auto section = tree.get_child_optional("data");
  if (!section) return d;
  const fs::path base = config_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  std::vector<std::string> problems;
  for (const auto& [key, value] : *section) {
    const auto v = value.get_value<std::string>();
    if (key == "source")
      d.source = resolve(v);
    else if (key == "synthetic")
      d.synthetic = resolve(v);
    else if (key == "selection")
      d.selection = resolve(v);
    else if (key == "dev")
      for (const auto& item : split_list(v)) d.dev.push_back(resolve(item));
    else
      problems.push_back("data." + key + ": unknown key");
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return d;
}

struct TrainInputs {
  TrainConfig config;
  DataPaths paths;
  DomainDataset source;
  DomainDataset synthetic;
  std::vector<std::pair<std::string, DomainDataset>> dev;
};

struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
  std::optional<double> sigma;
  std::string source, synthetic, selection;
  std::vector<std::string> dev;
  std::string out;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--config", f.config, "INI file with [train], [contrastive], [encoder] and [data]")->required();
  sub->add_option("--seed", f.seed, "Overrides train.seed");
  sub->add_option("--source", f.source, "Overrides data.source");
  sub->add_option("--synthetic", f.synthetic, "Overrides data.synthetic");
  sub->add_option("--dev", f.dev, "Overrides data.dev")->delimiter(',');
  sub->add_option("--out", f.out, "Run directory (default: a timestamped directory under the run root)");
}

TrainInputs load_train_inputs(const TrainFlags& f) {
  require_file("--config", f.config);
  TrainInputs in;
  in.config = TrainConfig::from_ini(f.config);
  in.paths = read_data_section(f.config);
  if (f.seed) in.config.seed = *f.seed;
  if (f.beta) in.config.contrastive.beta = *f.beta;
  if (f.sigma) in.config.contrastive.noise_sigma = *f.sigma;
  in.config.validate();
  if (!f.source.empty()) in.paths.source = f.source;
  if (!f.synthetic.empty()) in.paths.synthetic = f.synthetic;
  if (!f.dev.empty()) in.paths.dev = f.dev;
  if (!f.selection.empty()) in.paths.selection = f.selection;

  require_file("data.source", in.paths.source);
  in.source = load_squad_json(in.paths.source);
  if (in.config.mixing == MixingPolicy::Balanced) {
    require_file("data.synthetic", in.paths.synthetic);
    in.synthetic = load_squad_json(in.paths.synthetic);
  } else if (!in.paths.synthetic.empty()) {
    require_file("data.synthetic", in.paths.synthetic);
  }
  std::map<std::string, int> names;
  for (const auto& p : in.paths.dev) {
    require_file("data.dev", p);
    std::string name = fs::path(p).stem().string();
    if (names[name]++) name += "_" + std::to_string(names[name] - 1);
    in.dev.emplace_back(name, load_squad_json(p));
  }
  if (!in.paths.selection.empty()) require_file("data.selection", in.paths.selection);
  return in;
}

json data_inputs(const DataPaths& p, const std::string& config) {
  json in;
  in["config"] = absolute_path(config);
  in["source"] = absolute_path(p.source);
  if (!p.synthetic.empty()) in["synthetic"] = absolute_path(p.synthetic);
  json dev = json::array();
  for (const auto& d : p.dev) dev.push_back(absolute_path(d));
  in["dev"] = std::move(dev);
  if (!p.selection.empty()) in["selection"] = absolute_path(p.selection);
  return in;
}

std::string encoder_json(const EncoderConfig& e, std::size_t max_answer_len) {
  json j = {{"vocab_size", e.vocab_size}, {"hidden_dim", e.hidden_dim}, {"num_layers", e.num_layers},
            {"num_heads", e.num_heads},   {"ffn_dim", e.ffn_dim},       {"max_seq_len", e.max_seq_len},
            {"seed", e.seed},             {"max_answer_len", max_answer_len}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthFlags {
  DomainShiftSpec spec;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_synth(const SynthFlags& f, std::ostream& out) {
  f.spec.validate();
  Staging stage(run_directory(f.out, "synth", f.seed));
  auto d = make_synthetic_domains(f.spec, f.seed);
  write_dataset(stage.dir() / "source.json", d.source);
  write_contexts(stage.dir() / "target_contexts.json", d.target_contexts);
  write_dataset(stage.dir() / "target_gold.json", d.target_gold);
  const auto& s = f.spec;
  json cfg = {{"source_samples", s.source_samples},
              {"target_samples", s.target_samples},
              {"filler_vocab", s.filler_vocab},
              {"entity_vocab", s.entity_vocab},
              {"context_words", s.context_words},
              {"zipf_exponent", s.zipf_exponent},
              {"source_answer_mean", s.source_answer_mean},
              {"target_answer_mean", s.target_answer_mean},
              {"max_answer_words", s.max_answer_words},
              {"question_window", s.question_window},
              {"shift", s.shift}};
  write_manifest(stage.dir(), "synth", f.seed, cfg, json::object());
  stage.commit();
  out << "synth: " << d.source.samples.size() << " source samples, " << d.target_contexts.size()
      << " target contexts -> " << stage.dest().string() << "\n";
  return kOk;
}

struct GenerateFlags {
  std::string dataset;
  std::size_t k = 5;
  std::uint64_t seed = 1;
  std::string filters = "lm";
  std::string checkpoint;
  std::string order = "bigram";
  std::size_t proposal_factor = 4;
  bool length_normalized = false;
  std::size_t max_answer_len = 64;
  std::string out;
};

int cmd_generate(const GenerateFlags& f, std::ostream& out) {
  require_file("--dataset", f.dataset);
  if (f.k == 0) throw UsageError("--k must be >= 1");
  if (f.proposal_factor == 0) throw UsageError("--proposal-factor must be >= 1");
  if (f.filters == "roundtrip") {
    if (f.checkpoint.empty()) throw UsageError("--filters roundtrip needs --checkpoint");
    require_file("--checkpoint", f.checkpoint);
  }
  const auto contexts = load_contexts(f.dataset);
  std::optional<QAModel> model;
  if (f.filters == "roundtrip") model.emplace(load_checkpoint(f.checkpoint));

  Staging stage(run_directory(f.out, "generate", f.seed));
  const auto gen = ToyGenerator::fit(contexts, f.order == "unigram" ? NgramOrder::Unigram : NgramOrder::Bigram, f.seed);
  SyntheticOptions opts;
  opts.k = f.k;
  opts.proposal_factor = f.proposal_factor;
  opts.lm_filter = f.filters != "none";
  opts.length_normalized = f.length_normalized;
  opts.max_answer_len = f.max_answer_len;
  opts.roundtrip_model = model ? &*model : nullptr;
  auto r = build_synthetic_dataset(gen, contexts, f.seed, opts);
  write_dataset(stage.dir() / "synthetic.json", r.dataset);
  write_candidates(stage.dir() / "candidates.jsonl", r.candidates);
  write_candidates(stage.dir() / "proposals.jsonl", r.proposals);
  if (model) {
    std::ofstream os(stage.dir() / "roundtrip_drops.txt", std::ios::binary);
    for (const auto& line : r.drop_log) os << line << "\n";
  }
  json cfg = {{"k", f.k},
              {"filters", f.filters},
              {"order", f.order},
              {"proposal_factor", f.proposal_factor},
              {"length_normalized", f.length_normalized},
              {"max_answer_len", f.max_answer_len}};
  json in = {{"dataset", absolute_path(f.dataset)}};
  if (model) in["checkpoint"] = absolute_path(f.checkpoint);
  write_manifest(stage.dir(), "generate", f.seed, cfg, in);
  stage.commit();
  out << "generate: " << r.dataset.samples.size() << " pairs from " << contexts.size() << " contexts ("
      << r.proposals.size() << " proposals) -> " << stage.dest().string() << "\n";
  return kOk;
}

int cmd_train(const TrainFlags& f, std::ostream& out) {
  auto in = load_train_inputs(f);
  std::vector<NamedDataset> dev;
  for (const auto& [name, data] : in.dev) dev.push_back({name, &data});
  Staging stage(run_directory(f.out, "train", in.config.seed));
  auto result = train(in.config, in.source, in.synthetic, dev);
  write_run(stage.dir(), result);
  write_manifest(stage.dir(), "train", in.config.seed, json::parse(in.config.to_json()),
                 data_inputs(in.paths, f.config));
  stage.commit();
  const auto& last = result.report.epochs.back();
  out << "train: " << result.report.steps.size() << " steps, final mean l_ce " << last.mean_ce;
  for (const auto& [name, m] : last.metrics) out << ", " << name << " em " << m.em << " f1 " << m.f1;
  out << " -> " << stage.dest().string() << "\n";
  return kOk;
}

struct GridFlags {
  TrainFlags train;
  std::vector<double> betas = {0.1, 0.01, 0.001};
  std::vector<double> sigmas = {0.0, 0.01};
  std::string criterion = "dev_f1";
};

int cmd_grid(const GridFlags& f, std::ostream& out) {
  auto in = load_train_inputs(f.train);
  const auto criterion = f.criterion == "train_loss" ? SelectionCriterion::TrainLoss : SelectionCriterion::DevF1;
  std::optional<DomainDataset> selection;
  if (!in.paths.selection.empty())
    selection = load_squad_json(in.paths.selection);
  else if (!in.dev.empty())
    selection = in.dev.front().second;
  if (criterion == SelectionCriterion::DevF1 && !selection)
    throw UsageError("criterion dev_f1 needs data.selection, --selection or a dev set");

  Staging stage(run_directory(f.train.out, "grid", in.config.seed));
  auto g = grid_search(in.config, f.betas, f.sigmas, criterion, in.source, in.synthetic,
                       selection ? &*selection : nullptr);
  write_grid(stage.dir() / "grid.csv", g);
  json cfg = json::parse(in.config.to_json());
  cfg["grid"] = {{"beta", f.betas}, {"sigma", f.sigmas}, {"criterion", std::string(to_string(criterion))}};
  write_manifest(stage.dir(), "grid", in.config.seed, cfg, data_inputs(in.paths, f.train.config));
  stage.commit();
  out << "grid: " << g.cells.size() << " cells";
  if (g.best)
    out << ", best beta " << g.cells[*g.best].beta << " sigma " << g.cells[*g.best].sigma;
  else
    out << ", every cell failed";
  out << " -> " << stage.dest().string() << "\n";
  return g.best ? kOk : kRuntime;
}

struct EvalFlags {
  std::string checkpoint;
  std::string dataset;
  std::size_t max_answer_len = 64;
  std::size_t max_samples = 20;
  std::string out;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  require_file("--checkpoint", f.checkpoint);
  require_file("--dataset", f.dataset);
  if (f.max_answer_len == 0) throw UsageError("--max-answer-len must be >= 1");
  auto model = load_checkpoint(f.checkpoint);
  auto data = load_squad_json(f.dataset);
  Staging stage(run_directory(f.out, "eval", 0));
  auto r = evaluate(model, data, f.max_answer_len);
  const auto cfg = encoder_json(model.config(), f.max_answer_len);
  write_metrics(stage.dir() / "metrics.json", r, cfg);
  write_manifest(stage.dir(), "eval", 0, json::parse(cfg),
                 {{"checkpoint", absolute_path(f.checkpoint)}, {"dataset", absolute_path(f.dataset)}});
  stage.commit();
  out << "eval: em " << r.em << " f1 " << r.f1 << " over " << r.count << " samples -> " << stage.dest().string()
      << "\n";
  return kOk;
}

int cmd_pca(const EvalFlags& f, std::ostream& out) {
  require_file("--checkpoint", f.checkpoint);
  require_file("--dataset", f.dataset);
  if (f.max_samples == 0) throw UsageError("--max-samples must be >= 1");
  auto model = load_checkpoint(f.checkpoint);
  auto data = load_squad_json(f.dataset);
  Staging stage(run_directory(f.out, "pca", 0));
  auto tokens = token_features(model, data, f.max_samples);
  auto p = pca_project(tokens.features);
  write_pca_dump(stage.dir() / "pca.csv", p, tokens);
  json cfg = json::parse(encoder_json(model.config(), f.max_answer_len));
  cfg["max_samples"] = f.max_samples;
  write_manifest(stage.dir(), "pca", 0, cfg,
                 {{"checkpoint", absolute_path(f.checkpoint)}, {"dataset", absolute_path(f.dataset)}});
  stage.commit();
  out << "pca: " << tokens.labels.size() << " tokens, explained variance " << p.explained_variance_ratio[0] << " / "
      << p.explained_variance_ratio[1] << " -> " << stage.dest().string() << "\n";
  return kOk;
}

}  // namespace

std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"caqa: contrastive domain adaptation for extractive QA at desk scale"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  SynthFlags synth;
  auto* s = app.add_subcommand("synth", "Write source and target toy domains");
  s->add_option("--seed", synth.seed);
  s->add_option("--out", synth.out, "Output directory");
  s->add_option("--source-samples", synth.spec.source_samples)->capture_default_str();
  s->add_option("--target-samples", synth.spec.target_samples)->capture_default_str();
  s->add_option("--filler-vocab", synth.spec.filler_vocab)->capture_default_str();
  s->add_option("--entity-vocab", synth.spec.entity_vocab)->capture_default_str();
  s->add_option("--context-words", synth.spec.context_words)->capture_default_str();
  s->add_option("--zipf-exponent", synth.spec.zipf_exponent)->capture_default_str();
  s->add_option("--source-answer-mean", synth.spec.source_answer_mean)->capture_default_str();
  s->add_option("--target-answer-mean", synth.spec.target_answer_mean)->capture_default_str();
  s->add_option("--max-answer-words", synth.spec.max_answer_words)->capture_default_str();
  s->add_option("--question-window", synth.spec.question_window)->capture_default_str();
  s->add_option("--shift", synth.spec.shift)->capture_default_str();

  GenerateFlags gen;
  auto* g = app.add_subcommand("generate", "Generate and filter synthetic QA pairs for a context file");
  g->add_option("--dataset", gen.dataset, "Context-only SQuAD file")->required();
  g->add_option("--k", gen.k, "QA pairs kept per context")->capture_default_str();
  g->add_option("--seed", gen.seed);
  g->add_option("--filters", gen.filters)->check(CLI::IsMember({"none", "lm", "roundtrip"}))->capture_default_str();
  g->add_option("--checkpoint", gen.checkpoint, "QA model for roundtrip filtering");
  g->add_option("--order", gen.order)->check(CLI::IsMember({"unigram", "bigram"}))->capture_default_str();
  g->add_option("--proposal-factor", gen.proposal_factor)->capture_default_str();
  g->add_flag("--length-normalized", gen.length_normalized, "Rank by geometric-mean token probability");
  g->add_option("--max-answer-len", gen.max_answer_len)->capture_default_str();
  g->add_option("--out", gen.out, "Output directory");

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train one model");
  add_train_flags(t, tr);
  t->add_option("--beta", tr.beta, "Overrides contrastive.beta");
  t->add_option("--sigma", tr.sigma, "Overrides contrastive.noise_sigma");

  GridFlags grid;
  auto* gr = app.add_subcommand("grid", "Train one model per (beta, sigma) cell and select the best");
  add_train_flags(gr, grid.train);
  gr->add_option("--beta", grid.betas, "Comma-separated beta values")->delimiter(',')->capture_default_str();
  gr->add_option("--sigma", grid.sigmas, "Comma-separated sigma values")->delimiter(',')->capture_default_str();
  gr->add_option("--criterion", grid.criterion)
      ->check(CLI::IsMember({"dev_f1", "train_loss"}))
      ->capture_default_str();
  gr->add_option("--selection", grid.train.selection, "Selection set for dev_f1 (overrides data.selection)");

  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--dataset", ev.dataset)->required();
  e->add_option("--max-answer-len", ev.max_answer_len)->capture_default_str();
  e->add_option("--out", ev.out, "Output directory");

  EvalFlags pc;
  auto* p = app.add_subcommand("pca", "Project token features onto two principal components");
  p->add_option("--checkpoint", pc.checkpoint)->required();
  p->add_option("--dataset", pc.dataset)->required();
  p->add_option("--max-samples", pc.max_samples)->capture_default_str();
  p->add_option("--out", pc.out, "Output directory");

  std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*g) return cmd_generate(gen, out);
    if (*t) return cmd_train(tr, out);
    if (*gr) return cmd_grid(grid, out);
    if (*e) return cmd_eval(ev, out);
    if (*p) return cmd_pca(pc, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const FormatError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& ex) {
    err << "error: training diverged: " << ex.what() << " (last finite step " << ex.last_finite_step() << ")\n";
    return kDivergence;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace caqa::cli
