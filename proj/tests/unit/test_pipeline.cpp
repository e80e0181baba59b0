#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "caqa/error.hpp"
#include "caqa/pipeline.hpp"
#include "doctest.h"

using namespace caqa;

namespace {

EncoderConfig tiny_encoder(std::size_t hidden = 16) {
  EncoderConfig c;
  c.vocab_size = 128;
  c.hidden_dim = hidden;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 2 * hidden;
  c.max_seq_len = 128;
  c.seed = 11;
  return c;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder = tiny_encoder();
  c.learning_rate = 1e-3;
  c.epochs = 1;
  c.batch_size = 4;
  c.seed = 3;
  c.contrastive.beta = 0.001;
  c.contrastive.noise_sigma = 0.01;
  return c;
}

struct Toy {
  DomainDataset source;
  DomainDataset synthetic;
};

Toy toy_data(std::size_t ns, std::size_t nt, std::uint64_t seed) {
  DomainShiftSpec spec;
  spec.source_samples = ns;
  spec.target_samples = nt;
  auto d = make_synthetic_domains(spec, seed);
  Toy t{d.source, d.target_gold};
  t.synthetic.provenance = Provenance::Synthetic;
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("caqa_pipeline_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("balanced sampler composition and coverage") {
    MixedBatchSampler s(10, 10, 4, MixingPolicy::Balanced, 0.5, 7);
    for (std::size_t e = 0; e < 3; ++e) {
      auto batches = s.epoch(e);
      std::multiset<std::pair<int, std::size_t>> seen;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        std::size_t src = 0;
        for (const auto& it : batches[b]) {
          src += it.domain == DomainTag::Source;
          seen.insert({static_cast<int>(it.domain), it.index});
        }
        if (b + 1 < batches.size()) {
          CHECK(batches[b].size() == 4);
          CHECK(src == 2);
        }
      }
      CHECK(seen.size() == 20);
      CHECK(std::set<std::pair<int, std::size_t>>(seen.begin(), seen.end()).size() == 20);
    }
    CHECK(s.epoch(0) != s.epoch(1));
  }

  TEST_CASE("sampler rounds toward source and fills from the larger side") {
    MixedBatchSampler s(20, 3, 5, MixingPolicy::Balanced, 0.5, 1);
    auto batches = s.epoch(0);
    std::size_t total = 0;
    for (const auto& b : batches) total += b.size();
    CHECK(total == 23);
    std::size_t src0 = 0;
    for (const auto& it : batches[0]) src0 += it.domain == DomainTag::Source;
    CHECK(src0 == 3);
    for (std::size_t b = 0; b + 1 < batches.size(); ++b) CHECK(batches[b].size() == 5);
  }

  TEST_CASE("sampler determinism and source-only policy") {
    MixedBatchSampler a(13, 9, 4, MixingPolicy::Balanced, 0.5, 99), b(13, 9, 4, MixingPolicy::Balanced, 0.5, 99);
    for (std::size_t e = 0; e < 4; ++e) CHECK(a.epoch(e) == b.epoch(e));

    MixedBatchSampler so(7, 0, 3, MixingPolicy::SourceOnly, 0.5, 5);
    auto batches = so.epoch(0);
    std::vector<std::size_t> idx;
    for (const auto& bt : batches)
      for (const auto& it : bt) {
        CHECK(it.domain == DomainTag::Source);
        idx.push_back(it.index);
      }
    std::sort(idx.begin(), idx.end());
    CHECK(idx == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
    CHECK(batches.size() == 3);
  }

  TEST_CASE("sampler rejections") {
    CHECK_THROWS_AS(MixedBatchSampler(4, 4, 1, MixingPolicy::Balanced, 0.5, 1), InvalidArgument);
    CHECK_THROWS_AS(MixedBatchSampler(4, 0, 2, MixingPolicy::Balanced, 0.5, 1), InvalidArgument);
    CHECK_THROWS_AS(MixedBatchSampler(0, 4, 2, MixingPolicy::SourceOnly, 0.5, 1), InvalidArgument);
    CHECK_NOTHROW(MixedBatchSampler(4, 0, 1, MixingPolicy::SourceOnly, 0.5, 1));
  }

  TEST_CASE("gradient clipping caps the global norm") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d(0.0, 5.0);
    for (int t = 0; t < 20; ++t) {
      std::vector<Tensor> ps;
      for (int k = 0; k < 3; ++k) {
        std::vector<double> w(6, 0.0);
        Tensor p = Tensor::from({6}, w, true);
        std::vector<double> c(6);
        for (auto& v : c) v = d(rng);
        Tensor loss = sum(mul(p, Tensor::from({6}, c)));
        loss.backward();
        ps.push_back(p);
      }
      const double before = gradient_norm(ps);
      const double reported = clip_gradients(ps, 1.0);
      CHECK(reported == before);
      CHECK(gradient_norm(ps) <= 1.0 + 1e-9);
      if (before <= 1.0) CHECK(gradient_norm(ps) == before);
    }
  }

  TEST_CASE("adamw first step moves each weight by about lr against the gradient sign") {
    Tensor p = Tensor::from({3}, {1.0, -2.0, 3.0}, true);
    Tensor loss = sum(mul(p, Tensor::from({3}, {2.0, -0.5, 0.0})));
    loss.backward();
    AdamW opt({p}, 0.1, 0.9, 0.999, 1e-8, 0.0);
    opt.step();
    auto v = p.values();
    CHECK(v[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(v[1] == doctest::Approx(-1.9).epsilon(1e-6));
    CHECK(v[2] == 3.0);
    CHECK(opt.steps() == 1);
  }

  TEST_CASE("config validation lists every bad field") {
    TrainConfig c;
    c.learning_rate = 0.0;
    c.batch_size = 1;
    c.contrastive.pairing_variant = PairingVariant::DomainSeparated;
    c.contrastive.beta = -1.0;
    try {
      c.validate();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      std::string all;
      for (const auto& p : e.problems()) all += p + "\n";
      CHECK(all.find("train.learning_rate") != std::string::npos);
      CHECK(all.find("train.batch_size") != std::string::npos);
      CHECK(all.find("contrastive.beta") != std::string::npos);
    }
  }

  TEST_CASE("ini round trip and field-by-field errors") {
    TrainConfig c = tiny_config();
    c.contrastive.sign_variant = SignVariant::SimilarityFlipped;
    c.contrastive.kernel = KernelConfig::fixed({0.5, 2.0});
    auto back = TrainConfig::from_ini_string(c.to_ini());
    CHECK(back.to_ini() == c.to_ini());
    CHECK(back.to_json() == c.to_json());

    auto with_data = TrainConfig::from_ini_string(c.to_ini() + "\n[data]\nsource = x.json\n");
    CHECK(with_data.to_ini() == c.to_ini());

    try {
      TrainConfig::from_ini_string(
          "[train]\nlearning_rate = abc\nepochs = -3\nbogus = 1\n[contrastive]\nsign_variant = sideways\n"
          "[encoder]\nhidden_dim = 10\nnum_heads = 3\n[extra]\nx = 1\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      std::string all;
      for (const auto& p : e.problems()) all += p + "\n";
      INFO(all);
      CHECK(all.find("train.learning_rate") != std::string::npos);
      CHECK(all.find("train.epochs") != std::string::npos);
      CHECK(all.find("train.bogus: unknown key") != std::string::npos);
      CHECK(all.find("contrastive.sign_variant") != std::string::npos);
      CHECK(all.find("encoder.") != std::string::npos);
      CHECK(all.find("extra: unknown section") != std::string::npos);
    }
    CHECK_THROWS_AS(TrainConfig::from_ini("/nonexistent/caqa.ini"), ConfigError);
  }

  TEST_CASE("beta zero logs identical qa and ce; decomposition holds otherwise") {
    auto toy = toy_data(12, 12, 1);
    auto c = tiny_config();
    c.contrastive.beta = 0.0;
    auto r0 = train(c, toy.source, toy.synthetic, {});
    for (const auto& s : r0.report.steps) CHECK(s.qa == s.ce);

    c.contrastive.beta = 0.1;
    auto r1 = train(c, toy.source, toy.synthetic, {});
    for (const auto& s : r1.report.steps) {
      CHECK(std::abs(s.qa - (s.ce + 0.1 * s.con)) <= 1e-12);
      CHECK(s.grad_norm >= 0.0);
    }
    // Independent recomputation of the first step from a fresh model.
    QAModel fresh(c.encoder);
    MixedBatchSampler sampler(12, 12, c.batch_size, c.mixing, c.source_share, c.seed);
    const auto src = tokenize_dataset(toy.source, DomainTag::Source, 128);
    const auto syn = tokenize_dataset(toy.synthetic, DomainTag::TargetSynthetic, 128);
    std::vector<const TokenizedSample*> ptrs;
    const auto first = sampler.epoch(0).front();
    for (const auto& it : first)
      ptrs.push_back(it.domain == DomainTag::Source ? &src[it.index] : &syn[it.index]);
    NoGradGuard ng;
    auto loss = batch_loss(fresh, ptrs, c.contrastive, step_noise_seed(c.seed, 0));
    CHECK(std::abs(loss.ce.item() - r1.report.steps[0].ce) <= 1e-12);
    CHECK(std::abs(loss.con.item() - r1.report.steps[0].con) <= 1e-12);
  }

  TEST_CASE("domain-separated pairing on a single-domain batch contributes zero") {
    auto toy = toy_data(6, 2, 2);
    auto c = tiny_config();
    c.contrastive.pairing_variant = PairingVariant::DomainSeparated;
    c.mixing = MixingPolicy::SourceOnly;
    auto r = train(c, toy.source, toy.synthetic, {});
    for (const auto& s : r.report.steps) CHECK(s.con == 0.0);
  }

  TEST_CASE("identical config and seed give identical step curves") {
    auto toy = toy_data(10, 10, 3);
    auto c = tiny_config();
    c.epochs = 2;
    auto a = train(c, toy.source, toy.synthetic, {});
    auto b = train(c, toy.source, toy.synthetic, {});
    REQUIRE(a.report.steps.size() == b.report.steps.size());
    for (std::size_t i = 0; i < a.report.steps.size(); ++i) {
      CHECK(std::abs(a.report.steps[i].qa - b.report.steps[i].qa) <= 1e-12);
      CHECK(std::abs(a.report.steps[i].ce - b.report.steps[i].ce) <= 1e-12);
    }
    c.seed = 4;
    auto d = train(c, toy.source, toy.synthetic, {});
    CHECK(d.report.steps[0].qa != a.report.steps[0].qa);
  }

  TEST_CASE("one epoch visits every sample once") {
    auto toy = toy_data(9, 7, 4);
    auto c = tiny_config();
    c.batch_size = 4;
    MixedBatchSampler s(9, 7, 4, c.mixing, c.source_share, c.seed);
    std::multiset<std::string> visited, expected;
    for (const auto& b : s.epoch(0))
      for (const auto& it : b)
        visited.insert(it.domain == DomainTag::Source ? toy.source.samples[it.index].id
                                                      : toy.synthetic.samples[it.index].id);
    for (const auto& x : toy.source.samples) expected.insert(x.id);
    for (const auto& x : toy.synthetic.samples) expected.insert(x.id);
    CHECK(visited == expected);
    auto r = train(c, toy.source, toy.synthetic, {});
    std::size_t n = 0;
    for (const auto& st : r.report.steps) n += st.batch_size;
    CHECK(n == 16);
  }

  TEST_CASE("single sample is memorized") {
    auto toy = toy_data(1, 1, 5);
    auto c = tiny_config();
    c.mixing = MixingPolicy::SourceOnly;
    c.batch_size = 1;
    c.epochs = 500;
    c.eval_every = 500;
    c.contrastive.beta = 0.0;
    c.contrastive.noise_sigma = 0.0;
    NamedDataset dev[] = {{"train", &toy.source}};
    auto r = train(c, toy.source, toy.synthetic, dev);
    CHECK(r.report.steps.size() == 500);
    const auto& m = r.report.epochs.back().metrics;
    REQUIRE(m.size() == 1);
    CHECK(m[0].second.em == 100.0);
    CHECK(r.report.epochs.size() == 500);
    CHECK(r.report.epochs[0].metrics.empty());
  }

  TEST_CASE("200-sample overfit set drops below 0.1 within 200 steps") {
    auto toy = toy_data(200, 1, 6);
    auto c = tiny_config();
    c.encoder = tiny_encoder(32);
    c.mixing = MixingPolicy::SourceOnly;
    c.batch_size = 8;
    c.epochs = 8;
    c.learning_rate = 3e-3;
    c.contrastive.beta = 0.0;
    c.contrastive.noise_sigma = 0.0;
    auto r = train(c, toy.source, toy.synthetic, {});
    REQUIRE(r.report.steps.size() == 200);
    double best = 1e9;
    for (const auto& s : r.report.steps) best = std::min(best, s.qa);
    MESSAGE("lowest step loss ", best, ", last epoch mean ", r.report.epochs.back().mean_ce);
    CHECK(best < 0.1);
  }

  TEST_CASE("divergence aborts with the last finite step") {
    auto toy = toy_data(8, 8, 7);
    auto c = tiny_config();
    c.learning_rate = 1e300;
    c.grad_clip = 1e300;
    c.epochs = 3;
    try {
      train(c, toy.source, toy.synthetic, {});
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(e.last_finite_step() >= 0);
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
  }

  TEST_CASE("checkpoint round trip preserves metrics") {
    auto toy = toy_data(16, 8, 8);
    auto c = tiny_config();
    c.epochs = 2;
    auto r = train(c, toy.source, toy.synthetic, {});
    auto dir = scratch_dir("ckpt");
    write_run(dir, r);
    for (const char* f : {"config.ini", "steps.csv", "epochs.json", "model.ckpt"})
      CHECK(std::filesystem::exists(dir / f));
    auto loaded = load_checkpoint(dir / "model.ckpt", c.encoder);
    auto a = evaluate(r.model, toy.source, 30), b = evaluate(loaded, toy.source, 30);
    CHECK(a.em == b.em);
    CHECK(a.f1 == b.f1);
    for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].prediction == b.records[i].prediction);
    CHECK(TrainConfig::from_ini(dir / "config.ini").to_ini() == c.to_ini());

    std::ifstream is(dir / "steps.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "step,epoch,l_ce,l_con,l_qa,grad_norm");
    std::size_t rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    CHECK(rows == r.report.steps.size());
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("grid search: singleton, tie-break, failed cells") {
    std::vector<GridCell> cells = {{0.01, 0.0, true, "", 50, 60, 1.0},
                                   {0.001, 0.01, true, "", 50, 60, 1.0},
                                   {0.001, 0.0, true, "", 50, 60, 1.0},
                                   {0.1, 0.0, false, "boom", 90, 99, 0.1}};
    CHECK(select_best(cells, SelectionCriterion::DevF1) == 2u);
    CHECK(select_best(cells, SelectionCriterion::TrainLoss) == 2u);
    cells[0].train_ce = 0.5;
    CHECK(select_best(cells, SelectionCriterion::TrainLoss) == 0u);
    cells[1].dev_f1 = 61;
    CHECK(select_best(cells, SelectionCriterion::DevF1) == 1u);
    std::vector<GridCell> failed = {{0.1, 0.0, false, "x", 0, 0, 0}};
    CHECK(!select_best(failed, SelectionCriterion::DevF1));

    auto toy = toy_data(8, 8, 9);
    auto c = tiny_config();
    const double b1[] = {0.001}, s1[] = {0.01};
    auto g = grid_search(c, b1, s1, SelectionCriterion::DevF1, toy.source, toy.synthetic, &toy.source);
    REQUIRE(g.cells.size() == 1);
    CHECK(g.best == 0u);
    CHECK(g.cells[0].ok);

    c.learning_rate = 1e300;
    c.grad_clip = 1e300;
    c.epochs = 2;
    const double b2[] = {0.1, 0.01, 0.001}, s2[] = {0.0, 0.01};
    auto bad = grid_search(c, b2, s2, SelectionCriterion::TrainLoss, toy.source, toy.synthetic, nullptr);
    CHECK(bad.cells.size() == 6);
    for (const auto& cell : bad.cells) CHECK(!cell.ok);
    CHECK(!bad.best);
    auto path = scratch_dir("grid") += ".csv";
    write_grid(path, bad);
    std::ifstream is(path);
    std::size_t rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    CHECK(rows == 7);

    const std::vector<double> none;
    CHECK_THROWS_AS(grid_search(c, none, s1, SelectionCriterion::TrainLoss, toy.source, toy.synthetic, nullptr),
                    InvalidArgument);
    CHECK_THROWS_AS(grid_search(c, b1, s1, SelectionCriterion::DevF1, toy.source, toy.synthetic, nullptr),
                    InvalidArgument);
  }
}
