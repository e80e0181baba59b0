#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "caqa/error.hpp"
#include "caqa/eval.hpp"
#include "doctest.h"
#include "metric_cases.hpp"

using namespace caqa;

namespace {

std::vector<std::vector<double>> random_rows(std::size_t n, std::size_t h, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<std::vector<double>> x(n, std::vector<double>(h));
  for (auto& r : x)
    for (auto& v : r) v = d(rng);
  return x;
}

/// Largest principal angle between span{a0, a1} and span{b0, b1}.
double max_principal_angle(const std::array<std::vector<double>, 2>& a, const Eigen::MatrixXd& b) {
  const auto h = static_cast<Eigen::Index>(a[0].size());
  Eigen::MatrixXd qa(h, 2);
  for (Eigen::Index i = 0; i < h; ++i) {
    qa(i, 0) = a[0][i];
    qa(i, 1) = a[1][i];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(qa.transpose() * b);
  const double smallest = std::min(1.0, svd.singularValues().minCoeff());
  return std::acos(smallest);
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.vocab_size = 128;
  c.hidden_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.max_seq_len = 128;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("normalize answer") {
    CHECK(normalize_answer("The Cat!") == "cat");
    CHECK(normalize_answer("") == "");
    CHECK(normalize_answer("a  White   Elephant.") == "white elephant");
    CHECK(normalize_answer("theatre") == "theatre");
  }

  TEST_CASE("em and f1 fixture") {
    for (const auto& c : caqa::test::kMetricCases) {
      INFO(c.prediction, " | ", c.gold);
      auto r = em_f1(c.prediction, c.gold);
      CHECK(r.em == c.em);
      CHECK(std::abs(r.f1 - c.f1) < 1e-15);
    }
  }

  TEST_CASE("em and f1 properties") {
    std::vector<std::string> pool = {"Kenny Shiels", "the Cat", "rugby park park", "a b c", "", "Park Rugby"};
    for (const auto& a : pool)
      for (const auto& b : pool) {
        auto ab = em_f1(a, b), ba = em_f1(b, a);
        CHECK(ab.f1 == ba.f1);
        if (ab.em == 1.0) CHECK(ab.f1 == 1.0);
        CHECK(ab.f1 >= 0.0);
        CHECK(ab.f1 <= 1.0);
      }
  }

  TEST_CASE("aggregation is the arithmetic mean") {
    std::vector<SampleRecord> recs;
    double em = 0, f1 = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto& c = caqa::test::kMetricCases[i];
      auto m = em_f1(c.prediction, c.gold);
      recs.push_back({std::to_string(i), std::string(c.prediction), std::string(c.gold), m.em, m.f1, ""});
      em += c.em;
      f1 += c.f1;
    }
    auto r = aggregate(recs);
    CHECK(r.count == 10);
    CHECK(std::abs(r.em - 60.0) < 1e-9);
    CHECK(std::abs(r.f1 - (100.0 * (6.0 + 2.0 / 3.0) / 10.0)) < 1e-9);
    CHECK(std::abs(r.em - 10.0 * em) < 1e-9);
    CHECK(std::abs(r.f1 - 10.0 * f1) < 1e-9);
    CHECK_THROWS_AS(aggregate({}), InvalidArgument);
  }

  TEST_CASE("evaluate: empty dataset, order invariance, untokenizable samples") {
    QAModel m(small_config());
    DomainDataset empty;
    CHECK_THROWS_AS(evaluate(m, empty, 16), InvalidArgument);

    DomainShiftSpec spec;
    spec.source_samples = 12;
    spec.target_samples = 1;
    auto d = make_synthetic_domains(spec, 5).source;
    auto r = evaluate(m, d, 30);
    CHECK(r.count == 12);
    auto shuffled = d;
    std::mt19937_64 rng(1);
    std::shuffle(shuffled.samples.begin(), shuffled.samples.end(), rng);
    auto r2 = evaluate(m, shuffled, 30);
    CHECK(r2.em == r.em);
    CHECK(r2.f1 == doctest::Approx(r.f1).epsilon(1e-12));

    auto longer = d;
    longer.samples[0].context += std::string(200, 'x');
    auto r3 = evaluate(m, longer, 30);
    CHECK(!r3.records[0].error.empty());
    CHECK(r3.records[0].em == 0.0);
    CHECK(r3.records[0].f1 == 0.0);
  }

  TEST_CASE("domain gap") {
    QAModel m(small_config());
    DomainShiftSpec spec;
    spec.source_samples = 5;
    spec.target_samples = 5;
    auto d = make_synthetic_domains(spec, 6);
    CHECK(std::abs(domain_gap(m, d.source, d.source, KernelConfig::median())) <= 1e-12);
    auto xs = answer_features(m, d.source), ys = answer_features(m, d.target_gold);
    REQUIRE(xs.size() == 5);
    REQUIRE(ys.size() == 5);
    // Brute force with the pooled median bandwidths.
    std::vector<std::vector<double>> pooled = xs;
    pooled.insert(pooled.end(), ys.begin(), ys.end());
    std::vector<double> d2;
    auto sq = [](const std::vector<double>& a, const std::vector<double>& b) {
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return s;
    };
    for (std::size_t i = 0; i < pooled.size(); ++i)
      for (std::size_t j = i + 1; j < pooled.size(); ++j) d2.push_back(sq(pooled[i], pooled[j]));
    std::sort(d2.begin(), d2.end());
    const std::size_t nd = d2.size();
    const double med = nd % 2 ? d2[nd / 2] : 0.5 * (d2[nd / 2 - 1] + d2[nd / 2]);
    std::vector<double> g;
    for (double mult : {0.25, 0.5, 1.0, 2.0, 4.0}) g.push_back(med * mult);
    auto k = [&](const auto& a, const auto& b) {
      double s = 0;
      for (double gg : g) s += std::exp(-sq(a, b) / gg);
      return s / g.size();
    };
    auto avg = [&](const auto& a, const auto& b) {
      double s = 0;
      for (const auto& u : a)
        for (const auto& v : b) s += k(u, v);
      return s / (a.size() * b.size());
    };
    const double brute = avg(xs, xs) + avg(ys, ys) - 2 * avg(xs, ys);
    CHECK(std::abs(domain_gap(m, d.source, d.target_gold, KernelConfig::median()) - brute) < 1e-12);
  }

  TEST_CASE("pca: rank one, exact rank two, rejection") {
    std::mt19937_64 rng(2);
    std::vector<double> dir = {1.0, -2.0, 0.5, 3.0, 0.0, 1.0};
    std::vector<std::vector<double>> line;
    for (int i = 0; i < 15; ++i) {
      double t = std::normal_distribution<double>(0, 2)(rng);
      std::vector<double> r(6);
      for (int j = 0; j < 6; ++j) r[j] = 4.0 + t * dir[j];
      line.push_back(r);
    }
    auto p = pca_project(line);
    CHECK(std::abs(p.explained_variance_ratio[0] - 1.0) < 1e-9);
    CHECK(p.explained_variance_ratio[1] < 1e-9);

    std::vector<std::vector<double>> plane;
    for (int i = 0; i < 12; ++i) {
      const double a = std::normal_distribution<double>(0, 1)(rng), b = std::normal_distribution<double>(0, 1)(rng);
      plane.push_back({a + b, a - b, 2 * a, 0.0, -b});
    }
    auto q = pca_project(plane);
    CHECK(std::abs(q.explained_variance_ratio[0] + q.explained_variance_ratio[1] - 1.0) < 1e-9);
    CHECK(q.explained_variance_ratio[0] >= q.explained_variance_ratio[1]);
    for (std::size_t i = 0; i < plane.size(); ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double rec = q.mean[j] + q.coords[i][0] * q.components[0][j] + q.coords[i][1] * q.components[1][j];
        CHECK(std::abs(rec - plane[i][j]) < 1e-9);
      }

    CHECK_THROWS_AS(pca_project({{1.0, 2.0}}), InvalidArgument);
    CHECK_THROWS_AS(pca_project({{1.0, 2.0}, {1.0, 2.0}}), InvalidArgument);
  }

  TEST_CASE("pca matches an eigendecomposition oracle") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 20; ++t) {
      auto x = random_rows(20, 8, rng);
      auto p = pca_project(x);
      Eigen::MatrixXd m(20, 8);
      for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 8; ++j) m(i, j) = x[i][j];
      Eigen::MatrixXd c = m.rowwise() - m.colwise().mean();
      Eigen::MatrixXd cov = c.transpose() * c / 19.0;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
      Eigen::MatrixXd top = es.eigenvectors().rightCols(2);
      CHECK(max_principal_angle(p.components, top) < 1e-6);
      const double total = es.eigenvalues().sum();
      CHECK(std::abs(p.explained_variance_ratio[0] - es.eigenvalues()(7) / total) < 1e-10);
      CHECK(std::abs(p.explained_variance_ratio[1] - es.eigenvalues()(6) / total) < 1e-10);
      for (const auto& comp : p.components) {
        double norm = 0;
        for (double v : comp) norm += v * v;
        CHECK(std::abs(norm - 1.0) < 1e-12);
        CHECK(comp[0] > 0.0);
      }
    }
  }

  TEST_CASE("pca coordinates are translation invariant") {
    std::mt19937_64 rng(10);
    auto x = random_rows(15, 5, rng);
    auto shifted = x;
    for (auto& r : shifted)
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += 3.0 * j - 7.0;
    auto a = pca_project(x), b = pca_project(shifted);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (int c = 0; c < 2; ++c) CHECK(std::abs(a.coords[i][c] - b.coords[i][c]) < 1e-9);
  }

  TEST_CASE("token features carry all three labels") {
    QAModel m(small_config());
    DomainShiftSpec spec;
    spec.source_samples = 4;
    spec.target_samples = 1;
    auto d = make_synthetic_domains(spec, 7).source;
    auto tf = token_features(m, d, 3);
    std::set<TokenClass> seen(tf.labels.begin(), tf.labels.end());
    CHECK(seen.size() == 3);
    std::set<std::string> ids(tf.sample_ids.begin(), tf.sample_ids.end());
    CHECK(ids.size() == 3);
    auto p = pca_project(tf.features);
    auto path = std::filesystem::temp_directory_path() / "caqa_pca_dump.csv";
    write_pca_dump(path, p, tf);
    std::ifstream is(path);
    std::string line;
    std::size_t rows = 0;
    bool header = false;
    while (std::getline(is, line)) {
      if (line.starts_with("#")) continue;
      if (line == "x,y,label,sample_id") {
        header = true;
        continue;
      }
      ++rows;
    }
    CHECK(header);
    CHECK(rows == tf.labels.size());
  }
}
