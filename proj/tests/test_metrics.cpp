#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "pulseppg/errors.hpp"
#include "pulseppg/metrics.hpp"

using namespace pulseppg;

namespace {

// Fraction of (pos, neg) pairs ordered correctly, ties count half.
double pairwise_auc(const std::vector<std::uint8_t>& pos, const std::vector<double>& s) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

// Sum over distinct thresholds of (recall step) * precision.
double step_ap(const std::vector<std::uint8_t>& pos, const std::vector<double>& s) {
  std::vector<double> th(s);
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double total_pos = 0;
  for (auto p : pos) total_pos += p;
  double ap = 0, prev_recall = 0;
  for (double t : th) {
    double tp = 0, n = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++n;
        tp += pos[i];
      }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / n);
    prev_recall = recall;
  }
  return ap;
}

ScoreMatrix binary_scores(const std::vector<double>& p1) {
  ScoreMatrix m(p1.size(), 2);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    m(i, 0) = 1 - p1[i];
    m(i, 1) = p1[i];
  }
  return m;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("auroc worked example") {
    std::vector<std::uint8_t> pos{0, 0, 1, 1};
    std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    bool defined = false;
    CHECK(auroc(pos, s, &defined) == doctest::Approx(0.75));
    CHECK(defined);
    CHECK(average_precision(pos, s) == doctest::Approx(5.0 / 6.0));
  }

  TEST_CASE("auroc with one class is flagged") {
    std::vector<std::uint8_t> pos{1, 1, 1};
    std::vector<double> s{0.1, 0.2, 0.3};
    bool defined = true;
    CHECK(auroc(pos, s, &defined) == 0.5);
    CHECK_FALSE(defined);
    const std::vector<std::int64_t> y{1, 1, 1};
    const auto r = classification_metrics(y, y, binary_scores(s));
    CHECK(r.has_flag("auroc_undefined"));
  }

  TEST_CASE("auroc and average precision match pairwise oracles with ties") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 5 + trial;
      std::vector<std::uint8_t> pos(n);
      std::vector<double> s(n);
      for (std::size_t i = 0; i < n; ++i) {
        pos[i] = rng() % 2;
        s[i] = static_cast<double>(rng() % 6);  // coarse scores force ties
      }
      pos[0] = 1;
      pos[1] = 0;
      CHECK(auroc(pos, s) == doctest::Approx(pairwise_auc(pos, s)).epsilon(1e-12));
      CHECK(average_precision(pos, s) == doctest::Approx(step_ap(pos, s)).epsilon(1e-12));
    }
  }

  TEST_CASE("auroc is invariant to monotone score transforms") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    std::vector<std::uint8_t> pos(200);
    std::vector<double> s(200), t(200);
    for (int i = 0; i < 200; ++i) {
      pos[i] = i % 3 == 0;
      s[i] = g(rng) + pos[i];
      t[i] = std::exp(3 * s[i]);
    }
    CHECK(auroc(pos, s) == doctest::Approx(auroc(pos, t)));
  }

  TEST_CASE("macro metrics use the union of seen labels and score undefined as zero") {
    const std::vector<std::int64_t> y{0, 1, 2, 0}, p{0, 2, 1, 0};
    ScoreMatrix sc(4, 3, 1.0 / 3);
    const auto r = classification_metrics(y, p, sc);
    CHECK(r.at("accuracy") == doctest::Approx(0.5));
    CHECK(r.at("macro_f1") == doctest::Approx(1.0 / 3));
    CHECK(r.at("macro_precision") == doctest::Approx(1.0 / 3));
    CHECK(r.at("macro_recall") == doctest::Approx(1.0 / 3));
    CHECK(r.at("auroc") == doctest::Approx(0.5));

    // class 2 only predicted: precision 0, recall undefined -> 0
    const std::vector<std::int64_t> y2{0, 0, 1, 1}, p2{0, 2, 1, 1};
    const auto r2 = classification_metrics(y2, p2, ScoreMatrix(4, 3, 1.0 / 3));
    const double f0 = 2 * 1.0 * 0.5 / 1.5;
    CHECK(r2.at("macro_f1") == doctest::Approx((f0 + 1.0 + 0.0) / 3));
  }

  TEST_CASE("binary auroc uses the positive-class column") {
    const std::vector<std::int64_t> y{0, 0, 1, 1};
    const auto r = classification_metrics(y, y, binary_scores({0.1, 0.4, 0.35, 0.8}));
    CHECK(r.at("auroc") == doctest::Approx(0.75));
    CHECK(r.at("auprc") == doctest::Approx(5.0 / 6.0));
  }

  TEST_CASE("regression metrics and mape exclusion") {
    const std::vector<double> y{100, 0, 50}, p{110, 5, 40};
    const auto r = regression_metrics(y, p);
    CHECK(r.at("mae") == doctest::Approx(25.0 / 3));
    CHECK(r.at("mse") == doctest::Approx(225.0 / 3));
    CHECK(r.at("mape") == doctest::Approx(0.15));
    CHECK(r.mape_excluded == 1);
    const std::vector<double> z{0, 0};
    CHECK(regression_metrics(z, z).has_flag("mape_undefined"));
  }

  TEST_CASE("naive regression predicts the train mean") {
    const std::vector<double> tr{90, 110}, te{90, 110};
    const auto r = naive_regression(tr, te);
    CHECK(r.at("mae") == doctest::Approx(10.0));
    CHECK(r.at("mse") == doctest::Approx(100.0));
  }

  TEST_CASE("naive classifier accuracy equals the majority share of test") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t k = 2 + trial % 3;
      std::vector<std::int64_t> tr(40 + trial), te(30 + trial);
      std::vector<std::size_t> counts(k, 0);
      for (auto& v : tr) {
        v = static_cast<std::int64_t>(rng() % k);
        ++counts[v];
      }
      for (auto& v : te) v = static_cast<std::int64_t>(rng() % k);
      const auto majority = static_cast<std::int64_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      const double share = std::count(te.begin(), te.end(), majority) / static_cast<double>(te.size());
      const auto r = naive_classification(tr, te, k);
      CHECK(r.at("accuracy") == doctest::Approx(share));
      // constant scores carry no ranking information
      CHECK(r.at("auroc") == doctest::Approx(0.5));
    }
  }

  TEST_CASE("report json round trip and missing file") {
    MetricReport r;
    r.name = "x";
    r.kind = TaskKind::regression;
    r.values = {{"mae", 1.25}, {"mse", 2.5}};
    r.flags = {"degenerate_task"};
    r.count = 7;
    r.mape_excluded = 2;
    const auto back = MetricReport::from_json(r.to_json());
    CHECK(back.name == "x");
    CHECK(back.kind == TaskKind::regression);
    CHECK(back.values == r.values);
    CHECK(back.flags == r.flags);
    CHECK(back.count == 7);
    CHECK(back.mape_excluded == 2);
    try {
      MetricReport::load(std::filesystem::temp_directory_path() / "pulseppg_no_such_report.json");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::data_not_found);
    }
  }

  TEST_CASE("comparison table lists metrics as rows") {
    MetricReport a, b;
    a.name = "probe";
    b.name = "naive";
    a.values = {{"accuracy", 0.9}, {"macro_f1", 0.85}};
    b.values = {{"accuracy", 0.5}};
    std::vector<MetricReport> rs{a, b};
    const auto t = comparison_table(rs);
    CHECK(t.find("probe") != std::string::npos);
    CHECK(t.find("naive") != std::string::npos);
    CHECK(t.find("0.9000") != std::string::npos);
    CHECK(t.find("macro_f1") != std::string::npos);
  }
}
