#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "pulseppg/errors.hpp"
#include "pulseppg/finetune.hpp"
#include "pulseppg/probe.hpp"

using namespace pulseppg;

namespace {

// Gaussian elimination with partial pivoting on a small dense system.
std::vector<double> solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

struct Blobs {
  torch::Tensor x;
  std::vector<std::int64_t> y;
};

Blobs blobs(std::size_t n, std::size_t d, double sep, std::uint64_t seed, std::size_t classes = 2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Blobs b;
  b.x = torch::empty({static_cast<std::int64_t>(n), static_cast<std::int64_t>(d)}, torch::kFloat64);
  auto a = b.x.accessor<double, 2>();
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::int64_t>(i % classes);
    b.y.push_back(c);
    for (std::size_t j = 0; j < d; ++j) a[i][j] = g(rng) + (j == static_cast<std::size_t>(c) ? sep : 0.0);
  }
  return b;
}

double accuracy(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  double ok = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ok += a[i] == b[i];
  return ok / a.size();
}

EmbeddedSplit embedded(const Blobs& b) {
  EmbeddedSplit s;
  s.x = b.x.to(torch::kFloat32);
  for (auto y : b.y) s.labels.push_back(static_cast<double>(y));
  return s;
}

PpgWindow wave(double hz, std::string subject, std::uint64_t seed, std::size_t n = 256) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.05);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(2 * std::numbers::pi * hz * i / 50.0) + g(rng);
  return make_window(std::move(v), 50.0, std::move(subject));
}

}  // namespace

TEST_SUITE("probe") {
  TEST_CASE("grids are the fixed search spaces") {
    CHECK(LogisticGrid::C == std::array<double, 5>{0.01, 0.1, 1.0, 10.0, 100.0});
    CHECK(LogisticGrid::max_iter == std::array<int, 2>{1000, 10000});
    CHECK(LogisticGrid::scoring == "f1_macro");
    CHECK(RidgeGrid::alpha == std::array<double, 4>{0.1, 1.0, 10.0, 100.0});
    CHECK(RidgeGrid::solver.size() == 3);
    CHECK(RidgeGrid::scoring == "neg_mean_squared_error");
  }

  TEST_CASE("scaler statistics come only from the rows it was fit on") {
    auto tr = torch::tensor({1.0, 10.0, 3.0, 10.0, 5.0, 10.0}, torch::kFloat64).view({3, 2});
    auto te = torch::tensor({100.0, 7.0}, torch::kFloat64).view({1, 2});
    StandardScaler s;
    s.fit(tr);
    auto out = s.transform(te);
    CHECK(out[0][0].item<double>() == doctest::Approx((100.0 - 3.0) / std::sqrt(8.0 / 3.0)));
    CHECK(out[0][1].item<double>() == doctest::Approx(-3.0));  // constant column keeps unit scale
    StandardScaler unfit;
    CHECK_THROWS_AS(unfit.transform(te), Error);
  }

  TEST_CASE("logistic fit is a stationary point of the penalized objective") {
    auto b = blobs(120, 4, 1.0, 1, 3);
    const double C = 1.0;
    LogisticRegression lr(C, 1000);
    lr.fit(b.x, b.y, 3);
    auto w = lr.weight().detach().clone().set_requires_grad(true);
    auto bias = lr.bias().detach().clone().set_requires_grad(true);
    auto logits = torch::matmul(b.x, w) + bias;  // weight is [d, k]
    auto y = torch::tensor(b.y, torch::kLong);
    auto obj = 0.5 * (w * w).sum() + C * torch::nn::functional::cross_entropy(
                                             logits, y, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
    (obj / (C * 120)).backward();
    CHECK(w.grad().abs().max().item<double>() < 1e-3);
    CHECK(bias.grad().abs().max().item<double>() < 1e-3);
  }

  TEST_CASE("ridge solvers agree with the normal equations") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g;
    const int n = 50, d = 3;
    auto x = torch::empty({n, d}, torch::kFloat64);
    std::vector<double> y(n);
    auto a = x.accessor<double, 2>();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) a[i][j] = g(rng);
      y[i] = 2 * a[i][0] - a[i][1] + 0.5 + 0.3 * g(rng);
    }
    const double alpha = 10.0;
    std::vector<double> mx(d, 0.0);
    double my = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) mx[j] += a[i][j] / n;
      my += y[i] / n;
    }
    std::vector<std::vector<double>> A(d, std::vector<double>(d, 0.0));
    std::vector<double> rhs(d, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        rhs[j] += (a[i][j] - mx[j]) * (y[i] - my);
        for (int k = 0; k < d; ++k) A[j][k] += (a[i][j] - mx[j]) * (a[i][k] - mx[k]);
      }
    for (int j = 0; j < d; ++j) A[j][j] += alpha;
    const auto w = solve(A, rhs);
    for (auto solver : RidgeGrid::solver) {
      RidgeRegression r(alpha, std::string(solver));
      r.fit(x, y);
      for (int j = 0; j < d; ++j) CHECK(r.coef()[j].item<double>() == doctest::Approx(w[j]).epsilon(1e-6));
      auto pred = r.predict(x);
      double b = my;
      for (int j = 0; j < d; ++j) b -= w[j] * mx[j];
      CHECK(pred[0] == doctest::Approx(b + w[0] * a[0][0] + w[1] * a[0][1] + w[2] * a[0][2]).epsilon(1e-6));
    }
  }

  TEST_CASE("ridge probe on a realizable linear target") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g;
    const int n = 300, d = 5;
    auto x = torch::empty({n, d}, torch::kFloat64);
    std::vector<double> y(n);
    auto a = x.accessor<double, 2>();
    for (int i = 0; i < n; ++i) {
      y[i] = 60.0;
      for (int j = 0; j < d; ++j) {
        a[i][j] = g(rng);
        y[i] += (j + 1) * a[i][j];
      }
    }
    auto xtr = x.slice(0, 0, 200), xte = x.slice(0, 200);
    std::vector<double> ytr(y.begin(), y.begin() + 200), yte(y.begin() + 200, y.end());
    auto r = linear_probe_regress(xtr, ytr, xte, yte);
    CHECK(r.grid.size() == 12);
    // solvers differ only by rounding here, so any of them may win
    CHECK(r.best_params.rfind("alpha=0.1,", 0) == 0);
    // target sd is about 7.4; the smallest penalty shrinks only slightly
    CHECK(r.report.at("mae") < 0.01);
  }

  TEST_CASE("constant regression targets are flagged") {
    auto x = torch::randn({30, 2}, torch::kFloat64);
    std::vector<double> y(20, 5.0), yt(10, 5.0);
    auto r = linear_probe_regress(x.slice(0, 0, 20), y, x.slice(0, 20), yt);
    CHECK(r.report.has_flag("degenerate_task"));
  }

  TEST_CASE("logistic probe separates separable classes and picks the first best grid point") {
    auto tr = blobs(100, 4, 6.0, 5), te = blobs(40, 4, 6.0, 6);
    auto r = linear_probe_classify(tr.x, tr.y, te.x, te.y);
    CHECK(r.report.at("accuracy") == 1.0);
    REQUIRE(r.grid.size() == 10);
    CHECK(r.grid.front().params == "C=0.01,max_iter=1000,solver=lbfgs");
    double best = -1;
    std::string first;
    for (const auto& p : r.grid)
      if (p.cv_score > best) {
        best = p.cv_score;
        first = p.params;
      }
    CHECK(r.best_cv_score == best);
    CHECK(r.best_params == first);
  }

  TEST_CASE("shuffled labels probe at chance") {
    auto tr = blobs(200, 8, 0.0, 7), te = blobs(200, 8, 0.0, 8);
    std::mt19937_64 rng(9);
    std::shuffle(tr.y.begin(), tr.y.end(), rng);
    auto r = linear_probe_classify(tr.x, tr.y, te.x, te.y);
    CHECK(r.report.at("accuracy") > 0.35);
    CHECK(r.report.at("accuracy") < 0.65);
    CHECK(r.report.at("auroc") > 0.35);
    CHECK(r.report.at("auroc") < 0.65);
  }

  TEST_CASE("one training class is an invalid task") {
    auto tr = blobs(10, 2, 1.0, 1);
    std::fill(tr.y.begin(), tr.y.end(), 1);
    try {
      linear_probe_classify(tr.x, tr.y, tr.x, tr.y);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_task);
    }
  }

  TEST_CASE("folds: stratified counts and balanced sizes") {
    std::vector<std::int64_t> y;
    for (int i = 0; i < 53; ++i) y.push_back(i < 40 ? 0 : 1);
    const auto f = stratified_folds(y, 5, 3);
    CHECK(f == stratified_folds(y, 5, 3));
    for (int k = 0; k < 5; ++k) {
      int c0 = 0, c1 = 0;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (f[i] == k) (y[i] ? c1 : c0)++;
      CHECK(c0 == 8);
      CHECK((c1 == 2 || c1 == 3));
    }
    const auto g = kfold(23, 5, 1);
    std::map<int, int> sizes;
    for (int v : g) ++sizes[v];
    for (auto [k, s] : sizes) CHECK((s == 4 || s == 5));
    CHECK(sizes.size() == 5);
  }
}

TEST_SUITE("finetune") {
  TEST_CASE("head sizes") {
    CHECK(head_parameter_count(TaskKind::classification, 512, 2) == 512 * 2 + 2 + 1024);
    CHECK(head_parameter_count(TaskKind::classification, 512, 5) == 512 * 5 + 5 + 1024);
    CHECK(head_parameter_count(TaskKind::regression, 512, 0) == 512 * 128 + 128 + 128 + 1);
    ClassificationHead h(512, 3);
    std::int64_t n = 0;
    for (const auto& p : h->parameters()) n += p.numel();
    CHECK(n == head_parameter_count(TaskKind::classification, 512, 3));
  }

  TEST_CASE("soft F1 and dice shrink as predictions approach the target") {
    auto onehot = torch::tensor({1.0, 0.0, 0.0, 1.0, 1.0, 0.0}, torch::kFloat64).view({3, 2});
    auto uniform = torch::full({3, 2}, 0.5, torch::kFloat64);
    double prev_f1 = 2, prev_dice = 2;
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      auto p = (1 - t) * uniform + t * onehot;
      const double f1 = soft_f1_loss(p, onehot).item<double>();
      const double dice = dice_loss(p, onehot).item<double>();
      CHECK(f1 < prev_f1);
      CHECK(dice < prev_dice);
      prev_f1 = f1;
      prev_dice = dice;
    }
    CHECK(prev_f1 == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(prev_dice == doctest::Approx(0.0));
  }

  TEST_CASE("soft F1 and dice worked values") {
    auto y = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kFloat64).view({2, 2});
    auto p = torch::tensor({0.8, 0.2, 0.4, 0.6}, torch::kFloat64).view({2, 2});
    // class 0: tp .8, sum p 1.2, sum y 1; class 1: tp .6, sum p .8, sum y 1
    const double f1 = 1 - 0.5 * (1.6 / 2.2 + 1.2 / 1.8);
    CHECK(soft_f1_loss(p, y).item<double>() == doctest::Approx(f1).epsilon(1e-6));
    // sample 0: (1.6 + 1) / (1 + 1 + 1); sample 1: (1.2 + 1) / 3
    const double dice = 1 - 0.5 * (2.6 / 3 + 2.2 / 3);
    CHECK(dice_loss(p, y).item<double>() == doctest::Approx(dice));
  }

  TEST_CASE("loss weights select the components") {
    torch::manual_seed(0);
    auto logits = torch::randn({6, 3}, torch::kFloat64);
    auto target = torch::tensor({0, 1, 2, 0, 1, 2}, torch::kLong);
    FinetuneConfig ce_only;
    ce_only.w_ce = 1;
    ce_only.w_soft_f1 = 0;
    ce_only.w_dice = 0;
    CHECK(classification_loss(logits, target, ce_only).item<double>() ==
          doctest::Approx(torch::nn::functional::cross_entropy(logits, target).item<double>()));
    FinetuneConfig mix;
    auto probs = torch::softmax(logits, 1);
    auto onehot = torch::one_hot(target, 3).to(torch::kFloat64);
    const double expect = (torch::nn::functional::cross_entropy(logits, target) + soft_f1_loss(probs, onehot) +
                           dice_loss(probs, onehot))
                              .item<double>() /
                          3;
    CHECK(classification_loss(logits, target, mix).item<double>() == doctest::Approx(expect));
  }

  TEST_CASE("head training on separable embeddings") {
    FinetuneConfig cfg;
    cfg.epochs = 30;
    cfg.lr = 1e-2;
    auto r = train_head(embedded(blobs(80, 6, 5.0, 1)), embedded(blobs(20, 6, 5.0, 2)), embedded(blobs(40, 6, 5.0, 3)),
                        TaskKind::classification, 2, cfg);
    CHECK(r.test.at("accuracy") == 1.0);
    CHECK(r.history.size() == 30);
    CHECK(r.best_epoch >= 1);
  }

  TEST_CASE("regression head learns a linear target") {
    auto make = [&](int n) {
      EmbeddedSplit s;
      s.x = torch::randn({n, 4});
      for (int i = 0; i < n; ++i) s.labels.push_back(70 + 10 * s.x[i][0].item<double>());
      return s;
    };
    FinetuneConfig cfg;
    cfg.epochs = 60;
    cfg.lr = 1e-2;
    torch::manual_seed(1);
    auto tr = make(200), va = make(50), te = make(50);
    auto r = train_head(tr, va, te, TaskKind::regression, 0, cfg);
    auto naive = naive_regression(tr.labels, te.labels);
    CHECK(r.test.at("mae") < 0.3 * naive.at("mae"));
  }

  TEST_CASE("zero encoder learning rate reduces to training the head on frozen embeddings") {
    EncoderConfig ec;
    ec.base_filters = 4;
    ec.kernel_size = 3;
    ec.nblocks = 2;
    EncoderModel enc(ec, 7);
    TaskDataset task;
    task.kind = TaskKind::classification;
    task.num_classes = 2;
    std::uint64_t seed = 0;
    for (auto [split, prefix, count] : {std::tuple{&task.train, "tr", 6}, std::tuple{&task.val, "va", 2}, std::tuple{&task.test, "te", 2}})
      for (int s = 0; s < count; ++s)
        for (int k = 0; k < 3; ++k) {
          split->windows.push_back(wave(s % 2 ? 2.0 : 1.0, prefix + std::to_string(s), ++seed));
          split->labels.push_back(s % 2);
        }
    FinetuneConfig cfg;
    cfg.epochs = 3;
    cfg.encoder_lr = 0.0;
    cfg.lr = 1e-2;
    cfg.batch = 4;
    const auto before = module_checksum(*enc.net());
    auto ft = finetune(enc, task, cfg);
    CHECK(module_checksum(*enc.net()) == before);

    auto embed = [&](const TaskSplit& s) {
      std::vector<const PpgWindow*> p;
      for (const auto& w : s.windows) p.push_back(&w);
      return EmbeddedSplit{enc.embed(p), s.labels};
    };
    auto th = train_head(embed(task.train), embed(task.val), embed(task.test), TaskKind::classification, 2, cfg);
    REQUIRE(ft.history.size() == th.history.size());
    for (std::size_t i = 0; i < ft.history.size(); ++i)
      CHECK(ft.history[i].train_loss == doctest::Approx(th.history[i].train_loss).epsilon(1e-5));
    CHECK(ft.best_epoch == th.best_epoch);
    CHECK(ft.test.at("macro_f1") == doctest::Approx(th.test.at("macro_f1")));
  }

  TEST_CASE("a subject in two splits is rejected") {
    TaskDataset t;
    t.kind = TaskKind::classification;
    t.num_classes = 2;
    t.train.windows.push_back(wave(1.0, "a", 1));
    t.train.labels.push_back(0);
    t.test.windows.push_back(wave(1.0, "a", 2));
    t.test.labels.push_back(1);
    CHECK_THROWS_AS(t.validate(), Error);
    t.test.windows[0].subject_id = "b";
    CHECK_NOTHROW(t.validate());
    t.test.labels[0] = 2;
    CHECK_THROWS_AS(t.validate(), Error);
  }
}
