#include "pulseppg/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "pulseppg/errors.hpp"

namespace pulseppg {

namespace {

torch::Tensor as_double(const torch::Tensor& x) {
  require(x.dim() == 2, "probe inputs must be [N, D]");
  return x.to(torch::kFloat64).contiguous();
}

torch::Tensor rows(const torch::Tensor& x, const std::vector<std::int64_t>& idx) {
  return x.index_select(0, torch::tensor(idx, torch::kLong));
}

template <typename T>
std::vector<T> pick(std::span<const T> v, const std::vector<std::int64_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

StandardScaler& StandardScaler::fit(const torch::Tensor& x) {
  const auto xd = as_double(x);
  require(xd.size(0) > 0, "StandardScaler: no rows");
  mean_ = xd.mean(0);
  auto sd = xd.std(0, /*unbiased=*/false);
  scale_ = torch::where(sd > 0, sd, torch::ones_like(sd));
  return *this;
}

torch::Tensor StandardScaler::transform(const torch::Tensor& x) const {
  if (!mean_.defined()) fail(ErrorKind::misuse, "StandardScaler used before fit");
  return (as_double(x) - mean_) / scale_;
}

LogisticRegression& LogisticRegression::fit(const torch::Tensor& x, std::span<const std::int64_t> y,
                                            std::size_t num_classes) {
  const auto xd = as_double(x);
  const auto n = xd.size(0), d = xd.size(1);
  require(static_cast<std::size_t>(n) == y.size(), "logistic fit: label count differs from rows");
  require(num_classes >= 2, "logistic fit: need two classes");
  const auto k = static_cast<std::int64_t>(num_classes);
  auto target = torch::tensor(std::vector<std::int64_t>(y.begin(), y.end()), torch::kLong);

  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto w = torch::zeros({d, k}, opts).requires_grad_(true);
  auto b = torch::zeros({k}, opts).requires_grad_(true);
  // Same minimizer as 0.5|W|^2 + C*sum(CE), scaled by 1/(C*N) for a well-posed gradient tolerance.
  const double reg = 1.0 / (2.0 * C_ * static_cast<double>(n));
  torch::optim::LBFGS lbfgs({w, b}, torch::optim::LBFGSOptions(1.0)
                                        .max_iter(max_iter_)
                                        .max_eval(max_iter_ * 5 / 4)
                                        .tolerance_grad(1e-4)
                                        .tolerance_change(1e-12)
                                        .history_size(10)
                                        .line_search_fn("strong_wolfe"));
  auto closure = [&] {
    lbfgs.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(torch::addmm(b, xd, w), target) + reg * w.pow(2).sum();
    loss.backward();
    return loss;
  };
  {
    torch::AutoGradMode enable(true);
    lbfgs.step(closure);
  }
  w_ = w.detach();
  b_ = b.detach();
  return *this;
}

torch::Tensor LogisticRegression::predict_proba(const torch::Tensor& x) const {
  if (!w_.defined()) fail(ErrorKind::misuse, "LogisticRegression used before fit");
  torch::NoGradGuard g;
  return torch::softmax(torch::addmm(b_, as_double(x), w_), 1);
}

std::vector<std::int64_t> LogisticRegression::predict(const torch::Tensor& x) const {
  auto a = predict_proba(x).argmax(1).contiguous();
  return {a.data_ptr<std::int64_t>(), a.data_ptr<std::int64_t>() + a.numel()};
}

RidgeRegression::RidgeRegression(double alpha, std::string solver) : alpha_(alpha), solver_(std::move(solver)) {
  require(alpha_ >= 0, "ridge alpha must be non-negative");
  require(solver_ == "auto" || solver_ == "cholesky" || solver_ == "sparse_cg",
          "unknown ridge solver '" + solver_ + "'");
}

RidgeRegression& RidgeRegression::fit(const torch::Tensor& x, std::span<const double> y) {
  torch::NoGradGuard g;
  const auto xd = as_double(x);
  require(static_cast<std::size_t>(xd.size(0)) == y.size(), "ridge fit: target count differs from rows");
  auto yt = torch::tensor(std::vector<double>(y.begin(), y.end()), torch::kFloat64);
  const auto xm = xd.mean(0);
  const double ym = yt.mean().item<double>();
  const auto xc = xd - xm;
  const auto yc = yt - ym;
  const auto d = xd.size(1);
  auto a = xc.t().mm(xc) + alpha_ * torch::eye(d, torch::kFloat64);
  auto rhs = xc.t().mv(yc);
  if (solver_ == "sparse_cg") {
    auto w = torch::zeros({d}, torch::kFloat64);
    auto r = rhs.clone();
    auto p = r.clone();
    double rr = r.dot(r).item<double>();
    const double stop = 1e-20 * std::max(rr, 1e-300);
    for (std::int64_t it = 0; it < 10 * d && rr > stop; ++it) {
      auto ap = a.mv(p);
      const double step = rr / p.dot(ap).item<double>();
      w += step * p;
      r -= step * ap;
      const double rr_next = r.dot(r).item<double>();
      p = r + (rr_next / rr) * p;
      rr = rr_next;
    }
    w_ = w;
  } else {
    auto l = torch::linalg_cholesky(a);
    w_ = torch::cholesky_solve(rhs.unsqueeze(1), l).squeeze(1);
  }
  b_ = ym - xm.dot(w_).item<double>();
  return *this;
}

std::vector<double> RidgeRegression::predict(const torch::Tensor& x) const {
  if (!w_.defined()) fail(ErrorKind::misuse, "RidgeRegression used before fit");
  torch::NoGradGuard g;
  auto p = (as_double(x).mv(w_) + b_).contiguous();
  return {p.data_ptr<double>(), p.data_ptr<double>() + p.numel()};
}

std::vector<int> kfold(std::size_t n, int folds, std::uint64_t seed) {
  require(folds >= 2, "need at least two folds");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return fold;
}

std::vector<int> stratified_folds(std::span<const std::int64_t> y, int folds, std::uint64_t seed) {
  require(folds >= 2, "need at least two folds");
  std::map<std::int64_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<int> fold(y.size());
  std::size_t offset = 0;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < idx.size(); ++i)
      fold[idx[i]] = static_cast<int>((offset + i) % static_cast<std::size_t>(folds));
    offset += idx.size();
  }
  return fold;
}

namespace {

struct Split {
  std::vector<std::int64_t> train, test;
};

std::vector<Split> make_splits(const std::vector<int>& fold, int folds) {
  std::vector<Split> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < fold.size(); ++i)
    for (int f = 0; f < folds; ++f)
      (fold[i] == f ? out[f].test : out[f].train).push_back(static_cast<std::int64_t>(i));
  std::erase_if(out, [](const Split& s) { return s.test.empty() || s.train.empty(); });
  return out;
}

int effective_folds(int requested, std::size_t n) {
  return static_cast<int>(std::clamp<std::size_t>(static_cast<std::size_t>(requested), 2, std::max<std::size_t>(n, 2)));
}

}  // namespace

ProbeResult linear_probe_classify(const torch::Tensor& x_train, std::span<const std::int64_t> y_train,
                                  const torch::Tensor& x_test, std::span<const std::int64_t> y_test,
                                  const ProbeOptions& options) {
  require(static_cast<std::size_t>(x_train.size(0)) == y_train.size(), "probe: train rows differ from labels");
  require(static_cast<std::size_t>(x_test.size(0)) == y_test.size(), "probe: test rows differ from labels");
  std::map<std::int64_t, std::size_t> counts;
  for (auto y : y_train) {
    require(y >= 0, "probe: negative class label");
    ++counts[y];
  }
  if (counts.size() < 2) fail(ErrorKind::invalid_task, "linear probe needs at least two classes in the training labels");
  std::int64_t max_label = counts.rbegin()->first;
  for (auto y : y_test) max_label = std::max(max_label, y);
  const auto k = static_cast<std::size_t>(max_label + 1);

  StandardScaler scaler;
  scaler.fit(x_train);
  const auto xs = scaler.transform(x_train);
  const auto xt = scaler.transform(x_test);

  const auto splits = make_splits(
      stratified_folds(y_train, effective_folds(options.folds, y_train.size()), options.seed),
      effective_folds(options.folds, y_train.size()));

  ProbeResult result;
  double best = -std::numeric_limits<double>::infinity();
  double best_c = LogisticGrid::C[0];
  int best_iter = LogisticGrid::max_iter[0];
  for (double c : LogisticGrid::C)
    for (int iters : LogisticGrid::max_iter) {
      double score = 0;
      for (const auto& s : splits) {
        LogisticRegression m(c, iters);
        const auto ytr = pick(y_train, s.train);
        const auto yte = pick(y_train, s.test);
        m.fit(rows(xs, s.train), ytr, k);
        const auto pred = m.predict(rows(xs, s.test));
        ScoreMatrix dummy(yte.size(), k);
        score += classification_metrics(yte, pred, dummy).at("macro_f1");
      }
      score /= static_cast<double>(splits.size());
      const auto params = "C=" + fmt(c) + ",max_iter=" + std::to_string(iters) + ",solver=lbfgs";
      result.grid.push_back({params, score});
      if (score > best) {
        best = score;
        best_c = c;
        best_iter = iters;
        result.best_params = params;
      }
    }
  result.best_cv_score = best;

  LogisticRegression model(best_c, best_iter);
  model.fit(xs, y_train, k);
  const auto proba = model.predict_proba(xt).contiguous();
  ScoreMatrix scores(y_test.size(), k);
  std::copy(proba.data_ptr<double>(), proba.data_ptr<double>() + proba.numel(), scores.data.begin());
  result.report = classification_metrics(y_test, model.predict(xt), scores);
  result.report.name = "linear_probe";
  return result;
}

ProbeResult linear_probe_regress(const torch::Tensor& x_train, std::span<const double> y_train,
                                 const torch::Tensor& x_test, std::span<const double> y_test,
                                 const ProbeOptions& options) {
  require(static_cast<std::size_t>(x_train.size(0)) == y_train.size(), "probe: train rows differ from targets");
  require(static_cast<std::size_t>(x_test.size(0)) == y_test.size(), "probe: test rows differ from targets");
  require(y_train.size() >= 2, "probe: need at least two training rows");

  StandardScaler scaler;
  scaler.fit(x_train);
  const auto xs = scaler.transform(x_train);
  const auto xt = scaler.transform(x_test);
  const auto folds = effective_folds(options.folds, y_train.size());
  const auto splits = make_splits(kfold(y_train.size(), folds, options.seed), folds);

  ProbeResult result;
  double best = -std::numeric_limits<double>::infinity();
  double best_alpha = RidgeGrid::alpha[0];
  std::string best_solver(RidgeGrid::solver[0]);
  for (double alpha : RidgeGrid::alpha)
    for (auto solver : RidgeGrid::solver) {
      double score = 0;
      for (const auto& s : splits) {
        RidgeRegression m(alpha, std::string(solver));
        m.fit(rows(xs, s.train), pick(y_train, s.train));
        const auto yte = pick(y_train, s.test);
        score -= regression_metrics(yte, m.predict(rows(xs, s.test))).at("mse");
      }
      score /= static_cast<double>(splits.size());
      const auto params = "alpha=" + fmt(alpha) + ",solver=" + std::string(solver);
      result.grid.push_back({params, score});
      if (score > best) {
        best = score;
        best_alpha = alpha;
        best_solver = solver;
        result.best_params = params;
      }
    }
  result.best_cv_score = best;

  RidgeRegression model(best_alpha, best_solver);
  model.fit(xs, y_train);
  result.report = regression_metrics(y_test, model.predict(xt));
  result.report.name = "linear_probe";
  {
    const double first = y_train.front();
    if (std::all_of(y_train.begin(), y_train.end(), [&](double v) { return v == first; }))
      result.report.flags.push_back("degenerate_task");
  }
  return result;
}

}  // namespace pulseppg
