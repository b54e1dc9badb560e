#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/metrics.hpp"

namespace pulseppg {

// Search space of the logistic probe.
struct LogisticGrid {
  static constexpr std::array<double, 5> C{0.01, 0.1, 1.0, 10.0, 100.0};
  static constexpr std::array<int, 2> max_iter{1000, 10000};
  static constexpr std::array<std::string_view, 1> solver{"lbfgs"};
  static constexpr std::string_view scoring = "f1_macro";
};

// Search space of the ridge probe.
struct RidgeGrid {
  static constexpr std::array<double, 4> alpha{0.1, 1.0, 10.0, 100.0};
  static constexpr std::array<std::string_view, 3> solver{"auto", "cholesky", "sparse_cg"};
  static constexpr std::string_view scoring = "neg_mean_squared_error";
};

// Column-wise standardization; constant columns keep unit scale.
class StandardScaler {
 public:
  StandardScaler& fit(const torch::Tensor& x);
  torch::Tensor transform(const torch::Tensor& x) const;
  const torch::Tensor& mean() const { return mean_; }
  const torch::Tensor& scale() const { return scale_; }

 private:
  torch::Tensor mean_;
  torch::Tensor scale_;
};

// Multinomial logistic regression minimizing 0.5*|W|^2 + C * sum of cross
// entropies (intercept unpenalized), fitted with L-BFGS in double precision.
class LogisticRegression {
 public:
  LogisticRegression(double C, int max_iter) : C_(C), max_iter_(max_iter) {}
  LogisticRegression& fit(const torch::Tensor& x, std::span<const std::int64_t> y, std::size_t num_classes);
  torch::Tensor predict_proba(const torch::Tensor& x) const;
  std::vector<std::int64_t> predict(const torch::Tensor& x) const;
  const torch::Tensor& weight() const { return w_; }
  const torch::Tensor& bias() const { return b_; }

 private:
  double C_;
  int max_iter_;
  torch::Tensor w_;
  torch::Tensor b_;
};

// Ridge regression with unpenalized intercept. "auto" and "cholesky" solve the
// normal equations exactly; "sparse_cg" iterates conjugate gradients.
class RidgeRegression {
 public:
  RidgeRegression(double alpha, std::string solver = "auto");
  RidgeRegression& fit(const torch::Tensor& x, std::span<const double> y);
  std::vector<double> predict(const torch::Tensor& x) const;
  const torch::Tensor& coef() const { return w_; }

 private:
  double alpha_;
  std::string solver_;
  torch::Tensor w_;
  double b_ = 0.0;
};

struct GridPoint {
  std::string params;
  double cv_score = 0.0;
};

struct ProbeOptions {
  int folds = 5;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  MetricReport report;
  std::string best_params;
  double best_cv_score = 0.0;
  std::vector<GridPoint> grid;  // grid order; ties resolve to the earliest point
};

// Inputs are [N, D]; the scaler is fit on the training rows only.
ProbeResult linear_probe_classify(const torch::Tensor& x_train, std::span<const std::int64_t> y_train,
                                  const torch::Tensor& x_test, std::span<const std::int64_t> y_test,
                                  const ProbeOptions& options = {});
ProbeResult linear_probe_regress(const torch::Tensor& x_train, std::span<const double> y_train,
                                 const torch::Tensor& x_test, std::span<const double> y_test,
                                 const ProbeOptions& options = {});

// Fold id per sample; classification folds are stratified by label.
std::vector<int> stratified_folds(std::span<const std::int64_t> y, int folds, std::uint64_t seed);
std::vector<int> kfold(std::size_t n, int folds, std::uint64_t seed);

}  // namespace pulseppg
