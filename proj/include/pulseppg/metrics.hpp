#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace pulseppg {

enum class TaskKind { classification, regression };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct MetricReport {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::map<std::string, double> values;
  std::vector<std::string> flags;
  std::size_t count = 0;
  std::size_t mape_excluded = 0;

  double at(const std::string& metric) const;
  bool has_flag(const std::string& flag) const;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  void save(const std::filesystem::path& file) const;
  static MetricReport load(const std::filesystem::path& file);
};

// Row-major [n, k] class scores (probabilities or any monotone score).
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  ScoreMatrix() = default;
  ScoreMatrix(std::size_t n, std::size_t k, double fill = 0.0) : rows(n), cols(k), data(n * k, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::vector<double> column(std::size_t j) const;
};

// Mann-Whitney statistic with mid-ranks for ties. `defined` is cleared when
// only one class is present and 0.5 is returned.
double auroc(std::span<const std::uint8_t> positive, std::span<const double> score, bool* defined = nullptr);
// Step-wise average precision over distinct score thresholds.
double average_precision(std::span<const std::uint8_t> positive, std::span<const double> score);

// Macro precision/recall/F1 (0 where undefined) over classes seen in y_true or
// y_pred, accuracy, and threshold-free AUROC/AUPRC from `scores` (binary: the
// class-1 column; multiclass: macro one-vs-rest).
MetricReport classification_metrics(std::span<const std::int64_t> y_true, std::span<const std::int64_t> y_pred,
                                    const ScoreMatrix& scores);

// MAE, MSE and MAPE; MAPE skips zero targets and reports how many.
MetricReport regression_metrics(std::span<const double> y_true, std::span<const double> y_pred);

// Majority class (or train mean) fitted on the training labels, scored on test.
MetricReport naive_classification(std::span<const std::int64_t> train_labels, std::span<const std::int64_t> test_labels,
                                  std::size_t num_classes);
MetricReport naive_regression(std::span<const double> train_targets, std::span<const double> test_targets);

// Metrics as rows, reports as columns.
std::string comparison_table(std::span<const MetricReport> reports);

}  // namespace pulseppg
