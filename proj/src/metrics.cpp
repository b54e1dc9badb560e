#include "pulseppg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pulseppg/config.hpp"
#include "pulseppg/errors.hpp"

namespace pulseppg {

std::string to_string(TaskKind kind) { return kind == TaskKind::classification ? "classification" : "regression"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  fail(ErrorKind::invalid_argument, "unknown task kind '" + s + "'");
}

double MetricReport::at(const std::string& metric) const {
  auto it = values.find(metric);
  if (it == values.end()) fail(ErrorKind::invalid_argument, "report '" + name + "' has no metric '" + metric + "'");
  return it->second;
}

bool MetricReport::has_flag(const std::string& flag) const {
  return std::find(flags.begin(), flags.end(), flag) != flags.end();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["task"] = to_string(kind);
  j["count"] = count;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values) j["metrics"][k] = v;
  j["flags"] = flags;
  if (kind == TaskKind::regression) j["mape_excluded"] = mape_excluded;
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
  MetricReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.name = j.value("name", "");
    r.kind = task_kind_from_string(j.at("task").get<std::string>());
    r.count = j.value("count", std::size_t{0});
    for (const auto& [k, v] : j.at("metrics").items()) r.values[k] = v.get<double>();
    if (j.contains("flags")) r.flags = j["flags"].get<std::vector<std::string>>();
    r.mape_excluded = j.value("mape_excluded", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed metric report: ") + e.what());
  }
  return r;
}

void MetricReport::save(const std::filesystem::path& file) const { write_file_atomic(file, to_json()); }

MetricReport MetricReport::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorKind::data_not_found, "cannot open metric report " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto r = from_json(ss.str());
  if (r.name.empty()) r.name = file.stem().string();
  return r;
}

std::vector<double> ScoreMatrix::column(std::size_t j) const {
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = (*this)(i, j);
  return out;
}

double auroc(std::span<const std::uint8_t> positive, std::span<const double> score, bool* defined) {
  require(positive.size() == score.size(), "auroc: length mismatch");
  const std::size_t n = score.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] < score[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && score[order[j + 1]] == score[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double n_pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      n_pos += 1;
      rank_sum += rank[i];
    }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    if (defined) *defined = false;
    return 0.5;
  }
  if (defined) *defined = true;
  return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

double average_precision(std::span<const std::uint8_t> positive, std::span<const double> score) {
  require(positive.size() == score.size(), "average_precision: length mismatch");
  const std::size_t n = score.size();
  const double n_pos = static_cast<double>(std::count(positive.begin(), positive.end(), 1));
  if (n_pos == 0) return 0.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    for (; j < n && score[order[j]] == score[order[i]]; ++j) (positive[order[j]] ? tp : fp) += 1;
    const double recall = tp / n_pos;
    ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

MetricReport classification_metrics(std::span<const std::int64_t> y_true, std::span<const std::int64_t> y_pred,
                                    const ScoreMatrix& scores) {
  require(y_true.size() == y_pred.size(), "classification_metrics: y_true and y_pred differ in length");
  require(!y_true.empty(), "classification_metrics: no samples");
  require(scores.rows == y_true.size(), "classification_metrics: score rows differ from labels");
  for (auto y : y_true) require(y >= 0 && static_cast<std::size_t>(y) < scores.cols, "label outside score columns");
  const std::size_t n = y_true.size();

  std::set<std::int64_t> labels(y_true.begin(), y_true.end());
  labels.insert(y_pred.begin(), y_pred.end());

  MetricReport r;
  r.kind = TaskKind::classification;
  r.count = n;
  double correct = 0, p_sum = 0, r_sum = 0, f_sum = 0;
  for (std::size_t i = 0; i < n; ++i) correct += y_true[i] == y_pred[i];
  for (auto c : labels) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool t = y_true[i] == c, p = y_pred[i] == c;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    p_sum += prec;
    r_sum += rec;
    f_sum += f1;
  }
  const double m = static_cast<double>(labels.size());
  r.values["accuracy"] = correct / static_cast<double>(n);
  r.values["macro_precision"] = p_sum / m;
  r.values["macro_recall"] = r_sum / m;
  r.values["macro_f1"] = f_sum / m;

  auto one_vs_rest = [&](std::size_t c, double& roc, double& pr, bool& defined) {
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = y_true[i] == static_cast<std::int64_t>(c);
    const auto col = scores.column(c);
    roc = auroc(pos, col, &defined);
    pr = average_precision(pos, col);
  };
  double roc = 0.5, pr = 0.0;
  bool defined = true;
  if (scores.cols == 2) {
    one_vs_rest(1, roc, pr, defined);
  } else {
    std::set<std::int64_t> present(y_true.begin(), y_true.end());
    double roc_sum = 0, pr_sum = 0;
    for (auto c : present) {
      double a, b;
      bool d;
      one_vs_rest(static_cast<std::size_t>(c), a, b, d);
      roc_sum += a;
      pr_sum += b;
    }
    defined = present.size() > 1;
    roc = defined ? roc_sum / static_cast<double>(present.size()) : 0.5;
    pr = pr_sum / static_cast<double>(present.size());
  }
  if (!defined) r.flags.push_back("auroc_undefined");
  r.values["auroc"] = roc;
  r.values["auprc"] = pr;
  return r;
}

MetricReport regression_metrics(std::span<const double> y_true, std::span<const double> y_pred) {
  require(y_true.size() == y_pred.size(), "regression_metrics: length mismatch");
  require(!y_true.empty(), "regression_metrics: no samples");
  MetricReport r;
  r.kind = TaskKind::regression;
  r.count = y_true.size();
  double abs_sum = 0, sq_sum = 0, pct_sum = 0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const double e = y_true[i] - y_pred[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (y_true[i] != 0.0) {
      pct_sum += std::abs(e) / std::abs(y_true[i]);
      ++pct_n;
    }
  }
  const double n = static_cast<double>(y_true.size());
  r.values["mae"] = abs_sum / n;
  r.values["mse"] = sq_sum / n;
  r.values["mape"] = pct_n ? pct_sum / static_cast<double>(pct_n) : 0.0;
  r.mape_excluded = y_true.size() - pct_n;
  if (pct_n == 0) r.flags.push_back("mape_undefined");
  return r;
}

MetricReport naive_classification(std::span<const std::int64_t> train_labels, std::span<const std::int64_t> test_labels,
                                  std::size_t num_classes) {
  require(!train_labels.empty(), "naive baseline: no training labels");
  std::vector<double> counts(num_classes, 0.0);
  for (auto y : train_labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < num_classes, "naive baseline: label out of range");
    counts[static_cast<std::size_t>(y)] += 1;
  }
  const auto majority =
      static_cast<std::int64_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  ScoreMatrix scores(test_labels.size(), num_classes);
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    for (std::size_t c = 0; c < num_classes; ++c)
      scores(i, c) = counts[c] / static_cast<double>(train_labels.size());
  std::vector<std::int64_t> pred(test_labels.size(), majority);
  auto r = classification_metrics(test_labels, pred, scores);
  r.name = "naive";
  return r;
}

MetricReport naive_regression(std::span<const double> train_targets, std::span<const double> test_targets) {
  require(!train_targets.empty(), "naive baseline: no training targets");
  const double mean =
      std::accumulate(train_targets.begin(), train_targets.end(), 0.0) / static_cast<double>(train_targets.size());
  std::vector<double> pred(test_targets.size(), mean);
  auto r = regression_metrics(test_targets, pred);
  r.name = "naive";
  return r;
}

std::string comparison_table(std::span<const MetricReport> reports) {
  require(!reports.empty(), "comparison_table: no reports");
  std::vector<std::string> rows;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.values)
      if (std::find(rows.begin(), rows.end(), k) == rows.end()) rows.push_back(k);

  std::vector<std::vector<std::string>> cells;
  cells.push_back({"metric"});
  for (const auto& r : reports) cells[0].push_back(r.name.empty() ? "?" : r.name);
  for (const auto& metric : rows) {
    std::vector<std::string> line{metric};
    for (const auto& r : reports) {
      auto it = r.values.find(metric);
      if (it == r.values.end()) {
        line.push_back("-");
      } else {
        std::ostringstream s;
        s << std::fixed << std::setprecision(4) << it->second;
        line.push_back(s.str());
      }
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

  std::ostringstream out;
  for (std::size_t l = 0; l < cells.size(); ++l) {
    for (std::size_t c = 0; c < cells[l].size(); ++c) {
      if (c == 0)
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[l][c];
      else
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[l][c];
    }
    out << '\n';
    if (l == 0) {
      std::size_t total = width[0];
      for (std::size_t c = 1; c < width.size(); ++c) total += 2 + width[c];
      out << std::string(total, '-') << '\n';
    }
  }
  return out.str();
}

}  // namespace pulseppg
