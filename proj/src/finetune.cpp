#include "pulseppg/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "pulseppg/errors.hpp"
#include "pulseppg/motif_distance.hpp"

namespace pulseppg {

void TaskDataset::validate() const {
  std::map<std::string, std::string> owner;
  for (auto [split, tag] : {std::pair{&train, "train"}, std::pair{&val, "val"}, std::pair{&test, "test"}}) {
    require(split->windows.size() == split->labels.size(), std::string(tag) + " split: labels not aligned with windows");
    for (const auto& w : split->windows) {
      auto [it, inserted] = owner.emplace(w.subject_id, tag);
      if (!inserted && it->second != tag)
        fail(ErrorKind::invalid_task, "subject '" + w.subject_id + "' appears in both " + it->second + " and " + tag);
    }
    if (kind == TaskKind::classification)
      for (double y : split->labels)
        if (y != std::floor(y) || y < 0 || y >= static_cast<double>(num_classes))
          fail(ErrorKind::invalid_task, std::string(tag) + " split: class label out of range");
  }
  if (kind == TaskKind::classification && num_classes < 2) fail(ErrorKind::invalid_task, "need at least two classes");
}

std::vector<std::int64_t> TaskDataset::class_labels(const TaskSplit& split) {
  std::vector<std::int64_t> out;
  out.reserve(split.labels.size());
  for (double y : split.labels) out.push_back(static_cast<std::int64_t>(std::llround(y)));
  return out;
}

FinetuneConfig FinetuneConfig::from(const KeyValues& kv) {
  FinetuneConfig c;
  c.epochs = static_cast<int>(kv.get_int("finetune.epochs"));
  c.lr = kv.get_double("finetune.lr");
  c.encoder_lr = kv.get_double("finetune.encoder_lr");
  c.batch = kv.get_int("finetune.batch");
  c.w_ce = kv.get_double("finetune.w_ce");
  c.w_soft_f1 = kv.get_double("finetune.w_soft_f1");
  c.w_dice = kv.get_double("finetune.w_dice");
  if (c.batch <= 0) fail(ErrorKind::config_schema, "finetune.batch must be positive");
  if (c.lr < 0 || c.encoder_lr < 0) fail(ErrorKind::config_schema, "finetune learning rates must be non-negative");
  return c;
}

ClassificationHeadImpl::ClassificationHeadImpl(std::int64_t dim, std::int64_t classes) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc = register_module("fc", torch::nn::Linear(dim, classes));
}

torch::Tensor ClassificationHeadImpl::forward(const torch::Tensor& x) { return fc(norm(x)); }

RegressionHeadImpl::RegressionHeadImpl(std::int64_t dim, std::int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, 1));
}

torch::Tensor RegressionHeadImpl::forward(const torch::Tensor& x) {
  return fc2(torch::gelu(fc1(x))).squeeze(1);
}

torch::Tensor soft_f1_loss(const torch::Tensor& probs, const torch::Tensor& onehot, double eps) {
  auto tp = (probs * onehot).sum(0);
  auto f1 = 2 * tp / (probs.sum(0) + onehot.sum(0) + eps);
  return 1 - f1.mean();
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& onehot, double smooth) {
  auto inter = (probs * onehot).sum(1);
  auto dice = (2 * inter + smooth) / (probs.sum(1) + onehot.sum(1) + smooth);
  return 1 - dice.mean();
}

torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                  const FinetuneConfig& config) {
  auto probs = torch::softmax(logits, 1);
  auto onehot = torch::one_hot(target, logits.size(1)).to(logits.scalar_type());
  return config.w_ce * torch::nn::functional::cross_entropy(logits, target) +
         config.w_soft_f1 * soft_f1_loss(probs, onehot) + config.w_dice * dice_loss(probs, onehot);
}

std::int64_t head_parameter_count(TaskKind kind, std::int64_t dim, std::size_t num_classes) {
  if (kind == TaskKind::classification)
    return count_parameters(*ClassificationHead(dim, static_cast<std::int64_t>(num_classes)));
  return count_parameters(*RegressionHead(dim));
}

namespace {

// split: 0 train, 1 val, 2 test
using Featurizer = std::function<torch::Tensor(int split, const std::vector<std::int64_t>& idx, bool training)>;

struct Problem {
  std::array<const std::vector<double>*, 3> labels;
  TaskKind kind;
  std::size_t num_classes;
  std::int64_t dim;
  Featurizer features;
  std::vector<torch::Tensor> encoder_params;  // empty when the encoder is not trained
};

FinetuneResult run(const Problem& p, const FinetuneConfig& cfg) {
  require(cfg.epochs >= 1, "finetune: epochs must be at least 1");
  require(cfg.batch >= 1, "finetune: batch must be positive");
  const auto& train_y = *p.labels[0];
  require(!train_y.empty(), "finetune: empty training split");

  torch::manual_seed(cfg.seed);
  std::shared_ptr<torch::nn::Module> head;
  std::function<torch::Tensor(const torch::Tensor&)> head_fwd;
  if (p.kind == TaskKind::classification) {
    ClassificationHead h(p.dim, static_cast<std::int64_t>(p.num_classes));
    head = h.ptr();
    head_fwd = [h](const torch::Tensor& x) mutable { return h->forward(x); };
  } else {
    RegressionHead h(p.dim);
    head = h.ptr();
    head_fwd = [h](const torch::Tensor& x) mutable { return h->forward(x); };
  }

  // Regression targets are standardized with training statistics.
  double y_mean = 0.0, y_sd = 1.0;
  if (p.kind == TaskKind::regression) {
    y_mean = std::accumulate(train_y.begin(), train_y.end(), 0.0) / static_cast<double>(train_y.size());
    double ss = 0;
    for (double y : train_y) ss += (y - y_mean) * (y - y_mean);
    y_sd = std::sqrt(ss / static_cast<double>(train_y.size()));
    if (!(y_sd > 0)) y_sd = 1.0;
  }

  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(head->parameters(), std::make_unique<torch::optim::AdamOptions>(cfg.lr));
  if (!p.encoder_params.empty())
    groups.emplace_back(p.encoder_params, std::make_unique<torch::optim::AdamOptions>(cfg.encoder_lr));
  torch::optim::Adam adam(groups, torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.999}).weight_decay(0.0));

  auto all_params = head->parameters();
  all_params.insert(all_params.end(), p.encoder_params.begin(), p.encoder_params.end());
  auto snapshot = [&] {
    std::vector<torch::Tensor> s;
    for (const auto& t : all_params) s.push_back(t.detach().clone());
    return s;
  };

  auto evaluate = [&](int split) {
    torch::NoGradGuard g;
    head->eval();
    const auto& y = *p.labels[static_cast<std::size_t>(split)];
    const auto n = y.size();
    std::vector<double> out;
    ScoreMatrix scores(n, p.kind == TaskKind::classification ? p.num_classes : 1);
    std::vector<std::int64_t> pred;
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(cfg.batch)) {
      std::vector<std::int64_t> idx(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), n - b));
      std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(b));
      auto o = head_fwd(p.features(split, idx, false)).to(torch::kFloat64).contiguous();
      if (p.kind == TaskKind::classification) {
        auto pr = torch::softmax(o, 1).contiguous();
        std::copy(pr.data_ptr<double>(), pr.data_ptr<double>() + pr.numel(), scores.data.begin() + b * scores.cols);
        auto am = o.argmax(1).contiguous();
        pred.insert(pred.end(), am.data_ptr<std::int64_t>(), am.data_ptr<std::int64_t>() + am.numel());
      } else {
        for (std::int64_t i = 0; i < o.numel(); ++i) out.push_back(o[i].item<double>() * y_sd + y_mean);
      }
    }
    head->train();
    if (p.kind == TaskKind::classification) {
      std::vector<std::int64_t> yt;
      for (double v : y) yt.push_back(static_cast<std::int64_t>(std::llround(v)));
      return classification_metrics(yt, pred, scores);
    }
    return regression_metrics(y, out);
  };

  const bool has_val = !p.labels[1]->empty();
  const int select_split = has_val ? 1 : 0;
  FinetuneResult result;
  std::vector<torch::Tensor> best_state = snapshot();
  double best = -std::numeric_limits<double>::infinity();
  head->train();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0xf1e}};
    std::mt19937_64 rng(seq);
    std::vector<std::int64_t> order(train_y.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch)) {
      std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                    order.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(order.size(), b + static_cast<std::size_t>(cfg.batch))));
      auto out = head_fwd(p.features(0, idx, true));
      torch::Tensor loss;
      if (p.kind == TaskKind::classification) {
        std::vector<std::int64_t> t;
        for (auto i : idx) t.push_back(static_cast<std::int64_t>(std::llround(train_y[static_cast<std::size_t>(i)])));
        loss = classification_loss(out, torch::tensor(t, torch::kLong), cfg);
      } else {
        std::vector<double> t;
        for (auto i : idx) t.push_back((train_y[static_cast<std::size_t>(i)] - y_mean) / y_sd);
        loss = torch::mse_loss(out, torch::tensor(t, torch::kFloat64).to(out.scalar_type()));
      }
      const double v = loss.item<double>();
      if (!std::isfinite(v))
        throw TrainingDiverged(epoch, "fine-tuning diverged at epoch " + std::to_string(epoch) + " after " +
                                          std::to_string(result.history.size()) + " completed epochs");
      adam.zero_grad();
      loss.backward();
      adam.step();
      total += v * static_cast<double>(idx.size());
    }
    auto report = evaluate(select_split);
    const double score = p.kind == TaskKind::classification ? report.at("macro_f1") : -report.at("mae");
    result.history.push_back({epoch, total / static_cast<double>(order.size()),
                              p.kind == TaskKind::classification ? score : -score});
    if (score > best) {
      best = score;
      result.best_epoch = epoch;
      result.val = report;
      best_state = snapshot();
    }
  }
  {
    torch::NoGradGuard g;
    for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i].copy_(best_state[i]);
  }
  result.test = evaluate(2);
  result.test.name = "finetune";
  result.val.name = "finetune_val";
  return result;
}

}  // namespace

FinetuneResult finetune(const EncoderModel& pretrained, const TaskDataset& task, const FinetuneConfig& config) {
  task.validate();
  auto encoder = EncoderModel::from_checkpoint(pretrained.to_checkpoint());
  auto net = encoder.net();
  net->eval();
  const bool train_encoder = config.encoder_lr > 0;
  for (auto& t : net->parameters()) t.set_requires_grad(train_encoder);

  std::array<const TaskSplit*, 3> splits{&task.train, &task.val, &task.test};
  for (const auto* s : splits)
    for (const auto& w : s->windows) encoder.check_length(w.size());

  Problem p;
  p.labels = {&task.train.labels, &task.val.labels, &task.test.labels};
  p.kind = task.kind;
  p.num_classes = task.num_classes;
  p.dim = encoder.config().embedding_dim();
  p.features = [&](int split, const std::vector<std::int64_t>& idx, bool training) {
    std::vector<const PpgWindow*> ws;
    for (auto i : idx) ws.push_back(&splits[static_cast<std::size_t>(split)]->windows[static_cast<std::size_t>(i)]);
    std::optional<torch::NoGradGuard> g;
    if (!(training && train_encoder)) g.emplace();
    auto [x, mask] = stack_windows(ws, net->parameters().front().scalar_type());
    return net->forward(x);
  };
  if (train_encoder) p.encoder_params = net->parameters();
  auto result = run(p, config);
  return result;
}

FinetuneResult train_head(const EmbeddedSplit& train, const EmbeddedSplit& val, const EmbeddedSplit& test,
                          TaskKind kind, std::size_t num_classes, const FinetuneConfig& config) {
  std::array<const EmbeddedSplit*, 3> splits{&train, &val, &test};
  for (const auto* s : splits)
    require(!s->x.defined() ? s->labels.empty() : s->x.size(0) == static_cast<std::int64_t>(s->labels.size()),
            "train_head: embeddings not aligned with labels");
  Problem p;
  p.labels = {&train.labels, &val.labels, &test.labels};
  p.kind = kind;
  p.num_classes = num_classes;
  p.dim = train.x.size(1);
  p.features = [&](int split, const std::vector<std::int64_t>& idx, bool) {
    return splits[static_cast<std::size_t>(split)]->x.index_select(0, torch::tensor(idx, torch::kLong));
  };
  return run(p, config);
}

}  // namespace pulseppg
