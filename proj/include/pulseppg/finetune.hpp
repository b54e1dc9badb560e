#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/config.hpp"
#include "pulseppg/encoder.hpp"
#include "pulseppg/metrics.hpp"
#include "pulseppg/signal.hpp"

namespace pulseppg {

struct TaskSplit {
  std::vector<PpgWindow> windows;
  std::vector<double> labels;  // class index or real target, aligned with windows
};

struct TaskDataset {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t num_classes = 0;  // classification only
  TaskSplit train, val, test;

  // Labels aligned, class labels integral and in range, no subject in two splits.
  void validate() const;
  static std::vector<std::int64_t> class_labels(const TaskSplit& split);
};

struct FinetuneConfig {
  int epochs = 10;
  double lr = 1e-4;          // head
  double encoder_lr = 1e-4;  // 0 freezes the encoder
  std::int64_t batch = 16;
  double w_ce = 1.0 / 3.0;
  double w_soft_f1 = 1.0 / 3.0;
  double w_dice = 1.0 / 3.0;
  std::uint64_t seed = 0;

  // Reads the finetune.* keys.
  static FinetuneConfig from(const KeyValues& kv);
};

class ClassificationHeadImpl : public torch::nn::Module {
 public:
  ClassificationHeadImpl(std::int64_t dim, std::int64_t classes);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ClassificationHead);

class RegressionHeadImpl : public torch::nn::Module {
 public:
  explicit RegressionHeadImpl(std::int64_t dim, std::int64_t hidden = 128);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(RegressionHead);

// 1 - mean over classes of 2*sum(p*y) / (sum(p) + sum(y) + eps), sums over the batch.
torch::Tensor soft_f1_loss(const torch::Tensor& probs, const torch::Tensor& onehot, double eps = 1e-8);
// 1 - mean over samples of (2*sum(p*y) + s) / (sum(p) + sum(y) + s), sums over classes.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& onehot, double smooth = 1.0);
torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& target,
                                  const FinetuneConfig& config);

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_score = 0.0;  // macro F1 (classification) or MAE (regression)
};

struct FinetuneResult {
  MetricReport test;
  MetricReport val;  // at the selected epoch
  std::vector<FinetuneEpoch> history;
  int best_epoch = 0;
};

// End-to-end training of a copy of `pretrained` plus a fresh head. Encoder batch
// norm statistics stay frozen; the checkpoint with the best validation macro F1
// (classification) or lowest validation MAE (regression) is scored on test.
FinetuneResult finetune(const EncoderModel& pretrained, const TaskDataset& task, const FinetuneConfig& config);

// The same head, loss, schedule and selection over precomputed embeddings.
struct EmbeddedSplit {
  torch::Tensor x;  // [N, D]
  std::vector<double> labels;
};
FinetuneResult train_head(const EmbeddedSplit& train, const EmbeddedSplit& val, const EmbeddedSplit& test,
                          TaskKind kind, std::size_t num_classes, const FinetuneConfig& config);

std::int64_t head_parameter_count(TaskKind kind, std::int64_t dim, std::size_t num_classes);

}  // namespace pulseppg
