#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/checkpoint.hpp"
#include "pulseppg/config.hpp"
#include "pulseppg/layers.hpp"
#include "pulseppg/signal.hpp"

namespace pulseppg {

enum class Aggregation { mean, sum };

struct DistanceConfig {
  std::int64_t filters = 64;
  std::int64_t kernel_size = 15;
  std::int64_t input_kernel_size = 15;
  std::int64_t blocks = 5;
  std::int64_t groups = 8;
  std::int64_t stride = 10;  // attention subsampling stride
  double mask_s = 2.0;
  double rate_hz = 50.0;
  bool instance_norm = true;
  Aggregation aggregation = Aggregation::mean;

  nn::DilatedConvNetOptions net_options() const;
  void write(KeyValues& kv, const std::string& prefix = "distance.") const;
  static DistanceConfig read(const KeyValues& kv, const std::string& prefix = "distance.");
};

enum class FeatureRole { query, key, value };

// Keys and values of a candidate window, subsampled at the attention stride.
struct KeyValueFeatures {
  torch::Tensor keys;      // [N, Tk, F]
  torch::Tensor values;    // [N, Tk]
  torch::Tensor key_mask;  // [N, Tk], 1 where the key saw at least one observed sample
};

// f_q, f_k, f_v dilated feature nets and the single-head cross-attention block
// used as a kernel regression from candidate motifs onto the anchor.
class MotifDistanceNetImpl : public torch::nn::Module {
 public:
  explicit MotifDistanceNetImpl(const DistanceConfig& config);

  // Full-resolution features [N, F, T] and the fully-unobserved flag [N, T].
  std::pair<torch::Tensor, torch::Tensor> features(const torch::Tensor& x, const torch::Tensor& mask,
                                                   FeatureRole role);

  torch::Tensor queries(const torch::Tensor& x, const torch::Tensor& mask);  // [N, Tq, F]
  KeyValueFeatures keys_values(const torch::Tensor& x, const torch::Tensor& mask);

  // Softmax-weighted sums of values: reconstruction [N, Tq] and attention [N, Tq, Tk].
  std::pair<torch::Tensor, torch::Tensor> attend(const torch::Tensor& queries, const KeyValueFeatures& kv);

  DistanceConfig config;
  nn::DilatedConvNet f_q{nullptr}, f_k{nullptr}, f_v{nullptr};
  torch::nn::Linear proj_q{nullptr}, proj_k{nullptr}, proj_v{nullptr};
};
TORCH_MODULE(MotifDistanceNet);

struct ReconstructionResult {
  std::vector<std::int64_t> positions;  // scored anchor sample indices
  std::vector<double> reconstruction;   // aligned with positions
  double distance = 0.0;
  std::optional<torch::Tensor> attention;  // [Tq, Tk]
};

class DistanceModel {
 public:
  explicit DistanceModel(const DistanceConfig& config = {}, std::uint64_t seed = 0);

  const DistanceConfig& config() const { return config_; }
  MotifDistanceNet& net() { return net_; }
  const MotifDistanceNet& net() const { return net_; }

  bool frozen() const { return frozen_; }
  void freeze();
  void unfreeze();

  // Features of one window, [T, F], plus the fully-unobserved flag [T].
  std::pair<torch::Tensor, torch::Tensor> features(const PpgWindow& window, FeatureRole role) const;

  // Reconstructs the anchor from the candidate. Scored positions are the
  // stride-subsampled anchor samples that are observed.
  ReconstructionResult cross_attn_reconstruct(const PpgWindow& anchor, const PpgWindow& candidate,
                                              bool keep_attention = false) const;

  // Requires a frozen model.
  double distance(const PpgWindow& anchor, const PpgWindow& candidate) const;

  // distances[a][c] = d(windows[anchor_a], windows[candidates_a[c]]); each
  // window's features are computed once.
  struct Query {
    std::size_t anchor = 0;
    std::vector<std::size_t> candidates;
  };
  std::vector<std::vector<double>> distances(std::span<const PpgWindow* const> windows,
                                             std::span<const Query> queries) const;

  std::int64_t parameter_count() const;

  Checkpoint to_checkpoint() const;
  static DistanceModel from_checkpoint(const Checkpoint& ckpt);

 private:
  void check_window(const PpgWindow& w) const;

  DistanceConfig config_;
  MotifDistanceNet net_{nullptr};
  bool frozen_ = false;
};

// Stack windows of equal length into [N, T] values and masks.
std::pair<torch::Tensor, torch::Tensor> stack_windows(std::span<const PpgWindow* const> windows,
                                                      torch::Dtype dtype = torch::kFloat32);

// Mean squared reconstruction error on the masked, stride-subsampled query
// positions of each example, averaged over the batch. `query_mask` is 1 where
// the query is observed.
torch::Tensor masked_reconstruction_loss(MotifDistanceNet& net, const torch::Tensor& x,
                                         const torch::Tensor& query_mask);

struct DistanceTrainOptions {
  int epochs = 20;
  double lr = 1e-3;
  std::int64_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct EpochLoss {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

// Stage-1 optimization stream: X_q == X_k == the same window, with a fresh
// contiguous mask on the query side each time the window is visited.
class DistanceTrainer {
 public:
  DistanceTrainer(DistanceModel model, std::vector<PpgWindow> train, std::vector<PpgWindow> val,
                  DistanceTrainOptions options);

  EpochLoss run_epoch();
  // Held-out masked reconstruction loss with masks derived from `seed`.
  double evaluate(std::span<const PpgWindow> windows, std::uint64_t seed);

  int epochs_done() const { return epoch_; }
  const DistanceModel& model() const { return model_; }
  DistanceModel& model() { return model_; }

  // Model, optimizer state and epoch counter.
  Checkpoint save_state() const;
  void load_state(const Checkpoint& ckpt);

 private:
  DistanceModel model_;
  std::vector<PpgWindow> train_;
  std::vector<PpgWindow> val_;
  DistanceTrainOptions options_;
  std::unique_ptr<torch::optim::Adam> adam_;
  int epoch_ = 0;
};

struct DistanceTrainResult {
  DistanceModel model;  // frozen
  std::vector<EpochLoss> history;
};

DistanceTrainResult train_distance(std::vector<PpgWindow> corpus, const DistanceConfig& config,
                                   const DistanceTrainOptions& options, std::vector<PpgWindow> val = {});

// Mask (1 = observed) for masked training: one contiguous gap of mask_s seconds.
std::vector<std::uint8_t> training_mask(std::size_t length, const DistanceConfig& config, std::uint64_t seed);

}  // namespace pulseppg
