#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pulseppg/config.hpp"
#include "pulseppg/dataset_io.hpp"
#include "pulseppg/encoder.hpp"
#include "pulseppg/motif_distance.hpp"
#include "pulseppg/relcon.hpp"
#include "pulseppg/signal.hpp"

namespace pulseppg {

struct Stage1Config {
  int epochs = 20;
  double lr = 1e-3;
  std::int64_t batch = 16;
  DistanceConfig distance;
};

struct Stage2Config {
  int epochs = 6;
  double lr = 1e-4;
  std::int64_t batch = 64;
  int patience = 2;
  EncoderConfig encoder;
  LossConfig loss;
};

struct PipelineConfig {
  double window_s = 240.0;
  double rate_hz = 50.0;
  bool znorm = true;
  StatsSource znorm_stats = StatsSource::train_only;
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string checkpoint_dir = "runs";
  Stage1Config stage1;
  Stage2Config stage2;
  // Every other section (synth.*, eval.*, finetune.*) as resolved key/values.
  KeyValues extra;

  // Parses user keys over the defaults; unknown keys and bad values raise config_schema.
  static PipelineConfig from(const KeyValues& user);
  KeyValues resolved() const;
};

// The complete key schema with default values.
const KeyValues& default_config();

struct PreparedData {
  std::vector<PpgWindow> train;
  std::vector<PpgWindow> val;
  std::vector<PpgWindow> test;
};

// Windows every subject (non-overlapping, window_s at rate_hz), applies
// per-subject z-normalization when enabled, and routes windows by split.
PreparedData prepare_windows(const Dataset& dataset, const PipelineConfig& config);

void write_loss_csv(const std::filesystem::path& file, const std::vector<EpochLoss>& history);

struct Stage1Result {
  DistanceModel model;  // frozen, best by validation loss (train loss without a val split)
  std::vector<EpochLoss> history;
  int best_epoch = 0;
};

// Checkpoints every epoch (distance_epoch_<n>.ckpt with optimizer state), the
// best model (distance_best.ckpt) and distance_loss.csv under out_dir. With
// `resume`, training continues from that epoch checkpoint.
Stage1Result run_stage1(const PipelineConfig& config, std::vector<PpgWindow> train, std::vector<PpgWindow> val,
                        const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& resume = std::nullopt);

struct Stage2Epoch {
  EpochLoss loss;
  std::size_t skipped_no_sibling = 0;
  std::size_t skipped_degenerate_batch = 0;
  std::size_t anchors_used = 0;
};

struct Stage2Options {
  int epochs = 6;
  double lr = 1e-4;
  std::int64_t batch = 64;
  LossConfig loss;
  std::uint64_t seed = 0;
};

// Stage-2 optimization stream: per batch, candidates are sampled for every
// anchor, ranked by the frozen distance model and the mean RelCon loss is
// back-propagated through the encoder.
class RelconTrainer {
 public:
  RelconTrainer(EncoderModel encoder, const DistanceModel& distance, std::vector<PpgWindow> train,
                std::vector<PpgWindow> val, Stage2Options options);

  Stage2Epoch run_epoch();
  // Mean per-anchor RelCon loss with the encoder in eval mode.
  Stage2Epoch evaluate(const std::vector<PpgWindow>& windows, std::uint64_t seed) const;

  // Anchor order for an epoch: subjects interleaved so consecutive anchors come
  // from distinct subjects for as long as possible.
  static std::vector<std::size_t> batch_order(const std::vector<PpgWindow>& windows, std::mt19937_64& rng);

  int epochs_done() const { return epoch_; }
  EncoderModel& encoder() { return encoder_; }
  const EncoderModel& encoder() const { return encoder_; }

  Checkpoint save_state() const;
  void load_state(const Checkpoint& ckpt);

 private:
  struct StepResult {
    std::optional<torch::Tensor> loss;
    std::size_t skipped_no_sibling = 0;
    std::size_t skipped_degenerate_batch = 0;
    std::size_t anchors_used = 0;
  };
  StepResult batch_loss(const std::vector<PpgWindow>& corpus, const SubjectIndex& index,
                        std::span<const std::size_t> batch, std::mt19937_64& rng, bool training) const;

  EncoderModel encoder_;
  const DistanceModel* distance_;
  std::vector<PpgWindow> train_;
  std::vector<PpgWindow> val_;
  SubjectIndex train_index_;
  Stage2Options options_;
  std::unique_ptr<torch::optim::Adam> adam_;
  int epoch_ = 0;
};

struct Stage2Result {
  EncoderModel model;  // best by validation loss
  std::vector<Stage2Epoch> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

// Early stops once validation loss fails to improve for `patience` epochs.
// Writes encoder_epoch_<n>.ckpt, encoder_best.ckpt and encoder_loss.csv.
Stage2Result run_stage2(const PipelineConfig& config, const DistanceModel& distance, std::vector<PpgWindow> train,
                        std::vector<PpgWindow> val, const std::filesystem::path& out_dir);

}  // namespace pulseppg
