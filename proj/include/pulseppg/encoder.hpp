#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/checkpoint.hpp"
#include "pulseppg/layers.hpp"
#include "pulseppg/signal.hpp"

namespace pulseppg {

enum class Pooling { max, mean };

struct EncoderConfig {
  std::int64_t base_filters = 128;
  std::int64_t kernel_size = 11;
  std::int64_t stride = 2;
  std::int64_t groups = 1;
  std::int64_t nblocks = 12;
  std::int64_t increasefilter_gap = 4;  // filters double every this many blocks
  std::int64_t downsample_gap = 2;      // blocks 1, 1+gap, 1+2*gap, ... downsample
  Pooling pool = Pooling::max;

  std::int64_t block_out_channels(std::int64_t block) const;
  bool block_downsamples(std::int64_t block) const;
  std::int64_t embedding_dim() const;
  // Total temporal downsampling; shorter inputs are rejected.
  std::int64_t min_length() const;

  void write(KeyValues& kv, const std::string& prefix = "encoder.") const;
  static EncoderConfig read(const KeyValues& kv, const std::string& prefix = "encoder.");
};

// Pre-activation basic block with two convolutions; the first one carries the
// stride. The skip path is a strided 1x1 projection whenever the shape changes.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel_size,
                    std::int64_t stride, std::int64_t groups, bool first_block);
  torch::Tensor forward(const torch::Tensor& x);

  bool first_block;
  torch::nn::BatchNorm1d bn1{nullptr}, bn2{nullptr};
  nn::SamePadConv1d conv1{nullptr}, conv2{nullptr};
  torch::nn::Conv1d shortcut{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Input instance norm, stem convolution, residual trunk, global temporal pooling.
class ResNet1dImpl : public torch::nn::Module {
 public:
  explicit ResNet1dImpl(const EncoderConfig& config);
  // x: [N, T] -> [N, embedding_dim]
  torch::Tensor forward(const torch::Tensor& x);
  // [N, C, T'] trunk output before pooling.
  torch::Tensor trunk(const torch::Tensor& x);

  EncoderConfig config;
  nn::SamePadConv1d stem{nullptr};
  torch::nn::BatchNorm1d stem_bn{nullptr}, final_bn{nullptr};
  std::vector<ResidualBlock> blocks;
};
TORCH_MODULE(ResNet1d);

struct Embedding {
  std::vector<float> vector;
  std::string source_window_id;
};

class EncoderModel {
 public:
  explicit EncoderModel(const EncoderConfig& config = {}, std::uint64_t seed = 0);

  const EncoderConfig& config() const { return config_; }
  ResNet1d& net() { return net_; }
  const ResNet1d& net() const { return net_; }

  // Eval-mode embeddings [N, D]; windows of different lengths are embedded separately.
  torch::Tensor embed(std::span<const PpgWindow* const> windows) const;
  Embedding embed(const PpgWindow& window) const;

  // Differentiable forward in the module's current mode, windows of equal length.
  torch::Tensor forward(std::span<const PpgWindow* const> windows);

  std::int64_t parameter_count() const;

  Checkpoint to_checkpoint() const;
  static EncoderModel from_checkpoint(const Checkpoint& ckpt);

  void check_length(std::size_t length) const;

 private:
  EncoderConfig config_;
  ResNet1d net_{nullptr};
};

}  // namespace pulseppg
