#pragma once

#include <torch/torch.h>

namespace pulseppg::nn {

// Per-instance, per-channel standardization over time, no affine parameters.
torch::Tensor instance_norm(const torch::Tensor& x, double eps = 1e-5);

// Conv1d with "same" padding for any stride: output length ceil(T / stride).
// Extra padding for even totals goes on the right.
struct SamePadConv1dOptions {
  SamePadConv1dOptions(std::int64_t in, std::int64_t out, std::int64_t kernel)
      : in_channels_(in), out_channels_(out), kernel_size_(kernel) {}
  TORCH_ARG(std::int64_t, in_channels);
  TORCH_ARG(std::int64_t, out_channels);
  TORCH_ARG(std::int64_t, kernel_size);
  TORCH_ARG(std::int64_t, stride) = 1;
  TORCH_ARG(std::int64_t, dilation) = 1;
  TORCH_ARG(std::int64_t, groups) = 1;
  TORCH_ARG(bool, bias) = true;
};

class SamePadConv1dImpl : public torch::nn::Module {
 public:
  explicit SamePadConv1dImpl(const SamePadConv1dOptions& options);
  torch::Tensor forward(const torch::Tensor& x);

  SamePadConv1dOptions options;
  torch::nn::Conv1d conv{nullptr};
};
TORCH_MODULE(SamePadConv1d);

// Partial convolution over a single shared observation mask: missing inputs are
// zero-filled and each output is rescaled by (in-bounds taps / observed taps).
// Outputs whose receptive field holds no observed sample are zero and flagged.
class PartialConv1dImpl : public torch::nn::Module {
 public:
  PartialConv1dImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel_size);

  // x: [N, C, T]; mask: [N, T] with 1 = observed. Returns output and the
  // updated mask [N, T] (1 where at least one observed tap contributed).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& mask);

  std::int64_t kernel_size;
  torch::Tensor weight;
  torch::Tensor bias;
};
TORCH_MODULE(PartialConv1d);

struct DilatedConvNetOptions {
  TORCH_ARG(std::int64_t, filters) = 64;
  TORCH_ARG(std::int64_t, kernel_size) = 15;
  TORCH_ARG(std::int64_t, input_kernel_size) = 15;
  TORCH_ARG(std::int64_t, blocks) = 5;
  TORCH_ARG(std::int64_t, groups) = 8;
  TORCH_ARG(bool, instance_norm) = true;
};

// Dilated residual stack: block i computes IN(ReLU(x + conv_{d=2^i}(x))).
class DilatedStackImpl : public torch::nn::Module {
 public:
  explicit DilatedStackImpl(const DilatedConvNetOptions& options);
  torch::Tensor forward(torch::Tensor x);

  // 1 + (kernel - 1) * (2^blocks - 1)
  std::int64_t receptive_field() const;

  DilatedConvNetOptions options;
  std::vector<SamePadConv1d> convs;
};
TORCH_MODULE(DilatedStack);

// Partial-conv input layer followed by the dilated stack.
class DilatedConvNetImpl : public torch::nn::Module {
 public:
  explicit DilatedConvNetImpl(const DilatedConvNetOptions& options);

  // x: [N, T] signal, mask: [N, T]. Returns features [N, filters, T] and the
  // flag [N, T] marking positions whose input receptive field was fully unobserved.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& mask);

  std::int64_t receptive_field() const;

  DilatedConvNetOptions options;
  PartialConv1d input{nullptr};
  DilatedStack stack{nullptr};
};
TORCH_MODULE(DilatedConvNet);

}  // namespace pulseppg::nn
