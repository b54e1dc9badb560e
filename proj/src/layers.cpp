#include "pulseppg/layers.hpp"

#include <cmath>

#include "pulseppg/errors.hpp"

namespace F = torch::nn::functional;

namespace pulseppg::nn {

torch::Tensor instance_norm(const torch::Tensor& x, double eps) {
  auto mean = x.mean(-1, /*keepdim=*/true);
  auto var = (x - mean).pow(2).mean(-1, /*keepdim=*/true);
  return (x - mean) / torch::sqrt(var + eps);
}

namespace {

std::pair<std::int64_t, std::int64_t> same_padding(std::int64_t length, std::int64_t kernel,
                                                   std::int64_t stride, std::int64_t dilation) {
  const std::int64_t out = (length + stride - 1) / stride;
  const std::int64_t total = std::max<std::int64_t>((out - 1) * stride + dilation * (kernel - 1) + 1 - length, 0);
  return {total / 2, total - total / 2};
}

}  // namespace

SamePadConv1dImpl::SamePadConv1dImpl(const SamePadConv1dOptions& options_) : options(options_) {
  conv = register_module(
      "conv", torch::nn::Conv1d(torch::nn::Conv1dOptions(options.in_channels(), options.out_channels(),
                                                         options.kernel_size())
                                    .stride(options.stride())
                                    .dilation(options.dilation())
                                    .groups(options.groups())
                                    .bias(options.bias())));
}

torch::Tensor SamePadConv1dImpl::forward(const torch::Tensor& x) {
  const auto [left, right] =
      same_padding(x.size(-1), options.kernel_size(), options.stride(), options.dilation());
  if (left == 0 && right == 0) return conv(x);
  return conv(F::pad(x, F::PadFuncOptions({left, right})));
}

PartialConv1dImpl::PartialConv1dImpl(std::int64_t in_channels, std::int64_t out_channels,
                                     std::int64_t kernel_size_)
    : kernel_size(kernel_size_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel_size));
  weight = register_parameter("weight",
                              torch::empty({out_channels, in_channels, kernel_size}).uniform_(-bound, bound));
  bias = register_parameter("bias", torch::empty({out_channels}).uniform_(-bound, bound));
}

std::pair<torch::Tensor, torch::Tensor> PartialConv1dImpl::forward(const torch::Tensor& x,
                                                                   const torch::Tensor& mask) {
  const auto left = (kernel_size - 1) / 2;
  const auto right = kernel_size - 1 - left;
  const auto pad = F::PadFuncOptions({left, right});
  auto m = mask.to(x.dtype()).unsqueeze(1);  // [N, 1, T]
  auto raw = F::conv1d(F::pad(x * m, pad), weight);

  torch::Tensor valid, ratio;
  {
    torch::NoGradGuard no_grad;
    auto taps = torch::ones({1, 1, kernel_size}, x.options());
    auto observed = F::conv1d(F::pad(m, pad), taps);
    auto in_bounds = F::conv1d(F::pad(torch::ones_like(m), pad), taps);
    valid = (observed > 0.5).to(x.dtype());
    ratio = in_bounds / observed.clamp_min(1.0) * valid;
  }
  auto out = (raw * ratio + bias.view({1, -1, 1})) * valid;
  return {out, valid.squeeze(1)};
}

DilatedStackImpl::DilatedStackImpl(const DilatedConvNetOptions& options_) : options(options_) {
  require(options.filters() % options.groups() == 0, "dilated stack: filters must be divisible by groups");
  for (std::int64_t i = 0; i < options.blocks(); ++i) {
    convs.push_back(register_module(
        "block" + std::to_string(i),
        SamePadConv1d(SamePadConv1dOptions(options.filters(), options.filters(), options.kernel_size())
                          .dilation(std::int64_t{1} << i)
                          .groups(options.groups()))));
  }
}

torch::Tensor DilatedStackImpl::forward(torch::Tensor x) {
  for (auto& conv : convs) {
    x = torch::relu(x + conv(x));
    if (options.instance_norm()) x = instance_norm(x);
  }
  return x;
}

std::int64_t DilatedStackImpl::receptive_field() const {
  return 1 + (options.kernel_size() - 1) * ((std::int64_t{1} << options.blocks()) - 1);
}

DilatedConvNetImpl::DilatedConvNetImpl(const DilatedConvNetOptions& options_) : options(options_) {
  input = register_module("input", PartialConv1d(1, options.filters(), options.input_kernel_size()));
  stack = register_module("stack", DilatedStack(options));
}

std::pair<torch::Tensor, torch::Tensor> DilatedConvNetImpl::forward(const torch::Tensor& x,
                                                                    const torch::Tensor& mask) {
  auto [h, observed] = input(x.unsqueeze(1), mask);
  return {stack(h), 1.0 - observed};
}

std::int64_t DilatedConvNetImpl::receptive_field() const {
  return stack->receptive_field() + options.input_kernel_size() - 1;
}

}  // namespace pulseppg::nn
