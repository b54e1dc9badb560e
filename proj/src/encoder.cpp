#include "pulseppg/encoder.hpp"

#include <map>

#include "pulseppg/errors.hpp"
#include "pulseppg/motif_distance.hpp"

namespace pulseppg {

std::int64_t EncoderConfig::block_out_channels(std::int64_t block) const {
  return base_filters * (std::int64_t{1} << (block / increasefilter_gap));
}

bool EncoderConfig::block_downsamples(std::int64_t block) const {
  return stride > 1 && block % downsample_gap == downsample_gap - 1;
}

std::int64_t EncoderConfig::embedding_dim() const {
  return nblocks == 0 ? base_filters : block_out_channels(nblocks - 1);
}

std::int64_t EncoderConfig::min_length() const {
  std::int64_t factor = 1;
  for (std::int64_t b = 0; b < nblocks; ++b)
    if (block_downsamples(b)) factor *= stride;
  return factor;
}

void EncoderConfig::write(KeyValues& kv, const std::string& p) const {
  kv.set(p + "base_filters", std::to_string(base_filters));
  kv.set(p + "kernel", std::to_string(kernel_size));
  kv.set(p + "stride", std::to_string(stride));
  kv.set(p + "groups", std::to_string(groups));
  kv.set(p + "nblocks", std::to_string(nblocks));
  kv.set(p + "increasefilter_gap", std::to_string(increasefilter_gap));
  kv.set(p + "downsample_gap", std::to_string(downsample_gap));
  kv.set(p + "pool", pool == Pooling::max ? "max" : "mean");
}

EncoderConfig EncoderConfig::read(const KeyValues& kv, const std::string& p) {
  EncoderConfig c;
  c.base_filters = kv.get_int(p + "base_filters");
  c.kernel_size = kv.get_int(p + "kernel");
  c.stride = kv.get_int(p + "stride");
  c.groups = kv.get_int(p + "groups");
  c.nblocks = kv.get_int(p + "nblocks");
  c.increasefilter_gap = kv.get_int(p + "increasefilter_gap");
  c.downsample_gap = kv.get_int(p + "downsample_gap");
  const auto pool = kv.get(p + "pool");
  if (pool != "max" && pool != "mean") fail(ErrorKind::config_schema, "pool must be max or mean");
  c.pool = pool == "max" ? Pooling::max : Pooling::mean;
  return c;
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t in_channels, std::int64_t out_channels,
                                     std::int64_t kernel_size, std::int64_t stride, std::int64_t groups,
                                     bool first_block_)
    : first_block(first_block_) {
  if (!first_block) bn1 = register_module("bn1", torch::nn::BatchNorm1d(in_channels));
  conv1 = register_module(
      "conv1", nn::SamePadConv1d(nn::SamePadConv1dOptions(in_channels, out_channels, kernel_size)
                                     .stride(stride)
                                     .groups(groups)));
  bn2 = register_module("bn2", torch::nn::BatchNorm1d(out_channels));
  conv2 = register_module(
      "conv2", nn::SamePadConv1d(nn::SamePadConv1dOptions(out_channels, out_channels, kernel_size).groups(groups)));
  if (stride != 1 || in_channels != out_channels) {
    shortcut = register_module(
        "shortcut",
        torch::nn::Conv1d(torch::nn::Conv1dOptions(in_channels, out_channels, 1).stride(stride).bias(false)));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto out = first_block ? x : torch::relu(bn1(x));
  out = conv1(out);
  out = conv2(torch::relu(bn2(out)));
  return out + (shortcut ? shortcut(x) : x);
}

ResNet1dImpl::ResNet1dImpl(const EncoderConfig& config_) : config(config_) {
  require(config.base_filters > 0 && config.kernel_size > 0 && config.nblocks >= 0 && config.stride >= 1,
          "encoder: invalid configuration");
  require(config.increasefilter_gap > 0 && config.downsample_gap > 0, "encoder: gaps must be positive");
  stem = register_module("stem", nn::SamePadConv1d(nn::SamePadConv1dOptions(1, config.base_filters,
                                                                          config.kernel_size)));
  stem_bn = register_module("stem_bn", torch::nn::BatchNorm1d(config.base_filters));
  std::int64_t in = config.base_filters;
  for (std::int64_t b = 0; b < config.nblocks; ++b) {
    const auto out = config.block_out_channels(b);
    const auto stride = config.block_downsamples(b) ? config.stride : 1;
    blocks.push_back(register_module(
        "block" + std::to_string(b),
        ResidualBlock(in, out, config.kernel_size, stride, config.groups, /*first_block=*/b == 0)));
    in = out;
  }
  final_bn = register_module("final_bn", torch::nn::BatchNorm1d(in));
}

torch::Tensor ResNet1dImpl::trunk(const torch::Tensor& x) {
  auto h = nn::instance_norm(x.unsqueeze(1));
  h = torch::relu(stem_bn(stem(h)));
  for (auto& block : blocks) h = block(h);
  return torch::relu(final_bn(h));
}

torch::Tensor ResNet1dImpl::forward(const torch::Tensor& x) {
  auto h = trunk(x);
  return config.pool == Pooling::max ? std::get<0>(h.max(-1)) : h.mean(-1);
}

EncoderModel::EncoderModel(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  torch::manual_seed(seed);
  net_ = ResNet1d(config_);
}

void EncoderModel::check_length(std::size_t length) const {
  if (static_cast<std::int64_t>(length) < config_.min_length())
    fail(ErrorKind::invalid_argument, "encoder input of " + std::to_string(length) +
                                          " samples is shorter than the minimum length " +
                                          std::to_string(config_.min_length()));
}

torch::Tensor EncoderModel::forward(std::span<const PpgWindow* const> windows) {
  require(!windows.empty(), "encoder: no windows");
  for (const auto* w : windows) check_length(w->size());
  const auto dtype = net_.ptr()->parameters().front().scalar_type();
  auto [x, mask] = stack_windows(windows, dtype);
  return net_.ptr()->forward(x);
}

torch::Tensor EncoderModel::embed(std::span<const PpgWindow* const> windows) const {
  require(!windows.empty(), "embed: no windows");
  torch::NoGradGuard no_grad;
  const bool was_training = net_.ptr()->is_training();
  net_.ptr()->eval();
  const auto dtype = net_.ptr()->parameters().front().scalar_type();
  auto out = torch::empty({static_cast<std::int64_t>(windows.size()), config_.embedding_dim()}, dtype);
  // Group by length so each group is one batched forward.
  std::map<std::size_t, std::vector<std::int64_t>> by_length;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    check_length(windows[i]->size());
    by_length[windows[i]->size()].push_back(static_cast<std::int64_t>(i));
  }
  constexpr std::size_t chunk = 32;
  for (const auto& [length, rows] : by_length) {
    for (std::size_t b = 0; b < rows.size(); b += chunk) {
      std::vector<std::int64_t> part(rows.begin() + static_cast<std::ptrdiff_t>(b),
                                     rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), b + chunk)));
      std::vector<const PpgWindow*> group;
      for (auto r : part) group.push_back(windows[static_cast<std::size_t>(r)]);
      auto [x, mask] = stack_windows(group, dtype);
      out.index_copy_(0, torch::tensor(part, torch::kLong), net_.ptr()->forward(x));
    }
  }
  if (was_training) net_.ptr()->train();
  return out;
}

Embedding EncoderModel::embed(const PpgWindow& window) const {
  const PpgWindow* one[] = {&window};
  auto e = embed(one)[0].to(torch::kFloat32).contiguous();
  return {std::vector<float>(e.data_ptr<float>(), e.data_ptr<float>() + e.numel()), window.id};
}

std::int64_t EncoderModel::parameter_count() const { return count_parameters(*net_.ptr()); }

Checkpoint EncoderModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.header.set("kind", "encoder");
  config_.write(ckpt.header);
  export_module(*net_, ckpt, "net.");
  return ckpt;
}

EncoderModel EncoderModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.get_or("kind", "") != "encoder")
    fail(ErrorKind::invalid_argument, "checkpoint does not hold an encoder");
  EncoderModel model(EncoderConfig::read(ckpt.header));
  import_module(*model.net_, ckpt, "net.");
  model.net_.ptr()->eval();
  return model;
}

}  // namespace pulseppg
