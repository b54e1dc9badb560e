#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/config.hpp"

namespace pulseppg {

// Versioned binary container: magic, version, a key/value config header, then
// named tensors (name, shape, little-endian float32 payload) in insertion order.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  KeyValues header;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const;
  void add(const std::string& name, const torch::Tensor& t);
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& file);

// Parameters and buffers of `module`, names prefixed with `prefix`.
void export_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix = "");
// Copies every parameter and buffer of `module` from the checkpoint; all must exist with matching shapes.
void import_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix = "");

void export_adam(const torch::optim::Adam& adam, const torch::nn::Module& module, Checkpoint& ckpt,
                 const std::string& prefix = "adam.");
void import_adam(torch::optim::Adam& adam, const torch::nn::Module& module, const Checkpoint& ckpt,
                 const std::string& prefix = "adam.");

// FNV-1a over the raw bytes of every parameter and buffer, in registration order.
std::uint64_t module_checksum(const torch::nn::Module& module);

// Every parameter scalar, whether or not it is currently frozen.
std::int64_t count_parameters(const torch::nn::Module& module);

}  // namespace pulseppg
