#include "pulseppg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pulseppg/errors.hpp"

namespace fs = std::filesystem;

namespace pulseppg {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'G', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  const char* take(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::io, origin_ + ": truncated checkpoint");
  }

  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<torch::Tensor> state_tensors(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) out.push_back(p);
  for (const auto& b : module.buffers()) out.push_back(b);
  return out;
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::add(const std::string& name, const torch::Tensor& t) {
  tensors.emplace_back(name, t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous().clone());
}

void save_checkpoint(const fs::path& file, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Checkpoint::kVersion);
  const auto& entries = ckpt.header.entries();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [k, v] : entries) {
    put_string(out, k);
    put_string(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    const auto t = tensor.to(torch::kFloat32).contiguous();
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    const float* data = t.data_ptr<float>();
    for (std::int64_t i = 0; i < t.numel(); ++i) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(data[i]));
  }
  write_file_atomic(file, out);
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::data_not_found, "cannot open checkpoint " + file.string());
  Reader r(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()), file.string());
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::io, file.string() + " is not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    fail(ErrorKind::io, file.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto n_header = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_header; ++i) {
    auto k = r.get_string();
    auto v = r.get_string();
    ckpt.header.set(k, v);
  }
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.get_string();
    const auto ndim = r.get<std::uint32_t>();
    std::vector<std::int64_t> shape(ndim);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::int64_t>(r.get<std::uint64_t>());
      numel *= d;
    }
    auto t = torch::empty(shape, torch::kFloat32);
    float* data = t.data_ptr<float>();
    for (std::int64_t j = 0; j < numel; ++j) data[j] = std::bit_cast<float>(r.get<std::uint32_t>());
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

void export_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& item : module.named_parameters()) ckpt.add(prefix + item.key(), item.value());
  for (const auto& item : module.named_buffers()) ckpt.add(prefix + item.key(), item.value());
}

void import_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor& target) {
    const auto* src = ckpt.find(prefix + name);
    if (!src) fail(ErrorKind::io, "checkpoint lacks tensor '" + prefix + name + "'");
    if (src->sizes() != target.sizes())
      fail(ErrorKind::io, "checkpoint tensor '" + prefix + name + "' has the wrong shape");
    target.copy_(src->to(target.dtype()));
  };
  for (auto& item : module.named_parameters()) copy(item.key(), item.value());
  for (auto& item : module.named_buffers()) copy(item.key(), item.value());
}

void export_adam(const torch::optim::Adam& adam, const torch::nn::Module& module, Checkpoint& ckpt,
                 const std::string& prefix) {
  const auto& state = adam.state();
  for (const auto& item : module.named_parameters()) {
    auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    ckpt.add(prefix + item.key() + ".exp_avg", s.exp_avg());
    ckpt.add(prefix + item.key() + ".exp_avg_sq", s.exp_avg_sq());
    ckpt.add(prefix + item.key() + ".step", torch::tensor({static_cast<float>(s.step())}));
  }
}

void import_adam(torch::optim::Adam& adam, const torch::nn::Module& module, const Checkpoint& ckpt,
                 const std::string& prefix) {
  for (const auto& item : module.named_parameters()) {
    const auto* avg = ckpt.find(prefix + item.key() + ".exp_avg");
    const auto* sq = ckpt.find(prefix + item.key() + ".exp_avg_sq");
    const auto* step = ckpt.find(prefix + item.key() + ".step");
    if (!avg || !sq || !step) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    const auto dtype = item.value().dtype();
    s->exp_avg(avg->to(dtype).clone());
    s->exp_avg_sq(sq->to(dtype).clone());
    s->step(static_cast<std::int64_t>(step->item<float>()));
    adam.state()[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

std::uint64_t module_checksum(const torch::nn::Module& module) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : state_tensors(module)) {
    const auto c = t.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters())
    n += p.numel();
  return n;
}

}  // namespace pulseppg
