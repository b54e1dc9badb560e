#include "pulseppg/motif_distance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pulseppg/errors.hpp"

namespace pulseppg {

using torch::indexing::None;
using torch::indexing::Slice;

nn::DilatedConvNetOptions DistanceConfig::net_options() const {
  return nn::DilatedConvNetOptions()
      .filters(filters)
      .kernel_size(kernel_size)
      .input_kernel_size(input_kernel_size)
      .blocks(blocks)
      .groups(groups)
      .instance_norm(instance_norm);
}

void DistanceConfig::write(KeyValues& kv, const std::string& p) const {
  kv.set(p + "filters", std::to_string(filters));
  kv.set(p + "kernel", std::to_string(kernel_size));
  kv.set(p + "input_kernel", std::to_string(input_kernel_size));
  kv.set(p + "blocks", std::to_string(blocks));
  kv.set(p + "groups", std::to_string(groups));
  kv.set(p + "stride", std::to_string(stride));
  kv.set(p + "mask_s", std::to_string(mask_s));
  kv.set(p + "rate_hz", std::to_string(rate_hz));
  kv.set(p + "instance_norm", instance_norm ? "true" : "false");
  kv.set(p + "aggregation", aggregation == Aggregation::mean ? "mean" : "sum");
}

DistanceConfig DistanceConfig::read(const KeyValues& kv, const std::string& p) {
  DistanceConfig c;
  c.filters = kv.get_int(p + "filters");
  c.kernel_size = kv.get_int(p + "kernel");
  c.input_kernel_size = kv.get_int(p + "input_kernel");
  c.blocks = kv.get_int(p + "blocks");
  c.groups = kv.get_int(p + "groups");
  c.stride = kv.get_int(p + "stride");
  c.mask_s = kv.get_double(p + "mask_s");
  c.rate_hz = kv.get_double(p + "rate_hz");
  c.instance_norm = kv.get_bool(p + "instance_norm");
  const auto agg = kv.get(p + "aggregation");
  if (agg != "mean" && agg != "sum") fail(ErrorKind::config_schema, "aggregation must be mean or sum");
  c.aggregation = agg == "mean" ? Aggregation::mean : Aggregation::sum;
  return c;
}

MotifDistanceNetImpl::MotifDistanceNetImpl(const DistanceConfig& config_) : config(config_) {
  require(config.stride >= 1, "distance: attention stride must be >= 1");
  const auto opts = config.net_options();
  f_q = register_module("f_q", nn::DilatedConvNet(opts));
  f_k = register_module("f_k", nn::DilatedConvNet(opts));
  f_v = register_module("f_v", nn::DilatedConvNet(opts));
  proj_q = register_module("proj_q", torch::nn::Linear(config.filters, config.filters));
  proj_k = register_module("proj_k", torch::nn::Linear(config.filters, config.filters));
  proj_v = register_module("proj_v", torch::nn::Linear(config.filters, 1));
}

std::pair<torch::Tensor, torch::Tensor> MotifDistanceNetImpl::features(const torch::Tensor& x,
                                                                       const torch::Tensor& mask,
                                                                       FeatureRole role) {
  require(x.size(-1) >= config.input_kernel_size && x.size(-1) >= config.kernel_size,
          "features: window of " + std::to_string(x.size(-1)) + " samples is shorter than the kernel");
  switch (role) {
    case FeatureRole::query: return f_q(x, mask);
    case FeatureRole::key: return f_k(x, mask);
    case FeatureRole::value: return f_v(x, mask);
  }
  fail(ErrorKind::invalid_argument, "unknown feature role");
}

torch::Tensor MotifDistanceNetImpl::queries(const torch::Tensor& x, const torch::Tensor& mask) {
  auto [feat, flagged] = features(x, mask, FeatureRole::query);
  auto sub = feat.index({Slice(), Slice(), Slice(None, None, config.stride)}).transpose(1, 2);
  return proj_q(sub);
}

KeyValueFeatures MotifDistanceNetImpl::keys_values(const torch::Tensor& x, const torch::Tensor& mask) {
  const auto every = Slice(None, None, config.stride);
  auto [kfeat, kflag] = features(x, mask, FeatureRole::key);
  auto [vfeat, vflag] = features(x, mask, FeatureRole::value);
  KeyValueFeatures out;
  out.keys = proj_k(kfeat.index({Slice(), Slice(), every}).transpose(1, 2));
  out.values = proj_v(vfeat.index({Slice(), Slice(), every}).transpose(1, 2)).squeeze(-1);
  out.key_mask = 1.0 - kflag.index({Slice(), every});
  return out;
}

std::pair<torch::Tensor, torch::Tensor> MotifDistanceNetImpl::attend(const torch::Tensor& q,
                                                                     const KeyValueFeatures& kv) {
  auto scores = torch::matmul(q, kv.keys.transpose(1, 2)) / std::sqrt(static_cast<double>(config.filters));
  scores = scores.masked_fill(kv.key_mask.unsqueeze(1) < 0.5, -std::numeric_limits<double>::infinity());
  auto attention = torch::softmax(scores, -1);
  auto recon = torch::matmul(attention, kv.values.unsqueeze(-1)).squeeze(-1);
  return {recon, attention};
}

std::pair<torch::Tensor, torch::Tensor> stack_windows(std::span<const PpgWindow* const> windows,
                                                      torch::Dtype dtype) {
  require(!windows.empty(), "stack_windows: no windows");
  const auto n = static_cast<std::int64_t>(windows.size());
  const auto t = static_cast<std::int64_t>(windows.front()->size());
  auto values = torch::empty({n, t}, torch::kFloat64);
  auto mask = torch::empty({n, t}, torch::kFloat64);
  auto va = values.accessor<double, 2>();
  auto ma = mask.accessor<double, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& w = *windows[static_cast<std::size_t>(i)];
    require(static_cast<std::int64_t>(w.size()) == t, "stack_windows: windows differ in length");
    for (std::int64_t j = 0; j < t; ++j) {
      const bool obs = w.observed[static_cast<std::size_t>(j)] != 0;
      va[i][j] = obs ? w.values[static_cast<std::size_t>(j)] : 0.0;
      ma[i][j] = obs ? 1.0 : 0.0;
    }
  }
  return {values.to(dtype), mask.to(dtype)};
}

torch::Tensor masked_reconstruction_loss(MotifDistanceNet& net, const torch::Tensor& x,
                                         const torch::Tensor& query_mask) {
  const auto every = Slice(None, None, net->config.stride);
  auto q = net->queries(x, query_mask);
  auto kv = net->keys_values(x, torch::ones_like(x));
  auto [recon, attention] = net->attend(q, kv);
  auto target = x.index({Slice(), every});
  auto scored = 1.0 - query_mask.index({Slice(), every});
  auto counts = scored.sum(1);
  auto per_example = ((recon - target).pow(2) * scored).sum(1) / counts.clamp_min(1.0);
  auto has = (counts > 0).to(x.dtype());
  return (per_example * has).sum() / has.sum().clamp_min(1.0);
}

std::vector<std::uint8_t> training_mask(std::size_t length, const DistanceConfig& config, std::uint64_t seed) {
  MaskSpec spec;
  spec.duration_s = config.mask_s;
  spec.rng_seed = seed;
  return make_mask(length, config.rate_hz, spec);
}

DistanceModel::DistanceModel(const DistanceConfig& config, std::uint64_t seed) : config_(config) {
  torch::manual_seed(seed);
  net_ = MotifDistanceNet(config_);
}

void DistanceModel::freeze() {
  for (auto& p : net_.ptr()->parameters()) p.set_requires_grad(false);
  net_.ptr()->eval();
  frozen_ = true;
}

void DistanceModel::unfreeze() {
  for (auto& p : net_.ptr()->parameters()) p.set_requires_grad(true);
  net_.ptr()->train();
  frozen_ = false;
}

void DistanceModel::check_window(const PpgWindow& w) const {
  w.validate();
  if (std::abs(w.rate_hz - config_.rate_hz) > 1e-9)
    fail(ErrorKind::invalid_argument, "window '" + w.id + "' is at " + std::to_string(w.rate_hz) +
                                          " Hz but the distance model expects " +
                                          std::to_string(config_.rate_hz) + " Hz");
}

namespace {

torch::Dtype param_dtype(const torch::nn::Module& m) {
  return m.parameters().front().scalar_type();
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> DistanceModel::features(const PpgWindow& window,
                                                                FeatureRole role) const {
  check_window(window);
  torch::NoGradGuard no_grad;
  const PpgWindow* one[] = {&window};
  auto [x, m] = stack_windows(one, param_dtype(*net_.ptr()));
  auto [feat, flagged] = net_.ptr()->features(x, m, role);
  return {feat[0].transpose(0, 1).contiguous(), flagged[0]};
}

ReconstructionResult DistanceModel::cross_attn_reconstruct(const PpgWindow& anchor, const PpgWindow& candidate,
                                                           bool keep_attention) const {
  check_window(anchor);
  check_window(candidate);
  torch::NoGradGuard no_grad;
  const auto dtype = param_dtype(*net_.ptr());
  const PpgWindow* a[] = {&anchor};
  const PpgWindow* c[] = {&candidate};
  auto [xa, ma] = stack_windows(a, dtype);
  auto [xc, mc] = stack_windows(c, dtype);
  auto q = net_.ptr()->queries(xa, ma);
  auto kv = net_.ptr()->keys_values(xc, mc);
  if (kv.key_mask.sum().item<double>() < 0.5)
    fail(ErrorKind::invalid_argument, "candidate '" + candidate.id + "' has no observed keys");
  auto [recon, attention] = net_.ptr()->attend(q, kv);

  ReconstructionResult out;
  auto r = recon[0].to(torch::kFloat64).contiguous();
  const auto* rp = r.data_ptr<double>();
  double total = 0.0;
  for (std::int64_t i = 0, p = 0; p < static_cast<std::int64_t>(anchor.size()); ++i, p += config_.stride) {
    if (!anchor.observed[static_cast<std::size_t>(p)]) continue;
    const double residual = rp[i] - anchor.values[static_cast<std::size_t>(p)];
    total += residual * residual;
    out.positions.push_back(p);
    out.reconstruction.push_back(rp[i]);
  }
  if (out.positions.empty()) fail(ErrorKind::invalid_argument, "anchor '" + anchor.id + "' has no scored positions");
  out.distance = config_.aggregation == Aggregation::mean ? total / static_cast<double>(out.positions.size()) : total;
  if (keep_attention) out.attention = attention[0].clone();
  return out;
}

double DistanceModel::distance(const PpgWindow& anchor, const PpgWindow& candidate) const {
  if (!frozen_) fail(ErrorKind::misuse, "distance() requires a frozen distance model");
  return cross_attn_reconstruct(anchor, candidate).distance;
}

std::vector<std::vector<double>> DistanceModel::distances(std::span<const PpgWindow* const> windows,
                                                          std::span<const Query> queries) const {
  if (!frozen_) fail(ErrorKind::misuse, "distances() requires a frozen distance model");
  torch::NoGradGuard no_grad;
  const auto dtype = param_dtype(*net_.ptr());
  std::vector<std::vector<double>> out;
  if (queries.empty()) return out;
  for (const auto* w : windows) check_window(*w);

  auto [x, m] = stack_windows(windows, dtype);
  auto q_all = net_.ptr()->queries(x, m);
  auto kv_all = net_.ptr()->keys_values(x, m);
  const auto every = Slice(None, None, config_.stride);
  auto target = x.index({Slice(), every});
  auto scored = m.index({Slice(), every});

  for (const auto& query : queries) {
    const auto a = static_cast<std::int64_t>(query.anchor);
    std::vector<std::int64_t> cidx(query.candidates.begin(), query.candidates.end());
    if (cidx.empty()) {
      out.emplace_back();
      continue;
    }
    auto index = torch::tensor(cidx, torch::kLong);
    KeyValueFeatures kv{kv_all.keys.index_select(0, index), kv_all.values.index_select(0, index),
                        kv_all.key_mask.index_select(0, index)};
    const auto c = static_cast<std::int64_t>(cidx.size());
    auto q = q_all[a].unsqueeze(0).expand({c, -1, -1});
    auto [recon, attention] = net_.ptr()->attend(q, kv);
    auto sq = (recon - target[a].unsqueeze(0)).pow(2) * scored[a].unsqueeze(0);
    auto d = sq.sum(1);
    if (config_.aggregation == Aggregation::mean) d = d / scored[a].sum().clamp_min(1.0);
    d = d.to(torch::kFloat64).contiguous();
    out.emplace_back(d.data_ptr<double>(), d.data_ptr<double>() + c);
  }
  return out;
}

std::int64_t DistanceModel::parameter_count() const { return count_parameters(*net_.ptr()); }

Checkpoint DistanceModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.header.set("kind", "distance");
  config_.write(ckpt.header);
  export_module(*net_, ckpt, "net.");
  return ckpt;
}

DistanceModel DistanceModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.get_or("kind", "") != "distance")
    fail(ErrorKind::invalid_argument, "checkpoint does not hold a distance model");
  DistanceModel model(DistanceConfig::read(ckpt.header));
  import_module(*model.net_, ckpt, "net.");
  model.freeze();
  return model;
}

DistanceTrainer::DistanceTrainer(DistanceModel model, std::vector<PpgWindow> train, std::vector<PpgWindow> val,
                                 DistanceTrainOptions options)
    : model_(std::move(model)), train_(std::move(train)), val_(std::move(val)), options_(options) {
  require(!train_.empty(), "train_distance: empty corpus");
  require(options_.batch_size >= 1 && options_.epochs >= 0, "train_distance: bad batch size or epochs");
  for (const auto& w : train_) {
    w.validate();
    require(w.size() == train_.front().size(), "train_distance: corpus windows differ in length");
    require(std::abs(w.rate_hz - model_.config().rate_hz) < 1e-9, "train_distance: corpus rate differs from config");
  }
  model_.unfreeze();
  adam_ = std::make_unique<torch::optim::Adam>(
      model_.net()->parameters(),
      torch::optim::AdamOptions(options_.lr).betas({0.9, 0.999}).weight_decay(0.0));
}

double DistanceTrainer::evaluate(std::span<const PpgWindow> windows, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  const auto dtype = param_dtype(*model_.net());
  std::mt19937_64 rng(seed);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t begin = 0; begin < windows.size(); begin += static_cast<std::size_t>(options_.batch_size)) {
    const auto end = std::min(windows.size(), begin + static_cast<std::size_t>(options_.batch_size));
    std::vector<const PpgWindow*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&windows[i]);
    auto [x, observed] = stack_windows(batch, dtype);
    auto qmask = observed.clone();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto gap = training_mask(batch[i]->size(), model_.config(), rng());
      qmask[static_cast<std::int64_t>(i)].mul_(torch::tensor(std::vector<double>(gap.begin(), gap.end()), dtype));
    }
    const double loss = masked_reconstruction_loss(model_.net(), x, qmask).item<double>();
    total += loss * static_cast<double>(batch.size());
    count += batch.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

EpochLoss DistanceTrainer::run_epoch() {
  const int epoch = epoch_ + 1;
  std::seed_seq seq{options_.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5151}};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const auto dtype = param_dtype(*model_.net());
  model_.net()->train();
  double total = 0.0;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(options_.batch_size)) {
    const auto end = std::min(order.size(), begin + static_cast<std::size_t>(options_.batch_size));
    std::vector<const PpgWindow*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&train_[order[i]]);
    auto [x, observed] = stack_windows(batch, dtype);
    auto qmask = observed.clone();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto gap = training_mask(batch[i]->size(), model_.config(), rng());
      qmask[static_cast<std::int64_t>(i)].mul_(torch::tensor(std::vector<double>(gap.begin(), gap.end()), dtype));
    }
    adam_->zero_grad();
    auto loss = masked_reconstruction_loss(model_.net(), x, qmask);
    const double value = loss.item<double>();
    if (!std::isfinite(value))
      throw TrainingDiverged(epoch, "distance training diverged at epoch " + std::to_string(epoch));
    loss.backward();
    adam_->step();
    total += value * static_cast<double>(batch.size());
  }
  epoch_ = epoch;
  EpochLoss out;
  out.epoch = epoch;
  out.train_loss = total / static_cast<double>(train_.size());
  if (!val_.empty()) {
    out.val_loss = evaluate(val_, options_.seed ^ 0x9e3779b97f4a7c15ull);
    if (!std::isfinite(*out.val_loss))
      throw TrainingDiverged(epoch, "distance validation loss is non-finite at epoch " + std::to_string(epoch));
  }
  return out;
}

Checkpoint DistanceTrainer::save_state() const {
  Checkpoint ckpt = model_.to_checkpoint();
  ckpt.header.set("epoch", std::to_string(epoch_));
  export_adam(*adam_, *model_.net(), ckpt);
  return ckpt;
}

void DistanceTrainer::load_state(const Checkpoint& ckpt) {
  import_module(*model_.net(), ckpt, "net.");
  import_adam(*adam_, *model_.net(), ckpt);
  epoch_ = static_cast<int>(ckpt.header.get_int("epoch"));
}

DistanceTrainResult train_distance(std::vector<PpgWindow> corpus, const DistanceConfig& config,
                                   const DistanceTrainOptions& options, std::vector<PpgWindow> val) {
  DistanceTrainer trainer(DistanceModel(config, options.seed), std::move(corpus), std::move(val), options);
  std::vector<EpochLoss> history;
  for (int e = 0; e < options.epochs; ++e) history.push_back(trainer.run_epoch());
  DistanceModel model = std::move(trainer.model());
  model.freeze();
  return {std::move(model), std::move(history)};
}

}  // namespace pulseppg
