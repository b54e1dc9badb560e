#include "pulseppg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "pulseppg/errors.hpp"

namespace fs = std::filesystem;

namespace pulseppg {

const KeyValues& default_config() {
  static const KeyValues defaults = KeyValues::parse(R"(
seed = 0
window_s = 240
rate_hz = 50
znorm = true
znorm.stats = train_only
data.dir = data
checkpoint_dir = runs

stage1.epochs = 20
stage1.lr = 0.001
stage1.batch = 16
stage1.stride = 10
stage1.kernel = 15
stage1.input_kernel = 15
stage1.filters = 64
stage1.blocks = 5
stage1.groups = 8
stage1.mask_s = 2
stage1.instance_norm = true
stage1.aggregation = mean

stage2.epochs = 6
stage2.lr = 0.0001
stage2.batch = 64
stage2.patience = 2
stage2.base_filters = 128
stage2.kernel = 11
stage2.stride = 2
stage2.groups = 1
stage2.nblocks = 12
stage2.increasefilter_gap = 4
stage2.downsample_gap = 2
stage2.pool = max
stage2.tau = 0.1
stage2.similarity = cosine
stage2.distance_checkpoint =

synth.n_subjects = 20
synth.windows_per_subject = 12
synth.windows_per_hour = 4
synth.isolated_windows = 0
synth.slow_hr = 0.9,1.1
synth.fast_hr = 1.9,2.1
synth.harmonics = 3
synth.harmonic_ratio = 0.5
synth.dicrotic_amp = 0.25
synth.phase_jitter = 0.02
synth.noise_sd = 0.05
synth.high_noise_sd = 0.5
synth.motion_burst_prob = 0.1
synth.motion_burst_amp = 2
synth.baseline_wander_amp = 0.2
synth.split = 0.6,0.2,0.2

eval.task = class_by_hr
eval.cv_folds = 5
eval.embeddings =

finetune.epochs = 10
finetune.lr = 0.0001
finetune.encoder_lr = 0.0001
finetune.batch = 16
finetune.w_ce = 0.3333333333333333
finetune.w_soft_f1 = 0.3333333333333333
finetune.w_dice = 0.3333333333333333
)",
                                                            "<defaults>");
  return defaults;
}

namespace {

std::string choice(const KeyValues& kv, const std::string& key, std::initializer_list<const char*> allowed) {
  const auto& v = kv.get(key);
  for (const char* a : allowed)
    if (v == a) return v;
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : "|") + a;
  fail(ErrorKind::config_schema, "key '" + key + "' must be one of " + list + ", got '" + v + "'");
}

void positive(bool ok, const std::string& key) {
  if (!ok) fail(ErrorKind::config_schema, "key '" + key + "' must be positive");
}

}  // namespace

PipelineConfig PipelineConfig::from(const KeyValues& user) {
  KeyValues kv = default_config();
  for (const auto& [k, v] : user.entries()) {
    if (!kv.has(k)) fail(ErrorKind::config_schema, "unknown key '" + k + "'");
    kv.set(k, v);
  }

  PipelineConfig c;
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  c.window_s = kv.get_double("window_s");
  c.rate_hz = kv.get_double("rate_hz");
  positive(c.window_s > 0, "window_s");
  positive(c.rate_hz > 0, "rate_hz");
  c.znorm = kv.get_bool("znorm");
  c.znorm_stats = choice(kv, "znorm.stats", {"train_only", "all"}) == "all" ? StatsSource::all : StatsSource::train_only;
  c.data_dir = kv.get("data.dir");
  c.checkpoint_dir = kv.get("checkpoint_dir");

  c.stage1.epochs = static_cast<int>(kv.get_int("stage1.epochs"));
  c.stage1.lr = kv.get_double("stage1.lr");
  c.stage1.batch = kv.get_int("stage1.batch");
  positive(c.stage1.batch > 0, "stage1.batch");
  auto& d = c.stage1.distance;
  d.stride = kv.get_int("stage1.stride");
  d.kernel_size = kv.get_int("stage1.kernel");
  d.input_kernel_size = kv.get_int("stage1.input_kernel");
  d.filters = kv.get_int("stage1.filters");
  d.blocks = kv.get_int("stage1.blocks");
  d.groups = kv.get_int("stage1.groups");
  d.mask_s = kv.get_double("stage1.mask_s");
  d.instance_norm = kv.get_bool("stage1.instance_norm");
  d.aggregation = choice(kv, "stage1.aggregation", {"mean", "sum"}) == "mean" ? Aggregation::mean : Aggregation::sum;
  d.rate_hz = c.rate_hz;
  positive(d.stride > 0 && d.kernel_size > 0 && d.filters > 0 && d.groups > 0, "stage1 network sizes");
  if (d.filters % d.groups != 0) fail(ErrorKind::config_schema, "stage1.filters must be divisible by stage1.groups");

  c.stage2.epochs = static_cast<int>(kv.get_int("stage2.epochs"));
  c.stage2.lr = kv.get_double("stage2.lr");
  c.stage2.batch = kv.get_int("stage2.batch");
  c.stage2.patience = static_cast<int>(kv.get_int("stage2.patience"));
  positive(c.stage2.batch > 1, "stage2.batch");
  auto& e = c.stage2.encoder;
  e.base_filters = kv.get_int("stage2.base_filters");
  e.kernel_size = kv.get_int("stage2.kernel");
  e.stride = kv.get_int("stage2.stride");
  e.groups = kv.get_int("stage2.groups");
  e.nblocks = kv.get_int("stage2.nblocks");
  e.increasefilter_gap = kv.get_int("stage2.increasefilter_gap");
  e.downsample_gap = kv.get_int("stage2.downsample_gap");
  e.pool = choice(kv, "stage2.pool", {"max", "mean"}) == "max" ? Pooling::max : Pooling::mean;
  positive(e.base_filters > 0 && e.kernel_size > 0 && e.stride > 0 && e.groups > 0, "stage2 network sizes");
  c.stage2.loss.temperature = kv.get_double("stage2.tau");
  positive(c.stage2.loss.temperature > 0, "stage2.tau");
  c.stage2.loss.similarity =
      choice(kv, "stage2.similarity", {"cosine", "dot"}) == "cosine" ? Similarity::cosine : Similarity::dot;

  choice(kv, "eval.task", {"class_by_hr", "hr_regression", "class_by_noise"});
  for (const auto& [k, v] : kv.entries())
    if (k.rfind("synth.", 0) == 0 || k.rfind("eval.", 0) == 0 || k.rfind("finetune.", 0) == 0 ||
        k == "stage2.distance_checkpoint")
      c.extra.set(k, v);
  return c;
}

KeyValues PipelineConfig::resolved() const {
  KeyValues kv = extra;
  kv.set("seed", std::to_string(seed));
  std::ostringstream w;
  w.precision(17);
  w << window_s;
  kv.set("window_s", w.str());
  std::ostringstream r;
  r.precision(17);
  r << rate_hz;
  kv.set("rate_hz", r.str());
  kv.set("znorm", znorm ? "true" : "false");
  kv.set("znorm.stats", znorm_stats == StatsSource::all ? "all" : "train_only");
  kv.set("data.dir", data_dir);
  kv.set("checkpoint_dir", checkpoint_dir);

  KeyValues dist;
  stage1.distance.write(dist, "");
  kv.set("stage1.epochs", std::to_string(stage1.epochs));
  kv.set("stage1.lr", std::to_string(stage1.lr));
  kv.set("stage1.batch", std::to_string(stage1.batch));
  kv.set("stage1.stride", dist.get("stride"));
  kv.set("stage1.kernel", dist.get("kernel"));
  kv.set("stage1.input_kernel", dist.get("input_kernel"));
  kv.set("stage1.filters", dist.get("filters"));
  kv.set("stage1.blocks", dist.get("blocks"));
  kv.set("stage1.groups", dist.get("groups"));
  kv.set("stage1.mask_s", dist.get("mask_s"));
  kv.set("stage1.instance_norm", dist.get("instance_norm"));
  kv.set("stage1.aggregation", dist.get("aggregation"));

  KeyValues enc;
  stage2.encoder.write(enc, "");
  kv.set("stage2.epochs", std::to_string(stage2.epochs));
  kv.set("stage2.lr", std::to_string(stage2.lr));
  kv.set("stage2.batch", std::to_string(stage2.batch));
  kv.set("stage2.patience", std::to_string(stage2.patience));
  for (const auto& [k, v] : enc.entries()) kv.set("stage2." + k, v);
  kv.set("stage2.tau", std::to_string(stage2.loss.temperature));
  kv.set("stage2.similarity", stage2.loss.similarity == Similarity::cosine ? "cosine" : "dot");
  return kv;
}

PreparedData prepare_windows(const Dataset& dataset, const PipelineConfig& config) {
  PreparedData out;
  for (const auto& subject : dataset.subjects) {
    const auto split = dataset.splits.split_of(subject.subject_id);
    if (split.empty()) continue;
    auto windows = window_subject(subject, config.window_s, config.window_s, config.rate_hz);
    if (windows.empty()) continue;
    // Subjects never straddle splits, so each subject's statistics come from its own windows.
    if (config.znorm) znorm_subject(windows, config.znorm_stats);
    auto& dst = split == "train" ? out.train : split == "val" ? out.val : out.test;
    std::move(windows.begin(), windows.end(), std::back_inserter(dst));
  }
  return out;
}

void write_loss_csv(const fs::path& file, const std::vector<EpochLoss>& history) {
  std::ostringstream csv;
  csv.precision(9);
  csv << "epoch,train_loss,val_loss\n";
  for (const auto& h : history) {
    csv << h.epoch << ',' << h.train_loss << ',';
    if (h.val_loss) csv << *h.val_loss;
    csv << '\n';
  }
  write_file_atomic(file, csv.str());
}

namespace {

double selection_loss(const EpochLoss& e) { return e.val_loss.value_or(e.train_loss); }

}  // namespace

Stage1Result run_stage1(const PipelineConfig& config, std::vector<PpgWindow> train, std::vector<PpgWindow> val,
                        const fs::path& out_dir, const std::optional<fs::path>& resume) {
  require(!train.empty(), "stage 1: empty training corpus");
  fs::create_directories(out_dir);
  DistanceTrainOptions opts;
  opts.epochs = config.stage1.epochs;
  opts.lr = config.stage1.lr;
  opts.batch_size = config.stage1.batch;
  opts.seed = config.seed;
  DistanceTrainer trainer(DistanceModel(config.stage1.distance, config.seed), std::move(train), std::move(val), opts);

  std::vector<EpochLoss> history;
  if (resume) {
    const auto ckpt = load_checkpoint(*resume);
    trainer.load_state(ckpt);
    // Earlier epochs come from the loss curve written next to the checkpoint, when present.
    const auto csv = resume->parent_path() / "distance_loss.csv";
    if (fs::exists(csv)) {
      std::ifstream in(csv);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto cells = split_list(line + ",");
        if (cells.size() < 2) continue;
        EpochLoss e;
        e.epoch = std::stoi(cells[0]);
        if (e.epoch > trainer.epochs_done()) break;
        e.train_loss = std::stod(cells[1]);
        if (cells.size() > 2) e.val_loss = std::stod(cells[2]);
        history.push_back(e);
      }
    }
  }

  Checkpoint best = trainer.model().to_checkpoint();
  int best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (const auto& h : history)
    if (selection_loss(h) < best_loss) {
      best_loss = selection_loss(h);
      best_epoch = h.epoch;
    }
  if (best_epoch > 0 && fs::exists(out_dir / "distance_best.ckpt")) best = load_checkpoint(out_dir / "distance_best.ckpt");

  while (trainer.epochs_done() < config.stage1.epochs) {
    const auto e = trainer.run_epoch();
    history.push_back(e);
    save_checkpoint(out_dir / ("distance_epoch_" + std::to_string(e.epoch) + ".ckpt"), trainer.save_state());
    if (selection_loss(e) < best_loss) {
      best_loss = selection_loss(e);
      best_epoch = e.epoch;
      best = trainer.model().to_checkpoint();
      save_checkpoint(out_dir / "distance_best.ckpt", best);
    }
    write_loss_csv(out_dir / "distance_loss.csv", history);
  }
  if (best_epoch == 0) save_checkpoint(out_dir / "distance_best.ckpt", best);
  return {DistanceModel::from_checkpoint(best), std::move(history), best_epoch};
}

RelconTrainer::RelconTrainer(EncoderModel encoder, const DistanceModel& distance, std::vector<PpgWindow> train,
                             std::vector<PpgWindow> val, Stage2Options options)
    : encoder_(std::move(encoder)),
      distance_(&distance),
      train_(std::move(train)),
      val_(std::move(val)),
      train_index_(train_),
      options_(options) {
  if (!distance.frozen()) fail(ErrorKind::misuse, "stage 2 requires a frozen distance model");
  require(!train_.empty(), "stage 2: empty training corpus");
  require(options_.batch >= 2, "stage 2: batch must hold at least two windows");
  adam_ = std::make_unique<torch::optim::Adam>(
      encoder_.net()->parameters(), torch::optim::AdamOptions(options_.lr).betas({0.9, 0.999}).weight_decay(0.0));
}

std::vector<std::size_t> RelconTrainer::batch_order(const std::vector<PpgWindow>& windows, std::mt19937_64& rng) {
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < windows.size(); ++i) by_subject[windows[i].subject_id].push_back(i);
  std::vector<std::vector<std::size_t>> queues;
  for (auto& [s, idx] : by_subject) {
    std::shuffle(idx.begin(), idx.end(), rng);
    queues.push_back(idx);
  }
  std::shuffle(queues.begin(), queues.end(), rng);
  std::vector<std::size_t> order;
  order.reserve(windows.size());
  for (std::size_t round = 0; order.size() < windows.size(); ++round)
    for (const auto& q : queues)
      if (round < q.size()) order.push_back(q[round]);
  return order;
}

RelconTrainer::StepResult RelconTrainer::batch_loss(const std::vector<PpgWindow>& corpus, const SubjectIndex& index,
                                                    std::span<const std::size_t> batch, std::mt19937_64& rng,
                                                    bool training) const {
  StepResult step;
  std::vector<CandidateSet> sets;
  for (auto anchor : batch) {
    try {
      auto set = sample_candidates(anchor, batch, index, rng);
      if (set)
        sets.push_back(std::move(*set));
      else
        ++step.skipped_no_sibling;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::degenerate_batch) throw;
      step.skipped_degenerate_batch = batch.size();
      step.skipped_no_sibling = 0;
      return step;
    }
  }
  if (sets.empty()) return step;

  // Local table of every window this step touches.
  std::vector<std::size_t> local_to_corpus;
  std::map<std::size_t, std::size_t> corpus_to_local;
  auto local = [&](std::size_t c) {
    auto [it, inserted] = corpus_to_local.emplace(c, local_to_corpus.size());
    if (inserted) local_to_corpus.push_back(c);
    return it->second;
  };
  std::vector<DistanceModel::Query> queries;
  for (const auto& set : sets) {
    DistanceModel::Query q;
    q.anchor = local(set.anchor);
    for (auto c : set.candidates) q.candidates.push_back(local(c));
    queries.push_back(std::move(q));
  }
  std::vector<const PpgWindow*> windows;
  for (auto c : local_to_corpus) windows.push_back(&corpus[c]);
  const auto dists = distance_->distances(windows, queries);

  auto& net = *encoder_.net().ptr();
  training ? net.train() : net.eval();
  auto [x, mask] = stack_windows(windows, net.parameters().front().scalar_type());
  for (const auto* w : windows) encoder_.check_length(w->size());
  auto emb = net.forward(x);

  torch::Tensor total;
  for (std::size_t a = 0; a < sets.size(); ++a) {
    std::vector<std::int64_t> cidx(queries[a].candidates.begin(), queries[a].candidates.end());
    auto l = relcon_loss(emb[static_cast<std::int64_t>(queries[a].anchor)],
                         emb.index_select(0, torch::tensor(cidx, torch::kLong)), dists[a], options_.loss);
    total = total.defined() ? total + l : l;
  }
  step.anchors_used = sets.size();
  step.loss = total / static_cast<double>(sets.size());
  return step;
}

Stage2Epoch RelconTrainer::run_epoch() {
  const int epoch = epoch_ + 1;
  std::seed_seq seq{options_.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x2e1c}};
  std::mt19937_64 rng(seq);
  const auto order = batch_order(train_, rng);

  Stage2Epoch out;
  out.loss.epoch = epoch;
  double total = 0.0;
  std::size_t weight = 0;
  const auto bsz = static_cast<std::size_t>(options_.batch);
  for (std::size_t begin = 0; begin < order.size(); begin += bsz) {
    const std::span<const std::size_t> batch(order.data() + begin, std::min(bsz, order.size() - begin));
    auto step = batch_loss(train_, train_index_, batch, rng, /*training=*/true);
    out.skipped_no_sibling += step.skipped_no_sibling;
    out.skipped_degenerate_batch += step.skipped_degenerate_batch;
    out.anchors_used += step.anchors_used;
    if (!step.loss) continue;
    const double value = step.loss->item<double>();
    if (!std::isfinite(value))
      throw TrainingDiverged(epoch, "stage 2 diverged at epoch " + std::to_string(epoch));
    adam_->zero_grad();
    step.loss->backward();
    adam_->step();
    total += value * static_cast<double>(step.anchors_used);
    weight += step.anchors_used;
  }
  out.loss.train_loss = weight ? total / static_cast<double>(weight) : 0.0;
  if (!val_.empty()) {
    std::seed_seq vseq{options_.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x7a1}};
    std::mt19937_64 vrng(vseq);
    out.loss.val_loss = evaluate(val_, vrng()).loss.train_loss;
  }
  epoch_ = epoch;
  return out;
}

Stage2Epoch RelconTrainer::evaluate(const std::vector<PpgWindow>& windows, std::uint64_t seed) const {
  torch::NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  const SubjectIndex index(windows);
  const auto order = batch_order(windows, rng);
  Stage2Epoch out;
  double total = 0.0;
  const auto bsz = static_cast<std::size_t>(options_.batch);
  for (std::size_t begin = 0; begin < order.size(); begin += bsz) {
    const std::span<const std::size_t> batch(order.data() + begin, std::min(bsz, order.size() - begin));
    auto step = batch_loss(windows, index, batch, rng, /*training=*/false);
    out.skipped_no_sibling += step.skipped_no_sibling;
    out.skipped_degenerate_batch += step.skipped_degenerate_batch;
    out.anchors_used += step.anchors_used;
    if (step.loss) total += step.loss->item<double>() * static_cast<double>(step.anchors_used);
  }
  encoder_.net().ptr()->train();
  out.loss.train_loss = out.anchors_used ? total / static_cast<double>(out.anchors_used) : 0.0;
  return out;
}

Checkpoint RelconTrainer::save_state() const {
  Checkpoint ckpt = encoder_.to_checkpoint();
  ckpt.header.set("epoch", std::to_string(epoch_));
  export_adam(*adam_, *encoder_.net().ptr(), ckpt);
  return ckpt;
}

void RelconTrainer::load_state(const Checkpoint& ckpt) {
  import_module(*encoder_.net().ptr(), ckpt, "net.");
  import_adam(*adam_, *encoder_.net().ptr(), ckpt);
  epoch_ = static_cast<int>(ckpt.header.get_int("epoch"));
}

Stage2Result run_stage2(const PipelineConfig& config, const DistanceModel& distance, std::vector<PpgWindow> train,
                        std::vector<PpgWindow> val, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  Stage2Options opts;
  opts.epochs = config.stage2.epochs;
  opts.lr = config.stage2.lr;
  opts.batch = config.stage2.batch;
  opts.loss = config.stage2.loss;
  opts.seed = config.seed;
  RelconTrainer trainer(EncoderModel(config.stage2.encoder, config.seed), distance, std::move(train), std::move(val),
                        opts);

  Stage2Result result{EncoderModel(config.stage2.encoder, config.seed), {}, 0, false};
  Checkpoint best = trainer.encoder().to_checkpoint();
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<EpochLoss> curve;
  for (int e = 0; e < config.stage2.epochs; ++e) {
    auto epoch = trainer.run_epoch();
    result.history.push_back(epoch);
    curve.push_back(epoch.loss);
    save_checkpoint(out_dir / ("encoder_epoch_" + std::to_string(epoch.loss.epoch) + ".ckpt"), trainer.save_state());
    write_loss_csv(out_dir / "encoder_loss.csv", curve);
    const double loss = selection_loss(epoch.loss);
    if (loss < best_loss) {
      best_loss = loss;
      result.best_epoch = epoch.loss.epoch;
      best = trainer.encoder().to_checkpoint();
      save_checkpoint(out_dir / "encoder_best.ckpt", best);
      since_best = 0;
    } else if (++since_best >= config.stage2.patience) {
      result.stopped_early = true;
      break;
    }
  }
  if (result.best_epoch == 0) save_checkpoint(out_dir / "encoder_best.ckpt", best);
  result.model = EncoderModel::from_checkpoint(best);
  return result;
}

}  // namespace pulseppg
