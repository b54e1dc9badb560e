#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "pulseppg/checkpoint.hpp"
#include "pulseppg/config.hpp"
#include "pulseppg/dataset_io.hpp"
#include "pulseppg/errors.hpp"
#include "pulseppg/finetune.hpp"
#include "pulseppg/metrics.hpp"
#include "pulseppg/pipeline.hpp"
#include "pulseppg/probe.hpp"
#include "pulseppg/synth.hpp"

namespace fs = std::filesystem;
using namespace pulseppg;

namespace {

struct Globals {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out;
  std::vector<std::string> overrides;
  bool deterministic = false;
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config_schema: return 2;
    case ErrorKind::data_not_found: return 3;
    case ErrorKind::training_diverged: return 4;
    default: return 1;
  }
}

// Relative output paths land under PULSEPPG_OUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (const char* root = std::getenv("PULSEPPG_OUT_ROOT"); root && *root && path.is_relative()) return fs::path(root) / path;
  return path;
}

PipelineConfig load_config(const Globals& g) {
  KeyValues user;
  if (!g.config_file.empty()) user = KeyValues::load(g.config_file);
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config_schema, "override '" + o + "' is not key=value");
    user.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  if (g.seed) user.set("seed", std::to_string(*g.seed));
  return PipelineConfig::from(user);
}

void snapshot(const PipelineConfig& cfg, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  cfg.resolved().save(dir / (command + ".resolved.conf"));
}

fs::path out_dir(const Globals& g, const std::string& fallback) { return output_path(g.out.empty() ? fallback : g.out); }

PreparedData load_windows(const PipelineConfig& cfg) { return prepare_windows(read_dataset(output_path(cfg.data_dir)), cfg); }

std::vector<const PpgWindow*> pointers(const std::vector<PpgWindow>& w) {
  std::vector<const PpgWindow*> out;
  for (const auto& x : w) out.push_back(&x);
  return out;
}

void print_history(const std::string& stage, const std::vector<EpochLoss>& history) {
  for (const auto& h : history) {
    std::cout << stage << " epoch " << h.epoch << " train_loss " << h.train_loss;
    if (h.val_loss) std::cout << " val_loss " << *h.val_loss;
    std::cout << '\n';
  }
}

int cmd_gen_data(const Globals& g) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.data_dir);
  auto corpus = gen_corpus(SynthSpec::from(cfg));
  write_dataset(dir, corpus.dataset);
  snapshot(cfg, dir, "gen-data");
  std::cout << "wrote " << corpus.dataset.subjects.size() << " subjects to " << dir.string() << '\n';
  return 0;
}

int cmd_pretrain_distance(const Globals& g, const std::string& resume) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "pretrain-distance");
  auto data = load_windows(cfg);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  auto result = run_stage1(cfg, std::move(data.train), std::move(data.val), dir, from);
  print_history("distance", result.history);
  std::cout << "best epoch " << result.best_epoch << ", " << result.model.parameter_count() << " parameters\n";
  return 0;
}

fs::path distance_checkpoint(const PipelineConfig& cfg, const fs::path& dir) {
  const auto explicit_path = cfg.extra.get("stage2.distance_checkpoint");
  return explicit_path.empty() ? dir / "distance_best.ckpt" : fs::path(explicit_path);
}

int cmd_pretrain_encoder(const Globals& g) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "pretrain-encoder");
  auto distance = DistanceModel::from_checkpoint(load_checkpoint(distance_checkpoint(cfg, dir)));
  auto data = load_windows(cfg);
  auto result = run_stage2(cfg, distance, std::move(data.train), std::move(data.val), dir);
  for (const auto& e : result.history) {
    std::cout << "encoder epoch " << e.loss.epoch << " train_loss " << e.loss.train_loss;
    if (e.loss.val_loss) std::cout << " val_loss " << *e.loss.val_loss;
    std::cout << " skipped_no_sibling " << e.skipped_no_sibling << " skipped_degenerate_batch "
              << e.skipped_degenerate_batch << '\n';
  }
  std::cout << "best epoch " << result.best_epoch << (result.stopped_early ? " (early stop)" : "") << ", "
            << result.model.parameter_count() << " parameters\n";
  return 0;
}

fs::path encoder_checkpoint(const std::string& flag, const fs::path& dir) {
  return flag.empty() ? dir / "encoder_best.ckpt" : fs::path(flag);
}

int cmd_embed(const Globals& g, const std::string& encoder_flag) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "embed");
  auto encoder = EncoderModel::from_checkpoint(load_checkpoint(encoder_checkpoint(encoder_flag, output_path(cfg.checkpoint_dir))));
  auto data = load_windows(cfg);

  nlohmann::ordered_json manifest;
  std::vector<float> rows;
  std::vector<std::string> ids, subjects, splits;
  std::vector<std::size_t> segments;
  std::int64_t dim = encoder.config().embedding_dim();
  for (auto [name, windows] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}, std::pair{"test", &data.test}}) {
    if (windows->empty()) continue;
    auto e = encoder.embed(pointers(*windows)).to(torch::kFloat32).contiguous();
    rows.insert(rows.end(), e.data_ptr<float>(), e.data_ptr<float>() + e.numel());
    for (const auto& w : *windows) {
      ids.push_back(w.id);
      subjects.push_back(w.subject_id);
      segments.push_back(w.segment);
      splits.emplace_back(name);
    }
  }
  fs::create_directories(dir);
  write_f32(dir / "embeddings.f32", rows);
  manifest["count"] = ids.size();
  manifest["dim"] = dim;
  manifest["file"] = "embeddings.f32";
  manifest["window_ids"] = ids;
  manifest["subjects"] = subjects;
  manifest["segments"] = segments;
  manifest["splits"] = splits;
  write_file_atomic(dir / "embeddings.json", manifest.dump(1) + "\n");
  std::cout << "embedded " << ids.size() << " windows (" << dim << " dims) to " << (dir / "embeddings.json").string()
            << '\n';
  return 0;
}

struct EmbeddingTable {
  torch::Tensor x;
  std::vector<std::string> subjects, splits;
  std::vector<std::size_t> segments;
};

EmbeddingTable read_embeddings(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::data_not_found, "cannot open embedding manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, manifest_path.string() + ": " + e.what());
  }
  EmbeddingTable t;
  const auto count = m.at("count").get<std::int64_t>();
  const auto dim = m.at("dim").get<std::int64_t>();
  auto values = read_f32(manifest_path.parent_path() / m.at("file").get<std::string>());
  if (static_cast<std::int64_t>(values.size()) != count * dim)
    fail(ErrorKind::io, "embedding file size does not match the manifest");
  t.x = torch::from_blob(values.data(), {count, dim}, torch::kFloat32).to(torch::kFloat64).clone();
  t.subjects = m.at("subjects").get<std::vector<std::string>>();
  t.splits = m.at("splits").get<std::vector<std::string>>();
  t.segments = m.at("segments").get<std::vector<std::size_t>>();
  return t;
}

std::map<std::pair<std::string, std::size_t>, double> label_column(const Dataset& ds, SynthTask task) {
  const std::string column = task == SynthTask::hr_regression ? "bpm" : task == SynthTask::class_by_hr ? "hr_class" : "noisy";
  std::map<std::pair<std::string, std::size_t>, double> out;
  for (const auto& l : ds.labels) {
    auto it = l.values.find(column);
    if (it == l.values.end()) fail(ErrorKind::data_not_found, "labels lack column '" + column + "'");
    out[{l.subject_id, l.segment}] = it->second;
  }
  if (out.empty()) fail(ErrorKind::data_not_found, "dataset has no labels");
  return out;
}

int cmd_probe(const Globals& g, const std::string& embeddings_flag) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "probe");
  std::string path = embeddings_flag.empty() ? cfg.extra.get("eval.embeddings") : embeddings_flag;
  if (path.empty()) path = (output_path(cfg.checkpoint_dir) / "embeddings.json").string();
  auto table = read_embeddings(path);
  const auto task = synth_task_from_string(cfg.extra.get("eval.task"));
  const auto labels = label_column(read_dataset(output_path(cfg.data_dir)), task);

  std::vector<std::int64_t> tr_rows, te_rows;
  std::vector<double> tr_y, te_y;
  for (std::size_t i = 0; i < table.subjects.size(); ++i) {
    auto it = labels.find({table.subjects[i], table.segments[i]});
    if (it == labels.end()) fail(ErrorKind::data_not_found, "no label for embedding row " + std::to_string(i));
    if (table.splits[i] == "test") {
      te_rows.push_back(static_cast<std::int64_t>(i));
      te_y.push_back(it->second);
    } else {
      tr_rows.push_back(static_cast<std::int64_t>(i));
      tr_y.push_back(it->second);
    }
  }
  require(!tr_rows.empty() && !te_rows.empty(), "probe needs train/val and test rows");
  auto xtr = table.x.index_select(0, torch::tensor(tr_rows, torch::kLong));
  auto xte = table.x.index_select(0, torch::tensor(te_rows, torch::kLong));
  ProbeOptions opts;
  opts.folds = static_cast<int>(cfg.extra.get_int("eval.cv_folds"));
  opts.seed = cfg.seed;
  ProbeResult result;
  if (task == SynthTask::hr_regression) {
    result = linear_probe_regress(xtr, tr_y, xte, te_y, opts);
  } else {
    std::vector<std::int64_t> a(tr_y.begin(), tr_y.end()), b(te_y.begin(), te_y.end());
    result = linear_probe_classify(xtr, a, xte, b, opts);
  }
  result.report.name = "probe";
  result.report.save(dir / "probe.json");
  nlohmann::ordered_json grid;
  grid["best"] = result.best_params;
  grid["best_cv_score"] = result.best_cv_score;
  for (const auto& p : result.grid) grid["grid"].push_back({{"params", p.params}, {"cv_score", p.cv_score}});
  write_file_atomic(dir / "probe_grid.json", grid.dump(2) + "\n");
  std::cout << result.report.to_json();
  return 0;
}

int cmd_finetune(const Globals& g, const std::string& encoder_flag) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "finetune");
  auto encoder = EncoderModel::from_checkpoint(load_checkpoint(encoder_checkpoint(encoder_flag, output_path(cfg.checkpoint_dir))));
  auto ds = read_dataset(output_path(cfg.data_dir));
  auto task = build_task(ds.labels, prepare_windows(ds, cfg), synth_task_from_string(cfg.extra.get("eval.task")));
  auto ft = FinetuneConfig::from(cfg.extra);
  ft.seed = cfg.seed;
  auto result = finetune(encoder, task, ft);
  result.test.save(dir / "finetune.json");
  for (const auto& e : result.history)
    std::cout << "finetune epoch " << e.epoch << " train_loss " << e.train_loss << " val_score " << e.val_score << '\n';
  std::cout << result.test.to_json();
  return 0;
}

int cmd_naive(const Globals& g) {
  auto cfg = load_config(g);
  const auto dir = out_dir(g, cfg.checkpoint_dir);
  snapshot(cfg, dir, "naive");
  auto ds = read_dataset(output_path(cfg.data_dir));
  auto task = build_task(ds.labels, prepare_windows(ds, cfg), synth_task_from_string(cfg.extra.get("eval.task")));
  MetricReport report;
  if (task.kind == TaskKind::classification)
    report = naive_classification(TaskDataset::class_labels(task.train), TaskDataset::class_labels(task.test),
                                  task.num_classes);
  else
    report = naive_regression(task.train.labels, task.test.labels);
  report.save(dir / "naive.json");
  std::cout << report.to_json();
  return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& files) {
  std::vector<MetricReport> reports;
  for (const auto& f : files) reports.push_back(MetricReport::load(f));
  const auto table = comparison_table(reports);
  std::cout << table;
  if (!g.out.empty()) {
    const auto dir = output_path(g.out);
    fs::create_directories(dir);
    write_file_atomic(dir / "report.txt", table);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PPG foundation-model pre-training and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_file, "key = value config file");
  app.add_option("--seed", g.seed, "seed for every random stream");
  app.add_option("--workers", g.workers, "intra-op threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--set", g.overrides, "override a config key (key=value), repeatable");
  app.add_flag("--deterministic", g.deterministic, "single-threaded deterministic kernels");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  auto* dist = app.add_subcommand("pretrain-distance", "stage 1: train the motif distance model");
  std::string resume;
  dist->add_option("--resume", resume, "epoch checkpoint to resume from");
  auto* enc = app.add_subcommand("pretrain-encoder", "stage 2: train the encoder with the frozen distance model");
  auto* emb = app.add_subcommand("embed", "embed every window of the dataset");
  std::string encoder_flag, embeddings_flag;
  emb->add_option("--encoder", encoder_flag, "encoder checkpoint");
  auto* probe = app.add_subcommand("probe", "linear probe on frozen embeddings");
  probe->add_option("--embeddings", embeddings_flag, "embedding manifest (embeddings.json)");
  auto* ft = app.add_subcommand("finetune", "fine-tune the encoder with a task head");
  ft->add_option("--encoder", encoder_flag, "encoder checkpoint");
  auto* naive = app.add_subcommand("naive", "majority-class or train-mean baseline");
  auto* rep = app.add_subcommand("report", "render metric reports side by side");
  std::vector<std::string> report_files;
  rep->add_option("reports", report_files, "metric report files")->required();
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << to_string(ErrorKind::config_schema) << ": " << e.what() << '\n';
    return 2;
  }

  try {
    if (g.deterministic) {
      torch::set_num_threads(1);
      at::globalContext().setDeterministicAlgorithms(true, false);
    } else {
      torch::set_num_threads(g.workers);
    }
    if (gen->parsed()) return cmd_gen_data(g);
    if (dist->parsed()) return cmd_pretrain_distance(g, resume);
    if (enc->parsed()) return cmd_pretrain_encoder(g);
    if (emb->parsed()) return cmd_embed(g, encoder_flag);
    if (probe->parsed()) return cmd_probe(g, embeddings_flag);
    if (ft->parsed()) return cmd_finetune(g, encoder_flag);
    if (naive->parsed()) return cmd_naive(g);
    if (rep->parsed()) return cmd_report(g, report_files);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": epoch " << e.epoch() << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
