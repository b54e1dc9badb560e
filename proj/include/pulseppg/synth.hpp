#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pulseppg/dataset_io.hpp"
#include "pulseppg/finetune.hpp"
#include "pulseppg/pipeline.hpp"
#include "pulseppg/signal.hpp"

namespace pulseppg {

struct NoiseSpec {
  double gaussian_sd = 0.05;
  double motion_burst_prob = 0.1;  // per window
  double motion_burst_amp = 2.0;
  double baseline_wander_amp = 0.2;
};

struct SynthSpec {
  std::size_t n_subjects = 20;
  std::size_t windows_per_subject = 12;
  std::size_t windows_per_hour = 4;
  std::size_t isolated_windows = 0;  // extra windows per subject, each alone in its hour
  double window_s = 10.0;
  double rate_hz = 50.0;
  std::pair<double, double> slow_hr{0.9, 1.1};
  std::pair<double, double> fast_hr{1.9, 2.1};
  int harmonics = 3;
  double harmonic_ratio = 0.5;
  double dicrotic_amp = 0.25;
  double phase_jitter = 0.02;  // per-beat phase noise, fraction of a cycle
  bool random_start_phase = true;
  NoiseSpec noise;
  double high_noise_sd = 0.5;  // noisy subjects in class_by_noise
  std::array<double, 3> split{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;

  void validate() const;
  // synth.* keys plus window_s, rate_hz and seed of a resolved pipeline config.
  static SynthSpec from(const PipelineConfig& config);
};

struct SynthTrace {
  PpgWindow window;
  bool motion_burst = false;
};

// Harmonic pulse train at hr_hz with optional dicrotic bump, phase jitter,
// baseline wander, motion burst and white noise. Pure in (hr_hz, spec, noise, seed).
SynthTrace synth_window(double hr_hz, const SynthSpec& spec, const NoiseSpec& noise, std::uint64_t seed);
PpgWindow gen_window(double hr_hz, const SynthSpec& spec, std::uint64_t seed);

struct SubjectTruth {
  std::string subject_id;
  int hr_class = 0;  // 0 slow, 1 fast
  bool noisy = false;
  std::vector<double> hr_hz;                   // per segment
  std::vector<std::size_t> isolated_segments;  // segments with no same-hour sibling
};

struct SynthCorpus {
  Dataset dataset;  // one segment per window, labels hr_hz/bpm/hr_class/noisy
  std::vector<SubjectTruth> truth;
};

SynthCorpus gen_corpus(const SynthSpec& spec);

enum class SynthTask { hr_regression, class_by_hr, class_by_noise };
SynthTask synth_task_from_string(const std::string& s);
std::string to_string(SynthTask task);

// Attaches per-segment labels to already prepared windows.
TaskDataset build_task(const std::vector<SegmentLabel>& labels, PreparedData data, SynthTask task);
TaskDataset gen_task(const SynthSpec& spec, SynthTask task, bool znorm = true);

}  // namespace pulseppg
