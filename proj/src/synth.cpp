#include "pulseppg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "pulseppg/errors.hpp"

namespace pulseppg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::pair<double, double> parse_range(const std::string& text, const std::string& key) {
  const auto parts = split_list(text);
  if (parts.size() != 2) fail(ErrorKind::config_schema, "key '" + key + "' needs two comma-separated values");
  try {
    return {std::stod(parts[0]), std::stod(parts[1])};
  } catch (const std::exception&) {
    fail(ErrorKind::config_schema, "key '" + key + "' is not numeric");
  }
}

void check_hr(double hr) {
  if (!(hr > 0.5 && hr < 3.5)) fail(ErrorKind::invalid_argument, "heart rate " + std::to_string(hr) + " Hz outside (0.5, 3.5)");
}

void check_prob(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::invalid_argument, std::string(what) + " must lie in [0, 1]");
}

}  // namespace

void SynthSpec::validate() const {
  for (auto r : {slow_hr, fast_hr}) {
    check_hr(r.first);
    check_hr(r.second);
    require(r.first <= r.second, "heart-rate range is reversed");
  }
  check_prob(noise.motion_burst_prob, "motion_burst_prob");
  check_prob(phase_jitter, "phase_jitter");
  for (double f : split) check_prob(f, "split fraction");
  require(std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9, "split fractions must sum to 1");
  require(window_s > 0 && rate_hz > 0, "window_s and rate_hz must be positive");
  require(harmonics >= 1, "need at least one harmonic");
  require(noise.gaussian_sd >= 0 && noise.motion_burst_amp >= 0 && noise.baseline_wander_amp >= 0 && high_noise_sd >= 0,
          "noise amplitudes must be non-negative");
  require(windows_per_hour >= 1, "windows_per_hour must be positive");
  require(static_cast<double>(2 * windows_per_hour - 1) * window_s <= 3600.0,
          "windows_per_hour windows do not fit in an hour");
}

SynthSpec SynthSpec::from(const PipelineConfig& config) {
  const auto& kv = config.extra;
  SynthSpec s;
  s.n_subjects = static_cast<std::size_t>(kv.get_int("synth.n_subjects"));
  s.windows_per_subject = static_cast<std::size_t>(kv.get_int("synth.windows_per_subject"));
  s.windows_per_hour = static_cast<std::size_t>(kv.get_int("synth.windows_per_hour"));
  s.isolated_windows = static_cast<std::size_t>(kv.get_int("synth.isolated_windows"));
  s.window_s = config.window_s;
  s.rate_hz = config.rate_hz;
  s.slow_hr = parse_range(kv.get("synth.slow_hr"), "synth.slow_hr");
  s.fast_hr = parse_range(kv.get("synth.fast_hr"), "synth.fast_hr");
  s.harmonics = static_cast<int>(kv.get_int("synth.harmonics"));
  s.harmonic_ratio = kv.get_double("synth.harmonic_ratio");
  s.dicrotic_amp = kv.get_double("synth.dicrotic_amp");
  s.phase_jitter = kv.get_double("synth.phase_jitter");
  s.noise.gaussian_sd = kv.get_double("synth.noise_sd");
  s.noise.motion_burst_prob = kv.get_double("synth.motion_burst_prob");
  s.noise.motion_burst_amp = kv.get_double("synth.motion_burst_amp");
  s.noise.baseline_wander_amp = kv.get_double("synth.baseline_wander_amp");
  s.high_noise_sd = kv.get_double("synth.high_noise_sd");
  const auto split = split_list(kv.get("synth.split"));
  if (split.size() != 3) fail(ErrorKind::config_schema, "synth.split needs three fractions");
  for (std::size_t i = 0; i < 3; ++i) s.split[i] = std::stod(split[i]);
  s.seed = config.seed;
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorKind::config_schema, e.what());
  }
  return s;
}

SynthTrace synth_window(double hr_hz, const SynthSpec& spec, const NoiseSpec& noise, std::uint64_t seed) {
  check_hr(hr_hz);
  const auto n = static_cast<std::size_t>(std::llround(spec.window_s * spec.rate_hz));
  require(n > 0, "synthetic window has no samples");
  std::seed_seq seq{seed, std::uint64_t{0x5e17}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double phase0 = spec.random_start_phase ? kTwoPi * unit(rng) : 0.0;
  // Phase offsets drawn per beat and interpolated linearly between beat onsets.
  const double duration = static_cast<double>(n) / spec.rate_hz;
  const auto beats = static_cast<std::size_t>(std::ceil(duration * hr_hz)) + 2;
  std::vector<double> jitter(beats, 0.0);
  if (spec.phase_jitter > 0)
    for (auto& j : jitter) j = kTwoPi * spec.phase_jitter * gauss(rng);
  const double wander_f = 0.05 + 0.15 * unit(rng);
  const double wander_phase = kTwoPi * unit(rng);

  SynthTrace out;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / spec.rate_hz;
    const double cycles = hr_hz * t;
    const auto beat = static_cast<std::size_t>(cycles);
    const double frac = cycles - static_cast<double>(beat);
    const double phase = kTwoPi * cycles + phase0 + jitter[beat] + frac * (jitter[beat + 1] - jitter[beat]);
    double x = 0.0, a = 1.0;
    for (int k = 1; k <= spec.harmonics; ++k, a *= spec.harmonic_ratio) x += a * std::sin(k * phase);
    if (spec.dicrotic_amp > 0) {
      double c = std::fmod(phase / kTwoPi, 1.0);
      if (c < 0) c += 1.0;
      x += spec.dicrotic_amp * std::exp(-(c - 0.45) * (c - 0.45) / (2 * 0.05 * 0.05));
    }
    x += noise.baseline_wander_amp * std::sin(kTwoPi * wander_f * t + wander_phase);
    v[i] = x;
  }
  if (noise.motion_burst_prob > 0 && unit(rng) < noise.motion_burst_prob) {
    out.motion_burst = true;
    const auto len = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround((1.0 + 2.0 * unit(rng)) * spec.rate_hz)));
    const auto start = static_cast<std::size_t>(unit(rng) * static_cast<double>(n - len + 1));
    for (std::size_t i = 0; i < len; ++i) {
      const double w = len > 1 ? 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(len - 1)) : 1.0;
      v[start + i] += noise.motion_burst_amp * w * gauss(rng);
    }
  }
  if (noise.gaussian_sd > 0)
    for (auto& x : v) x += noise.gaussian_sd * gauss(rng);
  out.window = make_window(std::move(v), spec.rate_hz);
  return out;
}

PpgWindow gen_window(double hr_hz, const SynthSpec& spec, std::uint64_t seed) {
  return synth_window(hr_hz, spec, spec.noise, seed).window;
}

SynthCorpus gen_corpus(const SynthSpec& spec) {
  spec.validate();
  SynthCorpus corpus;
  std::vector<std::string> ids;
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%03zu", s);
    ids.emplace_back(buf);
    SubjectTruth truth;
    truth.subject_id = buf;
    truth.hr_class = static_cast<int>(s % 2);
    truth.noisy = (s / 2) % 2 == 1;
    const auto range = truth.hr_class == 0 ? spec.slow_hr : spec.fast_hr;
    NoiseSpec noise = spec.noise;
    if (truth.noisy) noise.gaussian_sd = spec.high_noise_sd;

    // Regular windows spread over floor(windows / windows_per_hour) hours, so no hour holds a lone window.
    const std::size_t hours = std::max<std::size_t>(1, spec.windows_per_subject / spec.windows_per_hour);
    std::vector<double> starts;
    for (std::size_t h = 0; h < hours; ++h) {
      const std::size_t lo = h * spec.windows_per_subject / hours, hi = (h + 1) * spec.windows_per_subject / hours;
      const double step = 3600.0 / static_cast<double>(hi - lo);
      for (std::size_t k = 0; k < hi - lo; ++k) starts.push_back(static_cast<double>(h) * 3600.0 + static_cast<double>(k) * step);
    }
    std::size_t next_hour = hours;
    const std::size_t total = spec.windows_per_subject + spec.isolated_windows;

    SubjectSeries series;
    series.subject_id = buf;
    for (std::size_t w = 0; w < total; ++w) {
      double start;
      if (w < spec.windows_per_subject) {
        start = starts[w];
      } else {
        start = static_cast<double>(next_hour++) * 3600.0;
        truth.isolated_segments.push_back(w);
      }
      std::uniform_real_distribution<double> hr_dist(range.first, range.second);
      std::seed_seq hs{spec.seed, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(w), std::uint64_t{1}};
      std::mt19937_64 hr_rng(hs);
      const double hr = hr_dist(hr_rng);
      const std::uint64_t wseed = spec.seed * 1000003ULL + s * 10007ULL + w;
      auto trace = synth_window(hr, spec, noise, wseed);
      series.segments.push_back({start, spec.rate_hz, std::move(trace.window.values)});
      truth.hr_hz.push_back(hr);
      corpus.dataset.labels.push_back(
          {truth.subject_id, w,
           {{"hr_hz", hr}, {"bpm", 60.0 * hr}, {"hr_class", truth.hr_class}, {"noisy", truth.noisy ? 1.0 : 0.0}}});
    }
    corpus.dataset.subjects.push_back(std::move(series));
    corpus.truth.push_back(std::move(truth));
  }

  // Subject-wise split, stratified by heart-rate class.
  std::seed_seq split_seq{spec.seed, std::uint64_t{0x5b17}};
  std::mt19937_64 rng(split_seq);
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::string> members;
    for (const auto& t : corpus.truth)
      if (t.hr_class == cls) members.push_back(t.subject_id);
    std::shuffle(members.begin(), members.end(), rng);
    const auto m = members.size();
    auto n_val = static_cast<std::size_t>(std::llround(spec.split[1] * static_cast<double>(m)));
    auto n_test = static_cast<std::size_t>(std::llround(spec.split[2] * static_cast<double>(m)));
    if (spec.split[2] > 0 && n_test == 0 && m >= 2) n_test = 1;
    n_val = std::min(n_val, m - std::min(m, n_test));
    for (std::size_t i = 0; i < m; ++i) {
      auto& dst = i < n_test ? corpus.dataset.splits.test
                  : i < n_test + n_val ? corpus.dataset.splits.val
                                       : corpus.dataset.splits.train;
      dst.push_back(members[i]);
    }
  }
  for (auto* v : {&corpus.dataset.splits.train, &corpus.dataset.splits.val, &corpus.dataset.splits.test})
    std::sort(v->begin(), v->end());
  return corpus;
}

SynthTask synth_task_from_string(const std::string& s) {
  if (s == "hr_regression") return SynthTask::hr_regression;
  if (s == "class_by_hr") return SynthTask::class_by_hr;
  if (s == "class_by_noise") return SynthTask::class_by_noise;
  fail(ErrorKind::invalid_argument, "unknown task '" + s + "'");
}

std::string to_string(SynthTask task) {
  switch (task) {
    case SynthTask::hr_regression: return "hr_regression";
    case SynthTask::class_by_hr: return "class_by_hr";
    case SynthTask::class_by_noise: return "class_by_noise";
  }
  return {};
}

TaskDataset build_task(const std::vector<SegmentLabel>& labels, PreparedData data, SynthTask task) {
  std::map<std::pair<std::string, std::size_t>, const SegmentLabel*> lookup;
  for (const auto& l : labels) lookup[{l.subject_id, l.segment}] = &l;
  const std::string column = task == SynthTask::hr_regression ? "bpm"
                             : task == SynthTask::class_by_hr ? "hr_class"
                                                              : "noisy";
  TaskDataset out;
  out.name = to_string(task);
  out.kind = task == SynthTask::hr_regression ? TaskKind::regression : TaskKind::classification;
  out.num_classes = out.kind == TaskKind::classification ? 2 : 0;
  auto fill = [&](std::vector<PpgWindow>& src, TaskSplit& dst) {
    for (auto& w : src) {
      auto it = lookup.find({w.subject_id, w.segment});
      if (it == lookup.end())
        fail(ErrorKind::data_not_found, "no label for subject " + w.subject_id + " segment " + std::to_string(w.segment));
      auto v = it->second->values.find(column);
      if (v == it->second->values.end()) fail(ErrorKind::data_not_found, "labels lack column '" + column + "'");
      dst.labels.push_back(v->second);
      dst.windows.push_back(std::move(w));
    }
  };
  fill(data.train, out.train);
  fill(data.val, out.val);
  fill(data.test, out.test);
  out.validate();
  return out;
}

TaskDataset gen_task(const SynthSpec& spec, SynthTask task, bool znorm) {
  auto corpus = gen_corpus(spec);
  PipelineConfig cfg;
  cfg.window_s = spec.window_s;
  cfg.rate_hz = spec.rate_hz;
  cfg.znorm = znorm;
  cfg.znorm_stats = StatsSource::all;
  return build_task(corpus.dataset.labels, prepare_windows(corpus.dataset, cfg), task);
}

}  // namespace pulseppg
