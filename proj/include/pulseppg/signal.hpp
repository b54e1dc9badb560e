#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace pulseppg {

// Single-channel fixed-rate window. observed[i] == 0 marks a missing sample.
struct PpgWindow {
  std::vector<double> values;
  std::vector<std::uint8_t> observed;
  double rate_hz = 50.0;
  std::string subject_id;
  double start_time_s = 0.0;
  std::string id;
  std::size_t segment = 0;  // index of the source segment within the subject

  std::size_t size() const { return values.size(); }
  // Throws invalid_argument when the invariants do not hold.
  void validate() const;
};

PpgWindow make_window(std::vector<double> values, double rate_hz, std::string subject_id = {},
                      double start_time_s = 0.0, std::string id = {});

struct Segment {
  double start_time_s = 0.0;
  double rate_hz = 50.0;
  std::vector<double> values;
};

struct SubjectSeries {
  std::string subject_id;
  std::vector<Segment> segments;

  // Segments must have at least one sample and must not overlap in time.
  void validate() const;
};

enum class ResampleMethod { linear, polyphase_fir };

// Output has round(T * dst / src) samples. Identity when the rates match.
std::vector<double> resample(std::span<const double> series, double src_rate_hz, double dst_rate_hz,
                             ResampleMethod method = ResampleMethod::linear);

// Cuts every segment into windows of round(window_s * rate_hz) samples, stepping
// by round(stride_s * rate_hz). Windows never span two segments; segments at a
// different rate are resampled first.
std::vector<PpgWindow> window_subject(const SubjectSeries& series, double window_s, double stride_s,
                                      double rate_hz,
                                      ResampleMethod method = ResampleMethod::linear);

enum class StatsSource { train_only, all };

struct ZNormStats {
  double mean = 0.0;
  double std = 1.0;  // population standard deviation
};

// Pooled statistics over the observed samples of the given windows.
ZNormStats fit_znorm(std::span<const PpgWindow> windows);
void apply_znorm(PpgWindow& window, const ZNormStats& stats);
void invert_znorm(PpgWindow& window, const ZNormStats& stats);

// Global person-specific z-normalization. With train_only, statistics come from
// the windows whose fit flag is set; every window is then normalized with them.
// All windows must belong to one subject.
ZNormStats znorm_subject(std::span<PpgWindow> windows, StatsSource source = StatsSource::train_only,
                         std::span<const std::uint8_t> fit_flags = {});

struct UniformPlacement {};
struct FixedPlacement {
  std::size_t start_index = 0;
};

struct MaskSpec {
  double duration_s = 2.0;
  std::variant<UniformPlacement, FixedPlacement> placement = UniformPlacement{};
  std::uint64_t rng_seed = 0;
};

// One contiguous run of round(duration_s * rate_hz) unobserved samples.
std::vector<std::uint8_t> make_mask(std::size_t length, double rate_hz, const MaskSpec& spec);

}  // namespace pulseppg
