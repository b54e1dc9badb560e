#include "pulseppg/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "pulseppg/errors.hpp"

namespace pulseppg {

void PpgWindow::validate() const {
  require(!values.empty(), "window '" + id + "' is empty");
  require(values.size() == observed.size(), "window '" + id + "' mask length differs from values");
  require(rate_hz > 0.0, "window '" + id + "' has non-positive rate");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (observed[i] && !std::isfinite(values[i]))
      fail(ErrorKind::invalid_argument, "window '" + id + "' has a non-finite observed sample");
  }
}

PpgWindow make_window(std::vector<double> values, double rate_hz, std::string subject_id,
                      double start_time_s, std::string id) {
  PpgWindow w;
  w.observed.assign(values.size(), 1);
  w.values = std::move(values);
  w.rate_hz = rate_hz;
  w.subject_id = std::move(subject_id);
  w.start_time_s = start_time_s;
  w.id = std::move(id);
  return w;
}

void SubjectSeries::validate() const {
  std::vector<const Segment*> order;
  for (const auto& s : segments) {
    require(!s.values.empty(), "subject '" + subject_id + "' has an empty segment");
    require(s.rate_hz > 0.0, "subject '" + subject_id + "' has a segment with non-positive rate");
    order.push_back(&s);
  }
  std::sort(order.begin(), order.end(),
            [](const Segment* a, const Segment* b) { return a->start_time_s < b->start_time_s; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    const Segment& prev = *order[i - 1];
    const double prev_end = prev.start_time_s + static_cast<double>(prev.values.size()) / prev.rate_hz;
    if (order[i]->start_time_s < prev_end - 1e-9)
      fail(ErrorKind::invalid_argument, "subject '" + subject_id + "' has overlapping segments");
  }
}

namespace {

std::vector<double> resample_linear(std::span<const double> x, double src, double dst,
                                    std::size_t out_len) {
  std::vector<double> y(out_len);
  const double step = src / dst;
  const std::size_t last = x.size() - 1;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= last) {
      y[i] = x[last];
      continue;
    }
    const double frac = pos - static_cast<double>(lo);
    y[i] = x[lo] + frac * (x[lo + 1] - x[lo]);
  }
  return y;
}

// Rational approximation up/down of dst/src at millihertz resolution.
std::pair<long, long> rate_ratio(double src, double dst) {
  auto up = std::lround(dst * 1000.0);
  auto down = std::lround(src * 1000.0);
  const long g = std::gcd(up, down);
  return {up / g, down / g};
}

std::vector<double> resample_polyphase(std::span<const double> x, double src, double dst,
                                       std::size_t out_len) {
  const auto [up, down] = rate_ratio(src, dst);
  const long factor = std::max(up, down);
  const long half = 10 * factor;
  const double cutoff = 0.5 / static_cast<double>(factor);  // cycles per upsampled sample
  std::vector<double> taps(static_cast<std::size_t>(2 * half + 1));
  for (long k = -half; k <= half; ++k) {
    const double t = static_cast<double>(k);
    const double sinc = k == 0 ? 2.0 * cutoff
                               : std::sin(2.0 * std::numbers::pi * cutoff * t) / (std::numbers::pi * t);
    const double hamming =
        0.54 + 0.46 * std::cos(std::numbers::pi * t / static_cast<double>(half + 1));
    taps[static_cast<std::size_t>(k + half)] = sinc * hamming * static_cast<double>(up);
  }
  const long n_in = static_cast<long>(x.size());
  std::vector<double> y(out_len, 0.0);
  for (std::size_t n = 0; n < out_len; ++n) {
    const long p = static_cast<long>(n) * down;  // position on the upsampled grid
    double acc = 0.0;
    // Only upsampled positions that are multiples of `up` carry input samples.
    long first = p - half;
    long rem = ((first % up) + up) % up;
    if (rem != 0) first += up - rem;
    for (long q = first; q <= p + half; q += up) {
      const long src_idx = q / up;
      if (src_idx < 0 || src_idx >= n_in) continue;
      acc += taps[static_cast<std::size_t>(p - q + half)] * x[static_cast<std::size_t>(src_idx)];
    }
    y[n] = acc;
  }
  return y;
}

}  // namespace

std::vector<double> resample(std::span<const double> series, double src_rate_hz, double dst_rate_hz,
                             ResampleMethod method) {
  require(src_rate_hz > 0.0 && dst_rate_hz > 0.0, "resample: rates must be positive");
  require(!series.empty(), "resample: empty input");
  for (double v : series) require(std::isfinite(v), "resample: non-finite input");
  if (src_rate_hz == dst_rate_hz) return {series.begin(), series.end()};
  const auto out_len = static_cast<std::size_t>(
      std::llround(static_cast<double>(series.size()) * dst_rate_hz / src_rate_hz));
  require(out_len > 0, "resample: output would be empty");
  if (method == ResampleMethod::linear) return resample_linear(series, src_rate_hz, dst_rate_hz, out_len);
  return resample_polyphase(series, src_rate_hz, dst_rate_hz, out_len);
}

std::vector<PpgWindow> window_subject(const SubjectSeries& series, double window_s, double stride_s,
                                      double rate_hz, ResampleMethod method) {
  require(window_s > 0.0 && stride_s > 0.0, "window_subject: window and stride must be positive");
  require(rate_hz > 0.0, "window_subject: rate must be positive");
  series.validate();
  const auto win = static_cast<std::size_t>(std::llround(window_s * rate_hz));
  const auto step = static_cast<std::size_t>(std::llround(stride_s * rate_hz));
  require(win >= 1 && step >= 1, "window_subject: window or stride rounds to zero samples");

  std::vector<PpgWindow> out;
  std::size_t seg_index = 0;
  for (const auto& seg : series.segments) {
    std::vector<double> values = seg.rate_hz == rate_hz ? seg.values
                                                         : resample(seg.values, seg.rate_hz, rate_hz, method);
    for (std::size_t off = 0; off + win <= values.size(); off += step) {
      std::vector<double> chunk(values.begin() + static_cast<std::ptrdiff_t>(off),
                                values.begin() + static_cast<std::ptrdiff_t>(off + win));
      const double start = seg.start_time_s + static_cast<double>(off) / rate_hz;
      out.push_back(make_window(std::move(chunk), rate_hz, series.subject_id, start,
                                series.subject_id + "/" + std::to_string(seg_index) + "/" +
                                    std::to_string(off / step)));
      out.back().segment = seg_index;
    }
    ++seg_index;
  }
  return out;
}

ZNormStats fit_znorm(std::span<const PpgWindow> windows) {
  // Two passes for numerical stability.
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& w : windows)
    for (std::size_t i = 0; i < w.size(); ++i)
      if (w.observed[i]) {
        sum += w.values[i];
        ++n;
      }
  const std::string who = windows.empty() ? std::string{} : windows.front().subject_id;
  if (n < 2) fail(ErrorKind::degenerate_subject, "subject '" + who + "' has fewer than 2 observed samples");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& w : windows)
    for (std::size_t i = 0; i < w.size(); ++i)
      if (w.observed[i]) ss += (w.values[i] - mean) * (w.values[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0.0)) fail(ErrorKind::degenerate_subject, "subject '" + who + "' has zero variance");
  return {mean, sd};
}

void apply_znorm(PpgWindow& window, const ZNormStats& stats) {
  for (auto& v : window.values) v = (v - stats.mean) / stats.std;
}

void invert_znorm(PpgWindow& window, const ZNormStats& stats) {
  for (auto& v : window.values) v = v * stats.std + stats.mean;
}

ZNormStats znorm_subject(std::span<PpgWindow> windows, StatsSource source,
                         std::span<const std::uint8_t> fit_flags) {
  require(!windows.empty(), "znorm_subject: no windows");
  for (const auto& w : windows)
    require(w.subject_id == windows.front().subject_id, "znorm_subject: windows from several subjects");
  ZNormStats stats;
  if (source == StatsSource::all || fit_flags.empty()) {
    stats = fit_znorm(windows);
  } else {
    require(fit_flags.size() == windows.size(), "znorm_subject: fit flags misaligned with windows");
    std::vector<PpgWindow> pool;
    for (std::size_t i = 0; i < windows.size(); ++i)
      if (fit_flags[i]) pool.push_back(windows[i]);
    if (pool.empty())
      fail(ErrorKind::degenerate_subject,
           "subject '" + windows.front().subject_id + "' has no training windows to fit statistics");
    stats = fit_znorm(pool);
  }
  for (auto& w : windows) apply_znorm(w, stats);
  return stats;
}

std::vector<std::uint8_t> make_mask(std::size_t length, double rate_hz, const MaskSpec& spec) {
  require(rate_hz > 0.0 && spec.duration_s > 0.0, "make_mask: rate and duration must be positive");
  const auto run = static_cast<std::size_t>(std::llround(spec.duration_s * rate_hz));
  require(run >= 1, "make_mask: duration rounds to zero samples");
  require(run <= length, "make_mask: mask of " + std::to_string(run) + " samples exceeds length " +
                             std::to_string(length));
  std::size_t start = 0;
  if (const auto* fixed = std::get_if<FixedPlacement>(&spec.placement)) {
    require(fixed->start_index + run <= length, "make_mask: fixed placement runs past the end");
    start = fixed->start_index;
  } else {
    std::mt19937_64 rng(spec.rng_seed);
    start = std::uniform_int_distribution<std::size_t>(0, length - run)(rng);
  }
  std::vector<std::uint8_t> mask(length, 1);
  std::fill(mask.begin() + static_cast<std::ptrdiff_t>(start),
            mask.begin() + static_cast<std::ptrdiff_t>(start + run), 0);
  return mask;
}

}  // namespace pulseppg
