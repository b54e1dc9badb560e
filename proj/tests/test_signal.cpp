#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "pulseppg/config.hpp"
#include "pulseppg/errors.hpp"
#include "pulseppg/signal.hpp"

using namespace pulseppg;

namespace {

std::vector<double> sine(double hz, double rate, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(2 * std::numbers::pi * hz * i / rate);
  return v;
}

// Frequency of the largest naive-DFT magnitude, DC excluded.
double peak_hz(const std::vector<double>& x, double rate) {
  const std::size_t n = x.size();
  double best = 0, best_hz = 0;
  for (std::size_t k = 1; k < n / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      re += x[t] * std::cos(2 * std::numbers::pi * k * t / n);
      im -= x[t] * std::sin(2 * std::numbers::pi * k * t / n);
    }
    const double mag = re * re + im * im;
    if (mag > best) {
      best = mag;
      best_hz = k * rate / n;
    }
  }
  return best_hz;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no exception");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("signal") {
  TEST_CASE("resample output length is round(T * dst / src)") {
    const auto x = sine(1.0, 100.0, 1000);
    CHECK(resample(x, 100.0, 50.0).size() == 500);
    CHECK(resample(x, 100.0, 64.0).size() == 640);
    CHECK(resample(x, 100.0, 33.0).size() == 330);
    CHECK(resample(x, 100.0, 50.0, ResampleMethod::polyphase_fir).size() == 500);
    const auto same = resample(x, 100.0, 100.0);
    CHECK(same == x);
  }

  TEST_CASE("resample keeps the dominant frequency") {
    for (auto method : {ResampleMethod::linear, ResampleMethod::polyphase_fir}) {
      const auto x = sine(2.0, 125.0, 1250);
      const auto y = resample(x, 125.0, 50.0, method);
      REQUIRE(y.size() == 500);
      CHECK(peak_hz(y, 50.0) == doctest::Approx(2.0).epsilon(1e-9));
    }
  }

  TEST_CASE("resample rejects bad input") {
    std::vector<double> empty;
    CHECK(kind_of([&] { resample(empty, 50, 25); }) == ErrorKind::invalid_argument);
    std::vector<double> bad{1.0, NAN, 2.0};
    CHECK(kind_of([&] { resample(bad, 50, 25); }) == ErrorKind::invalid_argument);
  }

  TEST_CASE("windows never span segments and carry the segment index") {
    SubjectSeries s{"a", {{0.0, 50.0, std::vector<double>(50 * 25, 1.0)}, {100.0, 50.0, std::vector<double>(50 * 12, 2.0)}}};
    const auto w = window_subject(s, 10.0, 10.0, 50.0);
    REQUIRE(w.size() == 3);
    CHECK(w[0].segment == 0);
    CHECK(w[1].segment == 0);
    CHECK(w[1].start_time_s == doctest::Approx(10.0));
    CHECK(w[2].segment == 1);
    CHECK(w[2].start_time_s == doctest::Approx(100.0));
    for (const auto& x : w) {
      CHECK(x.size() == 500);
      CHECK(x.subject_id == "a");
      CHECK(std::all_of(x.values.begin(), x.values.end(), [&](double v) { return v == x.values.front(); }));
    }
  }

  TEST_CASE("windowing resamples segments at another rate") {
    SubjectSeries s{"a", {{0.0, 100.0, sine(1.5, 100.0, 2000)}}};
    const auto w = window_subject(s, 10.0, 5.0, 50.0);
    REQUIRE(w.size() == 3);
    CHECK(w[0].rate_hz == 50.0);
    CHECK(w[0].size() == 500);
    CHECK(peak_hz(w[0].values, 50.0) == doctest::Approx(1.5));
  }

  TEST_CASE("overlapping segments are rejected") {
    SubjectSeries s{"a", {{0.0, 50.0, std::vector<double>(500, 0.0)}, {5.0, 50.0, std::vector<double>(500, 0.0)}}};
    CHECK_THROWS_AS(s.validate(), Error);
  }

  TEST_CASE("z-normalization worked example") {
    auto w = make_window({1, 2, 3, 4}, 50.0, "a");
    std::vector<PpgWindow> ws{w};
    const auto stats = znorm_subject(ws, StatsSource::all);
    CHECK(stats.mean == doctest::Approx(2.5));
    CHECK(stats.std == doctest::Approx(std::sqrt(1.25)));
    CHECK(ws[0].values[0] == doctest::Approx(-1.5 / std::sqrt(1.25)));
    invert_znorm(ws[0], stats);
    for (int i = 0; i < 4; ++i) CHECK(ws[0].values[i] == doctest::Approx(i + 1.0));
  }

  TEST_CASE("z-normalization uses only flagged windows with train_only") {
    std::vector<PpgWindow> ws{make_window({0, 2}, 50, "a"), make_window({100, 200}, 50, "a")};
    std::vector<std::uint8_t> flags{1, 0};
    const auto stats = znorm_subject(ws, StatsSource::train_only, flags);
    CHECK(stats.mean == doctest::Approx(1.0));
    CHECK(stats.std == doctest::Approx(1.0));
    CHECK(ws[1].values[0] == doctest::Approx(99.0));
  }

  TEST_CASE("z-normalization ignores unobserved samples") {
    auto w = make_window({1, 1000, 3}, 50, "a");
    w.observed[1] = 0;
    std::vector<PpgWindow> ws{w};
    const auto stats = znorm_subject(ws, StatsSource::all);
    CHECK(stats.mean == doctest::Approx(2.0));
    CHECK(stats.std == doctest::Approx(1.0));
  }

  TEST_CASE("constant subject is degenerate") {
    std::vector<PpgWindow> ws{make_window({3, 3, 3}, 50, "a")};
    CHECK(kind_of([&] { znorm_subject(ws, StatsSource::all); }) == ErrorKind::degenerate_subject);
  }

  TEST_CASE("mask is one contiguous gap of duration * rate samples") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto m = make_mask(500, 50.0, {2.0, UniformPlacement{}, seed});
      REQUIRE(m.size() == 500);
      CHECK(std::count(m.begin(), m.end(), 0) == 100);
      const auto first = std::find(m.begin(), m.end(), 0) - m.begin();
      for (int i = 0; i < 100; ++i) CHECK(m[first + i] == 0);
      CHECK(make_mask(500, 50.0, {2.0, UniformPlacement{}, seed}) == m);
    }
  }

  TEST_CASE("fixed mask placement") {
    const auto m = make_mask(50, 10.0, {0.5, FixedPlacement{10}, 0});
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == ((i >= 10 && i < 15) ? 0 : 1));
    CHECK_THROWS_AS(make_mask(50, 10.0, {0.5, FixedPlacement{46}, 0}), Error);
    CHECK_THROWS_AS(make_mask(50, 10.0, {6.0, UniformPlacement{}, 0}), Error);
  }

  TEST_CASE("uniform mask start covers the whole range") {
    std::vector<int> hits(11, 0);
    for (std::uint64_t seed = 0; seed < 2000; ++seed) {
      const auto m = make_mask(20, 1.0, {10.0, UniformPlacement{}, seed});
      ++hits[std::find(m.begin(), m.end(), 0) - m.begin()];
    }
    for (int h : hits) CHECK(h > 100);
  }

  TEST_CASE("window validation") {
    auto w = make_window({1, 2}, 50);
    w.observed.pop_back();
    CHECK_THROWS_AS(w.validate(), Error);
    auto v = make_window({1, NAN}, 50);
    CHECK_THROWS_AS(v.validate(), Error);
    v.observed[1] = 0;
    CHECK_NOTHROW(v.validate());
  }
}

TEST_SUITE("config") {
  TEST_CASE("key value parsing") {
    const auto kv = KeyValues::parse("# c\na = 1\n b.c= hello world # tail\nflag = true\n");
    CHECK(kv.get_int("a") == 1);
    CHECK(kv.get("b.c") == "hello world");
    CHECK(kv.get_bool("flag"));
    CHECK(KeyValues::parse(kv.dump()).entries() == kv.entries());
  }

  TEST_CASE("split_list trims") {
    CHECK(split_list(" 0.9, 1.1 ") == std::vector<std::string>{"0.9", "1.1"});
  }
}
