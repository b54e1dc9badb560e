#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>

#include "pulseppg/checkpoint.hpp"
#include "pulseppg/encoder.hpp"
#include "pulseppg/errors.hpp"
#include "pulseppg/layers.hpp"
#include "pulseppg/motif_distance.hpp"
#include "pulseppg/relcon.hpp"

using namespace pulseppg;
namespace fs = std::filesystem;

namespace {

PpgWindow wave(double hz, std::size_t n, double rate = 50.0, std::uint64_t seed = 0, std::string subject = "a",
               double start = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.05);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(2 * std::numbers::pi * hz * i / rate) + g(rng);
  auto w = make_window(std::move(v), rate, std::move(subject), start);
  w.id = "w" + std::to_string(seed);
  return w;
}

DistanceConfig small_distance() {
  DistanceConfig c;
  c.filters = 8;
  c.groups = 2;
  c.blocks = 3;
  c.kernel_size = 5;
  c.input_kernel_size = 5;
  c.stride = 5;
  c.mask_s = 1.0;
  return c;
}

EncoderConfig toy_encoder() {
  EncoderConfig c;
  c.base_filters = 4;
  c.kernel_size = 3;
  c.nblocks = 2;
  return c;
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

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pulseppg_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("distance") {
  TEST_CASE("partial conv equals an ordinary same-padded conv on fully observed input") {
    torch::manual_seed(1);
    nn::PartialConv1d pc(3, 5, 7);
    auto x = torch::randn({2, 3, 40});
    auto mask = torch::ones({2, 40});
    auto [out, valid] = pc->forward(x, mask);
    auto ref = torch::conv1d(x, pc->weight, pc->bias, 1, 3);
    CHECK(torch::allclose(out, ref, 1e-5, 1e-6));
    CHECK(valid.min().item<float>() == 1.0f);
  }

  TEST_CASE("partial conv rescales by in-bounds over observed taps") {
    nn::PartialConv1d pc(1, 1, 3);
    {
      torch::NoGradGuard ng;
      pc->weight.fill_(1.0);
      pc->bias.zero_();
    }
    auto x = torch::tensor({1.0f, 2.0f, 3.0f, 4.0f}).view({1, 1, 4});
    auto m = torch::tensor({1.0f, 0.0f, 1.0f, 1.0f}).view({1, 4});
    auto [out, valid] = pc->forward(x, m);
    // position 0: 1 observed of 2 in-bounds taps; 1: 2 of 3; 2: 2 of 3; 3: 2 of 2
    const std::vector<float> expect{2.0f, 6.0f, 10.5f, 7.0f};
    for (int i = 0; i < 4; ++i) CHECK(out[0][0][i].item<float>() == doctest::Approx(expect[i]));

    auto hole = torch::tensor({1.0f, 0.0f, 0.0f, 0.0f}).view({1, 4});
    auto [o2, v2] = pc->forward(x, hole);
    CHECK(v2[0][3].item<float>() == 0.0f);
    CHECK(o2[0][0][3].item<float>() == 0.0f);
  }

  TEST_CASE("default network parameter count and receptive field") {
    DistanceModel m;
    CHECK(m.parameter_count() == 127617);
    CHECK(m.net()->f_q->stack->receptive_field() == 435);
  }

  TEST_CASE("features and reconstruction shapes") {
    DistanceModel m(small_distance(), 3);
    auto a = wave(1.0, 200, 50.0, 1);
    auto [f, unobserved] = m.features(a, FeatureRole::query);
    CHECK(f.size(0) == 200);
    CHECK(f.size(1) == 8);
    CHECK(unobserved.size(0) == 200);

    a.observed = make_mask(200, 50.0, {1.0, FixedPlacement{20}, 0});
    auto r = m.cross_attn_reconstruct(a, wave(1.0, 200, 50.0, 2), true);
    // stride-5 anchors 0, 5, ..., 195 minus the 10 that fall in the 50-sample gap
    CHECK(r.positions.size() == 30);
    for (auto p : r.positions) {
      CHECK(p % 5 == 0);
      CHECK(a.observed[p] == 1);
    }
    CHECK(r.reconstruction.size() == r.positions.size());
    REQUIRE(r.attention.has_value());
    CHECK(r.attention->size(0) == 40);
    CHECK(r.attention->size(1) == 40);
  }

  TEST_CASE("attention rows are distributions") {
    DistanceModel m(small_distance(), 4);
    auto c = wave(2.0, 300, 50.0, 5);
    c.observed = make_mask(300, 50.0, {1.0, FixedPlacement{100}, 0});
    auto r = m.cross_attn_reconstruct(wave(1.0, 300, 50.0, 6), c, true);
    auto att = r.attention->to(torch::kFloat64);
    CHECK(att.min().item<double>() >= 0.0);
    auto rows = att.sum(1);
    CHECK(torch::allclose(rows, torch::ones_like(rows), 1e-5, 1e-6));
  }

  TEST_CASE("reconstruction is a convex combination of candidate values") {
    DistanceModel m(small_distance(), 5);
    auto c = wave(1.4, 200, 50.0, 11);
    const PpgWindow* one[] = {&c};
    auto [x, mask] = stack_windows(one);
    torch::Tensor values;
    {
      torch::NoGradGuard ng;
      values = m.net()->keys_values(x, mask).values[0].to(torch::kFloat64);
    }
    const double lo = values.min().item<double>(), hi = values.max().item<double>();
    auto r = m.cross_attn_reconstruct(wave(1.0, 200, 50.0, 7), c);
    for (double v : r.reconstruction) {
      CHECK(v >= lo - 1e-6);
      CHECK(v <= hi + 1e-6);
    }
  }

  TEST_CASE("distance is asymmetric and self distance is not special-cased") {
    DistanceModel m(small_distance(), 6);
    m.freeze();
    auto a = wave(1.0, 200, 50.0, 8), b = wave(1.7, 200, 50.0, 9);
    CHECK(m.distance(a, b) != doctest::Approx(m.distance(b, a)));
    CHECK(m.distance(a, a) >= 0.0);
  }

  TEST_CASE("distance requires a frozen model") {
    DistanceModel m(small_distance(), 7);
    auto a = wave(1.0, 200);
    CHECK(kind_of([&] { m.distance(a, a); }) == ErrorKind::misuse);
    m.freeze();
    CHECK_NOTHROW(m.distance(a, a));
    for (const auto& p : m.net()->parameters()) CHECK_FALSE(p.requires_grad());
  }

  TEST_CASE("rate mismatch is rejected") {
    DistanceModel m(small_distance(), 8);
    m.freeze();
    CHECK(kind_of([&] { m.distance(wave(1.0, 200, 50.0), wave(1.0, 200, 64.0)); }) == ErrorKind::invalid_argument);
  }

  TEST_CASE("batched distances match pairwise calls") {
    DistanceModel m(small_distance(), 9);
    m.freeze();
    std::vector<PpgWindow> ws;
    for (int i = 0; i < 4; ++i) ws.push_back(wave(0.8 + 0.3 * i, 200, 50.0, 20 + i));
    std::vector<const PpgWindow*> ptrs;
    for (auto& w : ws) ptrs.push_back(&w);
    std::vector<DistanceModel::Query> q{{0, {1, 2, 3}}, {2, {0, 3}}};
    const auto d = m.distances(ptrs, q);
    for (std::size_t a = 0; a < q.size(); ++a)
      for (std::size_t c = 0; c < q[a].candidates.size(); ++c)
        CHECK(d[a][c] == doctest::Approx(m.distance(ws[q[a].anchor], ws[q[a].candidates[c]])).epsilon(1e-5));
  }

  TEST_CASE("checkpoint round trip preserves distances") {
    DistanceModel m(small_distance(), 10);
    m.freeze();
    const auto dir = scratch("dist_ckpt");
    save_checkpoint(dir / "d.ckpt", m.to_checkpoint());
    auto back = DistanceModel::from_checkpoint(load_checkpoint(dir / "d.ckpt"));
    back.freeze();
    CHECK(back.config().filters == 8);
    CHECK(back.config().stride == 5);
    CHECK(module_checksum(*back.net()) == module_checksum(*m.net()));
    auto a = wave(1.0, 200, 50.0, 1), b = wave(1.3, 200, 50.0, 2);
    CHECK(back.distance(a, b) == m.distance(a, b));
  }

  TEST_CASE("missing checkpoint") {
    CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "pulseppg_missing.ckpt"), Error);
  }
}

TEST_SUITE("encoder") {
  TEST_CASE("toy parameter count in closed form") {
    // stem 1*4*3+4, stem bn 8; block0 two 4->4 convs (52 each) and bn2;
    // block1 bn1, bn2, two convs and a 4x4 strided shortcut; final bn 8
    const std::int64_t expect = (12 + 4 + 8) + (52 + 8 + 52) + (8 + 52 + 8 + 52 + 16) + 8;
    EncoderModel m(toy_encoder(), 0);
    CHECK(m.parameter_count() == expect);
    CHECK(m.config().embedding_dim() == 4);
  }

  TEST_CASE("full-size encoder output width and channel schedule") {
    EncoderConfig c;
    CHECK(c.embedding_dim() == 512);
    CHECK(c.block_out_channels(0) == 128);
    CHECK(c.block_out_channels(4) == 256);
    CHECK(c.block_out_channels(11) == 512);
    CHECK(c.min_length() == 64);
  }

  TEST_CASE("too-short input is rejected") {
    EncoderModel m(EncoderConfig{}, 0);
    auto w = wave(1.0, 63);
    std::vector<const PpgWindow*> p{&w};
    CHECK(kind_of([&] { m.embed(p); }) == ErrorKind::invalid_argument);
  }

  TEST_CASE("embedding is invariant to positive affine rescaling of the input") {
    auto cfg = toy_encoder();
    cfg.nblocks = 4;
    EncoderModel m(cfg, 1);
    auto a = wave(1.2, 400, 50.0, 3);
    auto b = a;
    for (auto& v : b.values) v = 7.5 * v - 3.0;
    auto ea = m.embed(a).vector, eb = m.embed(b).vector;
    REQUIRE(ea.size() == eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) CHECK(eb[i] == doctest::Approx(ea[i]).epsilon(1e-3));
  }

  TEST_CASE("eval embedding commutes with batch permutation") {
    EncoderModel m(toy_encoder(), 2);
    std::vector<PpgWindow> ws;
    for (int i = 0; i < 5; ++i) ws.push_back(wave(0.7 + 0.4 * i, 256, 50.0, 40 + i));
    std::vector<const PpgWindow*> fwd, rev;
    for (auto& w : ws) fwd.push_back(&w);
    rev.assign(fwd.rbegin(), fwd.rend());
    auto e1 = m.embed(fwd), e2 = m.embed(rev);
    CHECK(torch::allclose(e1, e2.flip({0}), 1e-5, 1e-6));
    auto single = m.embed(ws[2]).vector;
    for (std::size_t j = 0; j < single.size(); ++j) CHECK(single[j] == doctest::Approx(e1[2][j].item<double>()).epsilon(1e-5));
  }

  TEST_CASE("mixed lengths embed separately") {
    auto cfg = toy_encoder();
    cfg.pool = Pooling::mean;
    EncoderModel m(cfg, 3);
    auto a = wave(1.0, 200), b = wave(1.0, 300, 50.0, 1);
    std::vector<const PpgWindow*> p{&a, &b};
    auto e = m.embed(p);
    CHECK(e.size(0) == 2);
    CHECK(e.size(1) == 4);
  }

  TEST_CASE("checkpoint round trip") {
    auto cfg = toy_encoder();
    cfg.pool = Pooling::mean;
    EncoderModel m(cfg, 4);
    const auto dir = scratch("enc_ckpt");
    save_checkpoint(dir / "e.ckpt", m.to_checkpoint());
    auto back = EncoderModel::from_checkpoint(load_checkpoint(dir / "e.ckpt"));
    CHECK(back.config().pool == Pooling::mean);
    auto w = wave(1.0, 200);
    CHECK(back.embed(w).vector == m.embed(w).vector);
  }

  TEST_CASE("distance checkpoint is not an encoder") {
    CHECK_THROWS_AS(EncoderModel::from_checkpoint(DistanceModel(small_distance()).to_checkpoint()), Error);
  }
}

TEST_SUITE("relcon") {
  TEST_CASE("ntxent worked example") {
    const std::vector<double> neg{0.0};
    CHECK(ntxent(1.0, neg, 1.0) == doctest::Approx(std::log1p(std::exp(-1.0))));
    CHECK(ntxent(0.5, {}, 0.1) == doctest::Approx(0.0));
    const std::vector<double> big{900.0};
    CHECK(std::isfinite(ntxent(1000.0, big, 0.1)));
    CHECK(ntxent(1000.0, big, 0.1) == doctest::Approx(std::log1p(std::exp(-1000.0))));
  }

  TEST_CASE("negatives are strictly farther") {
    const std::vector<double> d{0.5, 0.1, 0.9, 0.5};
    CHECK(build_negatives(0, d) == std::vector<std::size_t>{2});
    CHECK(build_negatives(1, d) == std::vector<std::size_t>{0, 2, 3});
    CHECK(build_negatives(2, d).empty());
  }

  TEST_CASE("relcon loss matches a hand computation with dot similarity") {
    auto anchor = torch::tensor({1.0, 0.0}, torch::kFloat64);
    auto cands = torch::tensor({1.0, 0.0, 0.0, 1.0, -1.0, 0.0}, torch::kFloat64).view({3, 2});
    const std::vector<double> d{0.1, 0.2, 0.3};
    LossConfig cfg{1.0, Similarity::dot};
    const std::vector<double> n0{0.0, -1.0}, n1{-1.0};
    const double expect = ntxent(1.0, n0, 1.0) + ntxent(0.0, n1, 1.0) + ntxent(-1.0, {}, 1.0);
    CHECK(relcon_loss(anchor, cands, d, cfg).item<double>() == doctest::Approx(expect));
  }

  TEST_CASE("loss depends on distances only through their order") {
    torch::manual_seed(5);
    for (int trial = 0; trial < 10; ++trial) {
      auto anchor = torch::randn({16}, torch::kFloat64);
      auto cands = torch::randn({7, 16}, torch::kFloat64);
      std::vector<double> d(7), d2(7);
      for (int i = 0; i < 7; ++i) {
        d[i] = 0.1 + torch::rand({1}, torch::kFloat64).item<double>();
        d2[i] = d[i] * d[i];
      }
      LossConfig cfg;
      CHECK(relcon_loss(anchor, cands, d, cfg).item<double>() ==
            doctest::Approx(relcon_loss(anchor, cands, d2, cfg).item<double>()).epsilon(1e-12));
    }
  }

  TEST_CASE("loss is invariant to a joint permutation of candidates") {
    torch::manual_seed(6);
    auto anchor = torch::randn({8}, torch::kFloat64);
    auto cands = torch::randn({6, 8}, torch::kFloat64);
    const std::vector<double> d{0.3, 0.1, 0.7, 0.2, 0.9, 0.4};
    const std::vector<std::int64_t> perm{3, 5, 0, 2, 1, 4};
    std::vector<double> dp;
    for (auto i : perm) dp.push_back(d[static_cast<std::size_t>(i)]);
    auto cp = cands.index_select(0, torch::tensor(perm));
    LossConfig cfg;
    CHECK(relcon_loss(anchor, cands, d, cfg).item<double>() ==
          doctest::Approx(relcon_loss(anchor, cp, dp, cfg).item<double>()).epsilon(1e-12));
  }

  TEST_CASE("cosine similarity ignores embedding scale") {
    auto anchor = torch::tensor({3.0, 4.0}, torch::kFloat64);
    auto cands = torch::tensor({6.0, 8.0, -4.0, 3.0}, torch::kFloat64).view({2, 2});
    auto s = embedding_similarity(anchor, cands, Similarity::cosine);
    CHECK(s[0].item<double>() == doctest::Approx(1.0));
    CHECK(s[1].item<double>() == doctest::Approx(0.0));
  }

  TEST_CASE("candidate sampling: one same-hour sibling plus every other-subject batch window") {
    std::vector<PpgWindow> corpus{wave(1, 64, 50, 0, "a", 0),    wave(1, 64, 50, 1, "a", 600),
                                  wave(1, 64, 50, 2, "a", 1200), wave(1, 64, 50, 3, "a", 7200),
                                  wave(1, 64, 50, 4, "b", 0),    wave(1, 64, 50, 5, "c", 0)};
    SubjectIndex index(corpus);
    CHECK(index.same_hour_siblings(0) == std::vector<std::size_t>{1, 2});
    CHECK(index.same_hour_siblings(3).empty());

    std::mt19937_64 rng(0);
    const std::vector<std::size_t> batch{0, 3, 4, 5};
    std::vector<int> picks(6, 0);
    for (int i = 0; i < 400; ++i) {
      auto set = sample_candidates(0, batch, index, rng);
      REQUIRE(set.has_value());
      REQUIRE(set->candidates.size() == 3);
      CHECK(set->provenance[0] == Provenance::within_subject_same_hour);
      CHECK(set->candidates[1] == 4);
      CHECK(set->candidates[2] == 5);
      CHECK(set->provenance[1] == Provenance::between_subject_batch);
      ++picks[set->candidates[0]];
    }
    CHECK(picks[1] + picks[2] == 400);
    CHECK(picks[1] > 150);
    CHECK(picks[2] > 150);

    CHECK_FALSE(sample_candidates(3, batch, index, rng).has_value());
    const std::vector<std::size_t> lonely{0, 1, 2};
    CHECK(kind_of([&] { sample_candidates(0, lonely, index, rng); }) == ErrorKind::degenerate_batch);
  }
}
