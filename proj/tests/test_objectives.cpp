#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "avs/objectives.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace avs {
namespace {

using test::random_mask;
using test::random_tensor;

Tensor filled(Shape dims, double v) {
  Tensor t(std::move(dims));
  for (double& x : t.data()) x = v;
  return t;
}

TEST(Bce, HalfPredictionGivesLn2) {
  Tape tape;
  const auto frames = supervised_frames(Setting::ms3, 5);
  const double loss = bce(tape.constant(filled({5, 8, 8}, 0.5)), random_mask({5, 8, 8}, 1), frames).value()[0];
  EXPECT_NEAR(loss, std::log(2.0), 1e-12);
}

TEST(Bce, PerfectPredictionNearZero) {
  Tape tape;
  const Tensor y = random_mask({5, 8, 8}, 2);
  const auto frames = supervised_frames(Setting::ms3, 5);
  EXPECT_LE(bce(tape.constant(y), y, frames).value()[0], 1e-11);
}

TEST(Bce, FirstFrameMaskingMatchesSingleFrameLoss) {
  Tape tape;
  const Tensor p = random_tensor({5, 6, 6}, 3, 0.05, 0.95);
  const Tensor y = random_mask({5, 6, 6}, 4);
  const auto frames = supervised_frames(Setting::s4, 5);
  ASSERT_EQ(frames, std::vector<std::size_t>{0});
  const double masked = bce(tape.constant(p), y, frames).value()[0];
  double oracle = 0.0;
  for (std::size_t k = 0; k < 36; ++k) oracle -= y[k] * std::log(p[k]) + (1 - y[k]) * std::log(1 - p[k]);
  EXPECT_NEAR(masked, oracle / 36.0, 1e-14);
}

TEST(Bce, RejectsBadArguments) {
  Tape tape;
  Var p = tape.constant(filled({5, 4, 4}, 0.5));
  EXPECT_THROW(bce(p, Tensor({5, 4, 3}), supervised_frames(Setting::ms3, 5)), ShapeError);
  EXPECT_THROW(bce(p, Tensor({5, 4, 4}), {}), ArgumentError);
  const std::vector<std::size_t> out{7};
  EXPECT_THROW(bce(p, Tensor({5, 4, 4}), out), ArgumentError);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  const Tensor y = random_mask({3, 4, 4}, 5);
  const std::vector<std::size_t> frames{0, 2};
  const double err = grad_check([&](Tape&, auto in) { return bce(sigmoid(in[0]), y, frames); },
                                {random_tensor({3, 4, 4}, 6, -2.0, 2.0)});
  EXPECT_LE(err, 1e-6);
}

std::vector<double> softmax(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - m);
  for (double& v : e) v /= z;
  return e;
}

double kl_oracle(std::span<const double> p, std::span<const double> q) {
  const auto a = softmax(p), b = softmax(q);
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) out += a[i] * std::log(a[i] / b[i]);
  return out;
}

TEST(MaskedAverage, MatchesPixelLoop) {
  Tape tape;
  const Tensor m = random_tensor({2, 8, 8}, 7, 0.0, 1.0);
  const Tensor z = random_tensor({2, 2, 2, 3}, 8);
  const Tensor v = masked_average(tape.constant(m), tape.constant(z)).value();
  ASSERT_EQ(v.dims(), (Shape{2, 3}));
  for (std::size_t t = 0; t < 2; ++t) {
    std::vector<double> num(3, 0.0);
    double den = 0.0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const double w = m.at({t, y, x}) / 16.0;
        den += w;
        for (std::size_t c = 0; c < 3; ++c) num[c] += w * z.at({t, y / 4, x / 4, c});
      }
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(v.at({t, c}), num[c] / (den + kMaskedPoolEps), 1e-13);
  }
}

TEST(AvmAv, ZeroWhenDistributionsAgree) {
  Tape tape;
  Var m = tape.constant(random_tensor({5, 8, 8}, 9, 0.0, 1.0));
  Var z = tape.constant(random_tensor({5, 4, 4, 6}, 10));
  const Tensor target = masked_average(m, z).value();
  Tensor shifted = target;
  for (double& v : shifted.data()) v += 3.0;  // softmax is shift invariant
  const std::vector<AvmStage> stages{{1, z, tape.constant(shifted)}};
  EXPECT_NEAR(avm_av(m, stages).value()[0], 0.0, 1e-14);
}

TEST(AvmAv, EmptyMaskComparesAgainstUniform) {
  Tape tape;
  const Tensor a = random_tensor({5, 6}, 11);
  const std::vector<AvmStage> stages{{2, tape.constant(random_tensor({5, 4, 4, 6}, 12)), tape.constant(a)}};
  const double got = avm_av(tape.constant(Tensor({5, 8, 8})), stages).value()[0];
  const std::vector<double> zero(6, 0.0);
  double oracle = 0.0;
  for (std::size_t t = 0; t < 5; ++t) oracle += kl_oracle(zero, a.data().subspan(t * 6, 6));
  EXPECT_NEAR(got, oracle / 5.0, 1e-14);
}

TEST(AvmAv, NonNegativeAndMatchesOracleOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tape tape;
    const Tensor m = random_tensor({3, 8, 8}, 100 + seed, 0.0, 1.0);
    const Tensor z1 = random_tensor({3, 4, 4, 5}, 300 + seed, -3.0, 3.0);
    const Tensor z2 = random_tensor({3, 2, 2, 5}, 500 + seed, -3.0, 3.0);
    const Tensor a1 = random_tensor({3, 5}, 700 + seed, -3.0, 3.0);
    const Tensor a2 = random_tensor({3, 5}, 900 + seed, -3.0, 3.0);
    Var mv = tape.constant(m);
    const std::vector<AvmStage> stages{{1, tape.constant(z1), tape.constant(a1)}, {2, tape.constant(z2), tape.constant(a2)}};
    const double got = avm_av(mv, stages).value()[0];
    double oracle = 0.0;
    for (const auto& [z, a] : {std::pair{&z1, &a1}, std::pair{&z2, &a2}}) {
      const Tensor v = masked_average(mv, tape.constant(*z)).value();
      for (std::size_t t = 0; t < 3; ++t) oracle += kl_oracle(v.data().subspan(t * 5, 5), a->data().subspan(t * 5, 5));
    }
    EXPECT_GE(got, 0.0);
    EXPECT_NEAR(got, oracle / 6.0, 1e-12);
  }
}

TEST(AvmAv, GradientMatchesFiniteDifferences) {
  const double err = grad_check(
      [&](Tape&, auto in) {
        const std::vector<AvmStage> stages{{1, in[1], in[2]}};
        return avm_av(sigmoid(in[0]), stages);
      },
      {random_tensor({3, 4, 4}, 13), random_tensor({3, 2, 2, 4}, 14), random_tensor({3, 4}, 15)});
  EXPECT_LE(err, 1e-6);
}

std::vector<std::size_t> partner_oracle(const Tensor& a) {
  const std::size_t T = a.dim(0), d = a.dim(1);
  std::vector<std::size_t> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t u = 0; u < T; ++u) {
      if (u == t) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += std::pow(a[t * d + k] - a[u * d + k], 2);
      cand.emplace_back(s, u);
    }
    out[t] = std::min_element(cand.begin(), cand.end())->second;
  }
  return out;
}

TEST(AvmVv, PartnersMatchExhaustiveSearch) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor a = random_tensor({5, 3}, 1000 + seed);
    EXPECT_EQ(audio_partners(a), partner_oracle(a));
  }
  const Tensor two = random_tensor({2, 3}, 16);
  EXPECT_EQ(audio_partners(two), (std::vector<std::size_t>{1, 0}));
  // all frames equidistant: smallest other index wins
  EXPECT_EQ(audio_partners(Tensor({4, 2})), (std::vector<std::size_t>{1, 0, 0, 0}));
  EXPECT_THROW(audio_partners(Tensor({1, 3})), ArgumentError);
}

TEST(AvmVv, ZeroForIdenticalFrames) {
  Tape tape;
  Tensor z({4, 2, 2, 3});
  const Tensor base = random_tensor({2, 2, 3}, 17);
  for (std::size_t t = 0; t < 4; ++t) std::copy_n(base.data().begin(), 12, z.data().begin() + t * 12);
  Tensor m({4, 4, 4});
  for (double& v : m.data()) v = 0.7;
  const std::vector<AvmStage> stages{{3, tape.constant(z), tape.constant(Tensor({4, 3}))}};
  EXPECT_NEAR(avm_vv(tape.constant(m), stages, random_tensor({4, 5}, 18)).value()[0], 0.0, 1e-15);
}

TEST(AvmVv, MatchesOracleAndIsNonNegative) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tape tape;
    Var m = tape.constant(random_tensor({4, 4, 4}, 2000 + seed, 0.0, 1.0));
    Var z = tape.constant(random_tensor({4, 2, 2, 3}, 3000 + seed, -3.0, 3.0));
    const Tensor audio = random_tensor({4, 6}, 4000 + seed);
    const std::vector<AvmStage> stages{{1, z, tape.constant(Tensor({4, 3}))}};
    const double got = avm_vv(m, stages, audio).value()[0];
    const Tensor v = masked_average(m, z).value();
    const auto partner = partner_oracle(audio);
    double oracle = 0.0;
    for (std::size_t t = 0; t < 4; ++t)
      oracle += kl_oracle(v.data().subspan(t * 3, 3), v.data().subspan(partner[t] * 3, 3));
    EXPECT_GE(got, 0.0);
    EXPECT_NEAR(got, oracle / 4.0, 1e-12);
  }
}

TEST(AvmVv, GradientMatchesFiniteDifferences) {
  const Tensor audio = random_tensor({3, 4}, 19);
  const double err = grad_check(
      [&](Tape& tape, auto in) {
        const std::vector<AvmStage> stages{{1, in[1], tape.constant(Tensor({3, 4}))}};
        return avm_vv(sigmoid(in[0]), stages, audio);
      },
      {random_tensor({3, 4, 4}, 20), random_tensor({3, 2, 2, 4}, 21)});
  EXPECT_LE(err, 1e-6);
}

TEST(TotalLoss, ComposesTermsAndRespectsSetting) {
  Tape tape;
  const Tensor y = random_mask({5, 8, 8}, 22);
  Var p = tape.constant(random_tensor({5, 8, 8}, 23, 0.05, 0.95));
  const std::vector<AvmStage> stages{{1, tape.constant(random_tensor({5, 4, 4, 6}, 24)),
                                      tape.constant(random_tensor({5, 6}, 25))}};
  const Tensor audio = random_tensor({5, 16}, 26);
  const auto all = supervised_frames(Setting::ms3, 5);

  const auto off = total_loss(p, y, all, Setting::ms3, AvmVariant::av, 0.0, stages, audio);
  EXPECT_EQ(off.total, off.bce);

  const auto on = total_loss(p, y, all, Setting::ms3, AvmVariant::av, kDefaultLambda, stages, audio);
  EXPECT_GT(on.avm, 0.0);
  EXPECT_NEAR(on.total, on.bce + kDefaultLambda * on.avm, 1e-15);
  EXPECT_EQ(on.bce, bce(p, y, all).value()[0]);

  const auto vv = total_loss(p, y, all, Setting::ms3, AvmVariant::vv, kDefaultLambda, stages, audio);
  EXPECT_NEAR(vv.total, vv.bce + kDefaultLambda * vv.avm, 1e-15);

  const auto s4 = total_loss(p, y, supervised_frames(Setting::s4, 5), Setting::s4, AvmVariant::av, kDefaultLambda,
                             stages, audio);
  EXPECT_EQ(s4.lambda, 0.0);
  EXPECT_EQ(s4.avm, 0.0);
  EXPECT_EQ(s4.total, s4.bce);
}

using test::f_oracle;
using test::iou_oracle;

TEST(Metrics, IdentityAndDisjoint) {
  const Tensor g = random_mask({5, 16, 16}, 27);
  EXPECT_EQ(miou(g, g), 1.0);
  EXPECT_EQ(f_score(g, g), 1.0);
  Tensor inv = g;
  for (double& v : inv.data()) v = 1.0 - v;
  EXPECT_EQ(miou(inv, g), 0.0);
  EXPECT_EQ(f_score(inv, g), 0.0);
}

TEST(Metrics, HalfOfGroundTruth) {
  Tensor g({1, 4, 4}), p({1, 4, 4});
  for (std::size_t k = 0; k < 8; ++k) g[k] = 1.0;
  for (std::size_t k = 0; k < 4; ++k) p[k] = 1.0;
  EXPECT_DOUBLE_EQ(miou(p, g), 0.5);
  EXPECT_DOUBLE_EQ(f_score(p, g), 1.3 * 0.5 / (0.3 + 0.5));
  EXPECT_NEAR(f_score(p, g), 0.8125, 1e-15);
}

TEST(Metrics, EmptyFrameConventions) {
  const Tensor zero({1, 4, 4});
  Tensor one = filled({1, 4, 4}, 1.0);
  EXPECT_EQ(miou(zero, zero), 1.0);
  EXPECT_EQ(f_score(zero, zero), 1.0);
  EXPECT_EQ(miou(one, zero), 0.0);
  EXPECT_EQ(f_score(one, zero), 0.0);
  EXPECT_EQ(f_score(zero, one), 0.0);
}

TEST(Metrics, ThresholdIsStrict) {
  const Tensor p = filled({1, 2, 2}, 0.5);
  const Tensor g = filled({1, 2, 2}, 1.0);
  EXPECT_EQ(miou(p, g), 0.0);
  EXPECT_EQ(miou(p, g, 0.49), 1.0);
  EXPECT_THROW(miou(p, g, 1.0), ArgumentError);
}

TEST(Metrics, AgreeWithPixelOraclesOnRandomPairs) {
  std::mt19937_64 gen(28);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double dp = seed % 10 == 0 ? 0.0 : std::uniform_real_distribution<>(0, 1)(gen);
    const double dg = seed % 7 == 0 ? 0.0 : std::uniform_real_distribution<>(0, 1)(gen);
    const Tensor p = random_mask({3, 8, 8}, 5000 + seed, dp);
    const Tensor g = random_mask({3, 8, 8}, 6000 + seed, dg);
    double io = 0, fo = 0;
    for (std::size_t t = 0; t < 3; ++t) {
      io += iou_oracle(p, g, t);
      fo += f_oracle(p, g, t);
    }
    EXPECT_NEAR(miou(p, g), io / 3, 1e-12);
    EXPECT_NEAR(f_score(p, g), fo / 3, 1e-12);
    EXPECT_NEAR(miou(p, g), miou(g, p), 1e-15);
  }
}

TEST(Metrics, FrameSubsetAndPermutationInvariance) {
  const Tensor p = random_mask({5, 8, 8}, 29);
  const Tensor g = random_mask({5, 8, 8}, 30);
  const std::vector<std::size_t> first{0};
  EXPECT_NEAR(miou(p, g, 0.5, first), iou_oracle(p, g, 0), 1e-15);

  std::vector<std::size_t> order{3, 0, 4, 1, 2};
  Tensor pp({5, 8, 8}), gp({5, 8, 8});
  for (std::size_t t = 0; t < 5; ++t) {
    std::copy_n(p.data().begin() + order[t] * 64, 64, pp.data().begin() + t * 64);
    std::copy_n(g.data().begin() + order[t] * 64, 64, gp.data().begin() + t * 64);
  }
  EXPECT_NEAR(miou(pp, gp), miou(p, g), 1e-15);
  EXPECT_NEAR(f_score(pp, gp), f_score(p, g), 1e-15);
}

TEST(Metrics, SummarizeSortsAndAverages) {
  const auto r = summarize({{"b", 0.2, 0.4}, {"a", 0.6, 0.8}});
  ASSERT_EQ(r.per_video.size(), 2u);
  EXPECT_EQ(r.per_video[0].video_id, "a");
  EXPECT_NEAR(r.miou, 0.4, 1e-15);
  EXPECT_NEAR(r.fscore, 0.6, 1e-15);
  EXPECT_THROW(summarize({}), ArgumentError);
}

}  // namespace
}  // namespace avs
