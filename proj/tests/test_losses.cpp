#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "suitein/losses.hpp"
#include "support/gradcheck.hpp"
#include "support/loss_oracle.hpp"

namespace ad = suitein::ad;
namespace net = suitein::net;
namespace loss = suitein::loss;
using ad::BasicTensor;
using ad::Tensor;
using suitein::testing::Vec;

namespace {

template <typename T = float>
BasicTensor<T> vec(const Vec& v) {
  return BasicTensor<T>({v.size()}, std::vector<T>(v.begin(), v.end()));
}

Vec unit(std::size_t d, std::size_t i, double sign = 1) {
  Vec v(d, 0.0);
  v[i] = sign;
  return v;
}

net::FeatureBundle<float> bundle_of(const Vec& agg, const std::vector<Vec>& shared, const std::vector<Vec>& priv) {
  net::FeatureBundle<float> f;
  f.aggregated = vec(agg);
  for (const auto& v : shared) f.shared.push_back(vec(v));
  for (const auto& v : priv) f.private_.push_back(vec(v));
  return f;
}

// Row b of a batch of features as a plain vector.
Vec row(const Tensor& t, std::size_t b) {
  const std::size_t d = t.shape().back();
  return Vec(t.data().begin() + b * d, t.data().begin() + (b + 1) * d);
}

struct RandomBatch {
  net::FeatureBundle<float> f;
  std::size_t B, J, d;
};

RandomBatch random_batch(std::size_t B, std::size_t J, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RandomBatch r{{}, B, J, d};
  auto make = [&] {
    std::vector<float> v(B * d);
    std::normal_distribution<float> n(0, 1);
    for (auto& x : v) x = n(rng);
    return Tensor({B, d}, v);
  };
  for (std::size_t j = 0; j < J; ++j) {
    r.f.shared.push_back(make());
    r.f.private_.push_back(make());
  }
  r.f.aggregated = net::aggregate(r.f.shared);
  return r;
}

}  // namespace

TEST(VelocityLoss, Examples) {
  const auto target = vec({0.0, 0.0});
  EXPECT_EQ(loss::velocity_loss<float>({target, target, target}, target).item(), 0.0f);
  std::vector<double> per_head;
  const auto l = loss::velocity_loss<float>({vec({1.0, 0.0}), vec({0.0, 0.0})}, target, &per_head);
  EXPECT_NEAR(l.item(), 0.25, 1e-7);
  ASSERT_EQ(per_head.size(), 2u);
  EXPECT_NEAR(per_head[0], 0.5, 1e-7);
  EXPECT_EQ(per_head[1], 0.0);
  EXPECT_THROW(loss::velocity_loss<float>({vec({1.0, 0.0, 0.0})}, vec({1.0, 0.0, 0.0})), suitein::DimensionError);
}

TEST(VelocityLoss, MatchesScalarLoop) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  const std::size_t B = 5, heads = 4;
  std::vector<std::vector<float>> pred(heads, std::vector<float>(2 * B));
  std::vector<float> tgt(2 * B);
  for (auto& h : pred)
    for (auto& x : h) x = static_cast<float>(n(rng));
  for (auto& x : tgt) x = static_cast<float>(n(rng));
  std::vector<Tensor> vs;
  for (const auto& h : pred) vs.push_back(Tensor({B, 2}, h));
  const double got = loss::velocity_loss(vs, Tensor({B, 2}, tgt)).item();
  double expect = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Vec> hb;
    for (const auto& h : pred) hb.push_back({h[2 * b], h[2 * b + 1]});
    expect += suitein::testing::naive_velocity_loss(hb, {tgt[2 * b], tgt[2 * b + 1]});
  }
  EXPECT_NEAR(got, expect / B, 1e-6);
}

TEST(ContrastiveLoss, EqualSimilaritiesGiveThreeLogSeven) {
  const Vec v = {0.3, -0.2, 0.9};
  const auto f = bundle_of(v, {v, v, v}, {v, v, v});
  EXPECT_NEAR(loss::contrastive_loss(f, 0.1).item(), 3 * std::log(7.0), 1e-5);
}

TEST(ContrastiveLoss, SeparatedLogitsNearZero) {
  // Positive similarity 1 and negative similarity -1 at tau 0.1 put every
  // negative logit at -20.
  const Tensor logits = Tensor::full({6, 1}, -20.0f);
  const double per_term = loss::log1p_sum_exp(logits).data()[0];
  EXPECT_NEAR(per_term / std::log1p(6 * std::exp(-20.0)), 1.0, 1e-6);
  EXPECT_NEAR(3 * per_term, 3.7e-8, 0.05e-8);

  // A realisable neighbour: privates orthogonal to everything.
  const auto f = bundle_of(unit(5, 0), {unit(5, 0), unit(5, 0), unit(5, 0)}, {unit(5, 1), unit(5, 2), unit(5, 3)});
  EXPECT_NEAR(loss::contrastive_loss(f, 0.1).item(), 3 * std::log1p(6 * std::exp(-10.0)), 1e-8);
}

TEST(ContrastiveLoss, MatchesStraightLineFormula) {
  for (std::size_t J : {1u, 2u, 3u, 4u}) {
    auto r = random_batch(4, J, 8, 10 + J);
    for (double tau : {0.1, 0.5}) {
      const double got = loss::contrastive_loss(r.f, tau).item();
      double expect = 0;
      for (std::size_t b = 0; b < r.B; ++b) {
        std::vector<Vec> sh, pr;
        for (std::size_t j = 0; j < J; ++j) {
          sh.push_back(row(r.f.shared[j], b));
          pr.push_back(row(r.f.private_[j], b));
        }
        expect += suitein::testing::naive_contrastive_loss(row(r.f.aggregated, b), sh, pr, tau);
      }
      EXPECT_NEAR(got, expect / r.B, 1e-5 * std::max(1.0, std::abs(expect / r.B))) << "J=" << J << " tau=" << tau;
    }
  }
}

TEST(ContrastiveLoss, PositiveAndScaleInvariant) {
  auto r = random_batch(3, 3, 6, 20);
  const double base = loss::contrastive_loss(r.f, 0.1).item();
  EXPECT_GT(base, 0.0);
  auto scaled = r.f;
  scaled.private_[1] = ad::scale(r.f.private_[1], 7.5f);
  scaled.shared[2] = ad::scale(r.f.shared[2], 0.01f);
  scaled.aggregated = ad::scale(r.f.aggregated, 3.0f);
  EXPECT_NEAR(loss::contrastive_loss(scaled, 0.1).item(), base, 1e-5 * base);
  EXPECT_NEAR(loss::orthogonality_loss(scaled).item(), loss::orthogonality_loss(r.f).item(), 1e-5);
}

TEST(ContrastiveLoss, Monotonicity) {
  // Three devices in 4-D; move one vector by rotating within a plane.
  auto rotated = [](double angle) { return Vec{std::cos(angle), std::sin(angle), 0.0, 0.0}; };
  const Vec agg = unit(4, 0);
  auto eval_neg = [&](double angle) {
    // private 1 at `angle` from the aggregate: larger angle, smaller similarity.
    return loss::contrastive_loss(
               bundle_of(agg, {rotated(0.3), rotated(-0.4), rotated(0.5)}, {rotated(angle), unit(4, 2), unit(4, 3)}),
               0.1)
        .item();
  };
  EXPECT_GT(eval_neg(0.5), eval_neg(0.9));
  EXPECT_GT(eval_neg(0.9), eval_neg(1.4));
  auto eval_pos = [&](double angle) {
    return loss::contrastive_loss(
               bundle_of(agg, {rotated(angle), rotated(-0.4), rotated(0.5)}, {rotated(2.0), unit(4, 2), unit(4, 3)}),
               0.1)
        .item();
  };
  EXPECT_GT(eval_pos(1.2), eval_pos(0.8));
  EXPECT_GT(eval_pos(0.8), eval_pos(0.1));
}

TEST(ContrastiveLoss, SmallTemperatureStaysFinite) {
  auto r = random_batch(4, 3, 6, 30);
  r.f.private_[0] = r.f.aggregated;  // strong negative
  const float l = loss::contrastive_loss(r.f, 0.005).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GT(l, 100.0f);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(40);
  std::vector<BasicTensor<double>> inputs;
  for (int k = 0; k < 6; ++k)
    inputs.push_back(BasicTensor<double>({2, 5}, suitein::testing::random_values(10, rng)));
  auto r = suitein::testing::gradcheck(
      [](const auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        net::FeatureBundle<T> f;
        f.shared = {in[0], in[1], in[2]};
        f.private_ = {in[3], in[4], in[5]};
        f.aggregated = net::aggregate(f.shared);
        return ad::add(loss::contrastive_loss(f, 0.5), loss::orthogonality_loss(f));
      },
      inputs);
  EXPECT_EQ(r.checked, 60u);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(OrthogonalityLoss, Examples) {
  const auto zero = bundle_of(unit(4, 0), {unit(4, 0), unit(4, 2)}, {unit(4, 1), unit(4, 3)});
  EXPECT_NEAR(loss::orthogonality_loss(zero).item(), 0.0, 1e-7);
  const auto one = bundle_of(unit(4, 1), {unit(4, 1), unit(4, 1)}, {unit(4, 0), unit(4, 0)});
  EXPECT_NEAR(loss::orthogonality_loss(one).item(), 1.0, 1e-7);
  // Signed by default; clamped drops the negative term.
  const auto neg = bundle_of(unit(4, 1), {unit(4, 1), unit(4, 1)}, {unit(4, 0), unit(4, 0, -1)});
  EXPECT_NEAR(loss::orthogonality_loss(neg).item(), -1.0, 1e-7);
  EXPECT_NEAR(loss::orthogonality_loss(neg, true).item(), 0.0, 1e-7);
}

TEST(OrthogonalityLoss, MatchesPairwiseLoop) {
  for (bool clamped : {false, true}) {
    auto r = random_batch(5, 3, 7, 50);
    const double got = loss::orthogonality_loss(r.f, clamped).item();
    double expect = 0;
    for (std::size_t b = 0; b < r.B; ++b) {
      std::vector<Vec> sh, pr;
      for (std::size_t j = 0; j < r.J; ++j) {
        sh.push_back(row(r.f.shared[j], b));
        pr.push_back(row(r.f.private_[j], b));
      }
      expect += suitein::testing::naive_orthogonality_loss(sh, pr, clamped);
    }
    EXPECT_NEAR(got, expect / r.B, 1e-6);
  }
}

TEST(TotalLoss, Examples) {
  EXPECT_NEAR(loss::total_loss(1.0, 0.0, 0.0).total, 1.0, 1e-12);
  EXPECT_NEAR(loss::total_loss(0.0, 1.0, 2.0).total, 0.3, 1e-12);
  const auto r = loss::total_loss(0.7, 1.3, -0.4);
  const loss::LossWeights w;
  EXPECT_NEAR(r.total, w.lambda_v * r.l_vel + w.lambda_c * r.l_con + w.lambda_o * r.l_orth, 1e-6);
}

TEST(Objective, ReportMatchesTensor) {
  net::ModelConfig c;
  c.devices = 3;
  c.window_length = 8;
  c.shallow_width = 4;
  c.conv_channels = {4, 4};
  c.feature_dim = 8;
  const auto p = net::init_params(c, 60);
  std::mt19937_64 rng(61);
  const auto w = BasicTensor<double>({4, 3, 6, 8}, suitein::testing::random_values(4 * 3 * 6 * 8, rng)).cast<float>();
  const auto target = BasicTensor<double>({4, 2}, suitein::testing::random_values(8, rng)).cast<float>();
  const auto out = net::forward(w, p, c);
  const auto obj = loss::compute_objective(out, target, {});
  EXPECT_NEAR(obj.total.item(), obj.report.total, 1e-5);
  EXPECT_EQ(obj.report.per_head_vel_mse.size(), 4u);
  EXPECT_GT(obj.report.l_con, 0.0);
  const auto vel_only = loss::compute_objective(out, target, {}, {false});
  EXPECT_EQ(vel_only.report.l_con, 0.0);
  EXPECT_NEAR(vel_only.total.item(), vel_only.report.l_vel, 1e-6);
}
