#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "suitein/network.hpp"
#include "support/gradcheck.hpp"

namespace ad = suitein::ad;
namespace net = suitein::net;
using ad::BasicTensor;
using ad::Tensor;
using suitein::testing::gradcheck;
using suitein::testing::random_values;

namespace {

constexpr double kGradTolerance = 1e-3;

net::ModelConfig toy_config(std::size_t J = 2) {
  net::ModelConfig c;
  c.devices = J;
  c.window_length = 8;
  c.shallow_width = 3;
  c.mlp_hidden = 5;
  c.conv_channels = {2, 3};
  c.feature_dim = 8;
  c.regressor_hidden = 4;
  return c;
}

BasicTensor<double> random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return BasicTensor<double>(shape, random_values(ad::numel_of(shape), rng, lo, hi));
}

// Non-zero biases so the checks exercise every parameter.
std::vector<BasicTensor<double>> random_params(const net::ModelConfig& c, std::uint64_t seed) {
  auto store = net::init_params<double>(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::vector<BasicTensor<double>> out;
  for (const auto& [name, t] : store.entries()) {
    auto v = t.detach();
    if (v.rank() == 1)
      for (auto& x : v.mutable_data()) x = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    out.push_back(v);
  }
  return out;
}

template <typename T>
net::ParamStore<T> store_from(const net::ModelConfig& c, const std::vector<BasicTensor<T>>& values,
                              std::size_t offset = 0) {
  net::ParamStore<T> store;
  const auto layout = net::parameter_layout(c);
  for (std::size_t i = 0; i < layout.size(); ++i) store.add(layout[i].first, values[offset + i]);
  return store;
}

// Fixed pseudo-random projection so scalar objectives weigh outputs unevenly.
template <typename T>
BasicTensor<T> project(const BasicTensor<T>& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<T> w(x.numel());
  for (auto& v : w) v = static_cast<T>(std::uniform_real_distribution<double>(-1, 1)(rng));
  return ad::sum(ad::mul(x, BasicTensor<T>(x.shape(), w)));
}

std::vector<float> values_of(const Tensor& t) { return t.values(); }

}  // namespace

TEST(Shallow, ZeroInputZeroBiasGivesZero) {
  const auto c = toy_config(3);
  const auto p = net::init_params(c, 1);
  const auto z = net::forward_shallow(Tensor::zeros({3, 6, 8}), p, c);
  for (const auto& block : z)
    for (float v : block.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Shallow, BlockShapes) {
  auto c = toy_config(3);
  c.shallow_width = 16;
  const auto p = net::init_params(c, 1);
  const auto z = net::forward_shallow(Tensor::full({3, 6, 8}, 0.5f), p, c);
  ASSERT_EQ(z.size(), 3u);
  for (const auto& block : z) EXPECT_EQ(block.shape(), (ad::Shape{16, 8}));
  const auto zb = net::forward_shallow(Tensor::full({4, 3, 6, 8}, 0.5f), p, c);
  for (const auto& block : zb) EXPECT_EQ(block.shape(), (ad::Shape{4, 16, 8}));
  EXPECT_THROW(net::forward_shallow(Tensor::zeros({2, 6, 8}), p, c), suitein::DimensionError);
  EXPECT_THROW(net::forward_shallow(Tensor::zeros({3, 6, 9}), p, c), suitein::DimensionError);
}

TEST(Shallow, GradientMatchesFiniteDifferences) {
  const auto c = toy_config();
  std::mt19937_64 rng(3);
  auto params = random_params(c, 4);
  const auto window = random_tensor({2, 2, 6, 8}, rng);
  // Only the four mlp tensors vary; the rest of the store is unused here.
  std::vector<BasicTensor<double>> mlp(params.begin(), params.begin() + 4);
  auto r = gradcheck(
      [&](const auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        net::ParamStore<T> store;
        for (std::size_t i = 0; i < 4; ++i) store.add(net::parameter_layout(c)[i].first, in[i]);
        const auto z = net::forward_shallow(window.template cast<T>(), store, c);
        return ad::add(project(z[0], 10), project(z[1], 11));
      },
      mlp);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Extractors, DeterministicWithDimensionD) {
  const auto c = toy_config();
  const auto p = net::init_params(c, 5);
  std::mt19937_64 rng(6);
  const auto z = random_tensor({3, 8}, rng).cast<float>();
  const auto a = net::forward_shared(z, 1, p, c), b = net::forward_shared(z, 1, p, c);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.shape(), (ad::Shape{8}));
  EXPECT_EQ(net::forward_private(z, 2, p, c).shape(), (ad::Shape{8}));
  for (std::size_t L : {4u, 5u, 7u, 13u, 50u}) {
    const auto zl = random_tensor({2, 3, L}, rng).cast<float>();
    EXPECT_EQ(net::forward_shared(zl, 2, p, c).shape(), (ad::Shape{2, 8})) << "L=" << L;
  }
  EXPECT_THROW(net::forward_shared(random_tensor({3, 3}, rng).cast<float>(), 1, p, c), suitein::ConfigError);
  EXPECT_THROW(net::forward_shared(z, 3, p, c), suitein::ContractError);
  EXPECT_THROW(net::forward_shared(random_tensor({4, 8}, rng).cast<float>(), 1, p, c), suitein::DimensionError);
}

TEST(Extractors, PrivateWeightsDifferFromShared) {
  const auto p = net::init_params(toy_config(), 7);
  for (const char* part : {"conv1.w", "conv2.w", "dense.w"}) {
    EXPECT_NE(p[std::string("shared.j1.") + part].values(), p[std::string("private.j1.") + part].values());
    EXPECT_NE(p[std::string("shared.j1.") + part].values(), p[std::string("shared.j2.") + part].values());
  }
}

TEST(Extractors, GradientMatchesFiniteDifferences) {
  const auto c = toy_config();
  std::mt19937_64 rng(8);
  const auto params = random_params(c, 9);
  const auto z = random_tensor({2, 3, 8}, rng);
  for (const char* branch : {"shared", "private"}) {
    const auto layout = net::parameter_layout(c);
    std::vector<std::string> names;
    std::vector<BasicTensor<double>> inputs;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].first.rfind(net::device_prefix(branch, 2), 0) == 0) {
        names.push_back(layout[i].first);
        inputs.push_back(params[i]);
      }
    }
    inputs.push_back(z);
    auto r = gradcheck(
        [&](const auto& in) {
          using T = typename std::decay_t<decltype(in[0])>::value_type;
          net::ParamStore<T> store;
          for (std::size_t i = 0; i < names.size(); ++i) store.add(names[i], in[i]);
          auto h = std::string(branch) == "shared" ? net::forward_shared(in.back(), 2, store, c)
                                                   : net::forward_private(in.back(), 2, store, c);
          return project(h, 12);
        },
        inputs);
    EXPECT_GT(r.checked, 0u) << branch;
    EXPECT_LT(r.max_rel_error, kGradTolerance) << branch;
  }
}

TEST(Aggregate, Examples) {
  Tensor v = Tensor::vector({0.3f, -1.0f, 2.0f});
  EXPECT_EQ(net::aggregate<float>({v, v, v}).values(), v.values());
  const auto m = net::aggregate<float>({Tensor::vector({1, 0}), Tensor::vector({0, 1})});
  EXPECT_EQ(m.values(), (std::vector<float>{0.5f, 0.5f}));
  EXPECT_EQ(net::aggregate<float>({v}).values(), v.values());
  EXPECT_THROW(net::aggregate<float>({}), suitein::DegenerateInputError);
}

TEST(Regressor, ShapesDeterminismAndErrors) {
  const auto c = toy_config();
  const auto p = net::init_params(c, 10);
  std::mt19937_64 rng(11);
  const auto h = random_tensor({8}, rng).cast<float>();
  const auto a = net::regress_velocity(h, p);
  EXPECT_EQ(a.shape(), (ad::Shape{2}));
  EXPECT_EQ(a.values(), net::regress_velocity(h, p).values());
  EXPECT_EQ(net::regress_velocity(random_tensor({5, 8}, rng).cast<float>(), p).shape(), (ad::Shape{5, 2}));
  EXPECT_THROW(net::regress_velocity(random_tensor({7}, rng).cast<float>(), p), suitein::DimensionError);
}

TEST(Regressor, GradientMatchesFiniteDifferences) {
  const auto c = toy_config();
  std::mt19937_64 rng(12);
  const auto params = random_params(c, 13);
  std::vector<BasicTensor<double>> inputs(params.end() - 4, params.end());
  inputs.push_back(random_tensor({3, 8}, rng));
  const std::vector<std::string> names = {"regressor.w1", "regressor.b1", "regressor.w2", "regressor.b2"};
  auto r = gradcheck(
      [&](const auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        net::ParamStore<T> store;
        for (std::size_t i = 0; i < 4; ++i) store.add(names[i], in[i]);
        return project(net::regress_velocity(in[4], store), 14);
      },
      inputs);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Forward, BundleInvariants) {
  const auto c = toy_config(3);
  const auto p = net::init_params(c, 15);
  std::mt19937_64 rng(16);
  const auto w = random_tensor({4, 3, 6, 8}, rng, -3, 3).cast<float>();
  const auto out = net::forward(w, p, c);
  ASSERT_EQ(out.velocities.size(), 4u);
  ASSERT_EQ(out.features.shared.size(), 3u);
  ASSERT_EQ(out.features.private_.size(), 3u);
  for (std::size_t i = 0; i < out.features.aggregated.numel(); ++i) {
    double mean = 0;
    for (const auto& h : out.features.shared) mean += h.data()[i];
    EXPECT_NEAR(out.features.aggregated.data()[i], mean / 3, 1e-6);
  }
  for (const auto& v : out.velocities) {
    EXPECT_EQ(v.shape(), (ad::Shape{4, 2}));
    for (float x : v.values()) EXPECT_TRUE(std::isfinite(x));
  }
  // Batched and single-window paths agree.
  const auto single = net::forward(ad::reshape(ad::slice(w, 0, 2, 1), {3, 6, 8}), p, c);
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(single.velocities[0].data()[k], out.velocities[0].data()[4 + k], 1e-5);
  const auto pred = net::predict(w, p, c);
  EXPECT_EQ(pred.values(), out.velocities[0].values());
}

TEST(Forward, FullModelGradient) {
  const auto c = toy_config(2);
  std::mt19937_64 rng(17);
  auto inputs = random_params(c, 18);
  const std::size_t n = inputs.size();
  inputs.push_back(random_tensor({2, 2, 6, 8}, rng));
  auto r = gradcheck(
      [&](const auto& in) {
        const auto store = store_from(c, in);
        const auto out = net::forward(in[n], store, c);
        auto loss = project(out.velocities[0], 20);
        for (std::size_t j = 1; j < out.velocities.size(); ++j) loss = ad::add(loss, project(out.velocities[j], 20 + j));
        for (std::size_t j = 0; j < out.features.private_.size(); ++j)
          loss = ad::add(loss, project(out.features.private_[j], 30 + j));
        return loss;
      },
      inputs);
  EXPECT_GT(r.checked, 500u);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Forward, SingleDeviceDegradesToIdentity) {
  const auto c = toy_config(1);
  const auto p = net::init_params(c, 21);
  std::mt19937_64 rng(22);
  const auto out = net::forward(random_tensor({3, 1, 6, 8}, rng).cast<float>(), p, c);
  EXPECT_EQ(out.features.aggregated.values(), out.features.shared[0].values());
  EXPECT_EQ(out.velocities[0].values(), out.velocities[1].values());
}

TEST(Forward, RegressorIsSharedAcrossHeads) {
  const auto c = toy_config(3);
  auto p = net::init_params(c, 23);
  std::mt19937_64 rng(24);
  const auto w = random_tensor({2, 3, 6, 8}, rng).cast<float>();
  const auto before = net::forward(w, p, c);
  p.get("regressor.b2").mutable_data()[0] += 0.75f;
  const auto after = net::forward(w, p, c);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_NEAR(after.velocities[j].data()[2 * b] - before.velocities[j].data()[2 * b], 0.75, 1e-6);
      EXPECT_EQ(after.velocities[j].data()[2 * b + 1], before.velocities[j].data()[2 * b + 1]);
    }
  }
}

TEST(Forward, PermutingDevicesWithWeightsKeepsAggregate) {
  const auto c = toy_config(3);
  const auto p = net::init_params(c, 25);
  std::mt19937_64 rng(26);
  const auto w = random_tensor({3, 6, 8}, rng).cast<float>();
  const std::vector<std::size_t> perm = {2, 0, 1};  // new device k is old device perm[k]

  net::ParamStore<float> q;
  const std::size_t H = c.mlp_hidden, C = c.shallow_width;
  for (const auto& [name, t] : p.entries()) {
    auto v = t.values();
    if (name == "mlp.w1") {
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t r = 0; r < 6 * H; ++r) v[k * 6 * H + r] = t.data()[perm[k] * 6 * H + r];
    } else if (name == "mlp.w2") {
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t ch = 0; ch < C; ++ch) v[h * 3 * C + k * C + ch] = t.data()[h * 3 * C + perm[k] * C + ch];
    } else if (name == "mlp.b2") {
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t ch = 0; ch < C; ++ch) v[k * C + ch] = t.data()[perm[k] * C + ch];
    } else if (name.rfind("shared.j", 0) == 0 || name.rfind("private.j", 0) == 0) {
      const auto dot = name.find('.');
      const std::size_t k = std::stoul(name.substr(dot + 2, 1)) - 1;
      const auto src = name.substr(0, dot + 2) + std::to_string(perm[k] + 1) + name.substr(dot + 3);
      v = p[src].values();
    }
    q.add(name, Tensor(t.shape(), v));
  }
  std::vector<Tensor> blocks;
  for (std::size_t k = 0; k < 3; ++k) blocks.push_back(ad::reshape(ad::slice(w, 0, perm[k], 1), {6, 8}));
  const auto wp = ad::stack(blocks);

  const auto a = net::forward(w, p, c).features.aggregated;
  const auto b = net::forward(wp, q, c).features.aggregated;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-5);
}

TEST(Params, LayoutNamesAndInit) {
  const auto c = toy_config(2);
  const auto p = net::init_params(c, 27);
  EXPECT_NO_THROW(net::check_layout(p, c));
  EXPECT_TRUE(p.contains("mlp.w1"));
  EXPECT_TRUE(p.contains("shared.j2.dense.w"));
  EXPECT_TRUE(p.contains("private.j1.conv1.b"));
  EXPECT_TRUE(p.contains("regressor.w2"));
  for (const auto& [name, t] : p.entries()) {
    EXPECT_TRUE(t.requires_grad()) << name;
    if (t.rank() == 1) {
      for (float v : t.values()) EXPECT_EQ(v, 0.0f) << name;
    }
  }
  EXPECT_EQ(values_of(net::init_params(c, 27)["shared.j1.conv2.w"]), values_of(p["shared.j1.conv2.w"]));
  EXPECT_NE(values_of(net::init_params(c, 28)["shared.j1.conv2.w"]), values_of(p["shared.j1.conv2.w"]));
  auto bad = toy_config(2);
  bad.feature_dim = 9;
  EXPECT_THROW(net::check_layout(p, bad), suitein::CheckpointError);
}

TEST(ModelConfig, ValidationAndJson) {
  auto c = toy_config();
  c.window_length = 3;
  EXPECT_THROW(c.validate(), suitein::ConfigError);
  c = toy_config();
  c.devices = 0;
  EXPECT_THROW(c.validate(), suitein::ConfigError);
  c = toy_config();
  c.device_ids = {"phone", "watch"};
  const auto back = net::model_config_from_json(net::to_json(c));
  EXPECT_EQ(net::to_json(back), net::to_json(c));
}
