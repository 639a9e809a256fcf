#pragma once

// Training objectives: multi-head velocity MSE, an InfoNCE-style contrastive
// loss separating shared from private features, and an orthogonality
// penalty. Every loss is computed per window and averaged over the batch.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/errors.hpp"
#include "suitein/network.hpp"
#include "suitein/tensor.hpp"

namespace suitein::loss {

using ad::BasicTensor;

struct LossWeights {
  double lambda_v = 1.0;
  double lambda_c = 0.2;
  double lambda_o = 0.05;
  double tau = 0.1;
  bool clamped_orthogonality = false;

  void validate() const {
    if (lambda_v < 0 || lambda_c < 0 || lambda_o < 0) throw ConfigError("loss weights must be non-negative");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
  }
};

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda_v", w.lambda_v},
          {"lambda_c", w.lambda_c},
          {"lambda_o", w.lambda_o},
          {"tau", w.tau},
          {"orthogonality", w.clamped_orthogonality ? "clamped" : "literal"}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  try {
    w.lambda_v = j.value("lambda_v", w.lambda_v);
    w.lambda_c = j.value("lambda_c", w.lambda_c);
    w.lambda_o = j.value("lambda_o", w.lambda_o);
    w.tau = j.value("tau", w.tau);
    const auto mode = j.value("orthogonality", std::string("literal"));
    if (mode != "literal" && mode != "clamped") throw ConfigError("orthogonality must be 'literal' or 'clamped'");
    w.clamped_orthogonality = mode == "clamped";
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid loss weights: ") + e.what());
  }
  w.validate();
  return w;
}

struct LossReport {
  double l_vel = 0, l_con = 0, l_orth = 0, total = 0;
  std::vector<double> per_head_vel_mse;
  bool orthogonality_clamped = false;
};

/// Weighted combination of already computed loss values.
inline LossReport total_loss(double l_vel, double l_con, double l_orth, const LossWeights& w = {}) {
  LossReport r;
  r.l_vel = l_vel;
  r.l_con = l_con;
  r.l_orth = l_orth;
  r.total = w.lambda_v * l_vel + w.lambda_c * l_con + w.lambda_o * l_orth;
  r.orthogonality_clamped = w.clamped_orthogonality;
  return r;
}

// ---------------------------------------------------------------------------

/// Mean squared error of every head against the target, averaged over heads.
/// Predictions and target are [B x 2] (or [2]). per_head receives each
/// head's MSE when given.
template <typename T>
BasicTensor<T> velocity_loss(const std::vector<BasicTensor<T>>& velocities, const BasicTensor<T>& target,
                             std::vector<double>* per_head = nullptr) {
  if (velocities.empty()) throw DegenerateInputError("velocity_loss: no predictions");
  BasicTensor<T> acc;
  if (per_head) per_head->clear();
  for (std::size_t j = 0; j < velocities.size(); ++j) {
    if (velocities[j].shape() != target.shape() || target.shape().back() != 2) {
      throw DimensionError("velocity_loss: head " + std::to_string(j) + " has shape " +
                           ad::to_string(velocities[j].shape()) + ", target " + ad::to_string(target.shape()));
    }
    const auto diff = ad::sub(velocities[j], target);
    const auto mse = ad::mean(ad::mul(diff, diff));
    if (per_head) per_head->push_back(mse.item());
    acc = j == 0 ? mse : ad::add(acc, mse);
  }
  return ad::scale(acc, T(1) / static_cast<T>(velocities.size()));
}

/// log(1 + sum_n exp(a_n)) over the leading axis of a [N x ...] tensor,
/// evaluated with a max shift so large logits do not overflow.
template <typename T>
BasicTensor<T> log1p_sum_exp(const BasicTensor<T>& a) {
  if (a.rank() == 0) throw DimensionError("log1p_sum_exp: needs a leading axis");
  const std::size_t n = a.extent(0);
  const std::size_t cols = a.numel() / n;
  ad::Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<T> out(cols);
  auto weights = std::make_shared<std::vector<T>>(a.numel());
  for (std::size_t c = 0; c < cols; ++c) {
    T m = T(0);
    for (std::size_t k = 0; k < n; ++k) m = std::max(m, a.data()[k * cols + c]);
    T s = T(0);
    for (std::size_t k = 0; k < n; ++k) s += std::exp(a.data()[k * cols + c] - m);
    const T zero_term = std::exp(-m);
    out[c] = m == T(0) ? std::log1p(s) : m + std::log(zero_term + s);
    for (std::size_t k = 0; k < n; ++k) (*weights)[k * cols + c] = std::exp(a.data()[k * cols + c] - m) / (zero_term + s);
  }
  return ad::detail::make_result<T>(std::move(out_shape), std::move(out), {a}, "log1p_sum_exp",
                                    [weights, n, cols](ad::Node<T>& self) {
                                      auto& g = self.parents[0]->grad_buffer();
                                      for (std::size_t k = 0; k < n; ++k)
                                        for (std::size_t c = 0; c < cols; ++c)
                                          g[k * cols + c] += self.grad[c] * (*weights)[k * cols + c];
                                    });
}

/// Sum over devices of -log(s_pos / (s_pos + sum of negatives)), with
/// s(a, b) = exp(cos(a, b) / tau). The positive pair is (aggregate, shared
/// j); negatives are (aggregate, private k) for every k and every unordered
/// private-private pair.
template <typename T>
BasicTensor<T> contrastive_loss(const net::FeatureBundle<T>& f, double tau) {
  const std::size_t J = f.shared.size();
  if (J == 0 || f.private_.size() != J) {
    throw DimensionError("contrastive_loss: need matching shared and private features, got " + std::to_string(J) +
                         " and " + std::to_string(f.private_.size()));
  }
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  std::vector<BasicTensor<T>> negatives;
  for (std::size_t k = 0; k < J; ++k) negatives.push_back(ad::cosine_similarity(f.aggregated, f.private_[k]));
  for (std::size_t i = 0; i < J; ++i)
    for (std::size_t k = i + 1; k < J; ++k) negatives.push_back(ad::cosine_similarity(f.private_[i], f.private_[k]));
  const auto neg = ad::stack(negatives);  // [N x B] or [N]
  const T inv_tau = static_cast<T>(1.0 / tau);

  BasicTensor<T> total;
  for (std::size_t j = 0; j < J; ++j) {
    const auto pos = ad::cosine_similarity(f.aggregated, f.shared[j]);
    std::vector<BasicTensor<T>> copies(negatives.size(), pos);
    const auto logits = ad::scale(ad::sub(neg, ad::stack(copies)), inv_tau);
    const auto term = log1p_sum_exp(logits);
    total = j == 0 ? term : ad::add(total, term);
  }
  return ad::mean(total);
}

/// Sum of cos(private i, private k) over unordered pairs plus
/// cos(shared j, private j) over devices; optionally each term clamped at 0.
template <typename T>
BasicTensor<T> orthogonality_loss(const net::FeatureBundle<T>& f, bool clamped = false) {
  const std::size_t J = f.shared.size();
  if (J == 0 || f.private_.size() != J) {
    throw DimensionError("orthogonality_loss: need matching shared and private features");
  }
  std::vector<BasicTensor<T>> terms;
  for (std::size_t i = 0; i < J; ++i)
    for (std::size_t k = i + 1; k < J; ++k) terms.push_back(ad::cosine_similarity(f.private_[i], f.private_[k]));
  for (std::size_t j = 0; j < J; ++j) terms.push_back(ad::cosine_similarity(f.shared[j], f.private_[j]));
  auto stacked = ad::stack(terms);
  if (clamped) stacked = ad::relu(stacked);
  auto per_window = ad::reduce(stacked, ad::Reduction::kSum, 0);
  return ad::mean(per_window);
}

/// Which terms enter the objective.
struct LossTerms {
  bool contrastive = true;  // contrastive and orthogonality together
};

template <typename T>
struct Objective {
  BasicTensor<T> total;
  LossReport report;
};

/// Combined objective for one forward pass.
template <typename T>
Objective<T> compute_objective(const net::ModelOutput<T>& out, const BasicTensor<T>& target, const LossWeights& w,
                               LossTerms terms = {}) {
  std::vector<double> per_head;
  const auto l_vel = velocity_loss(out.velocities, target, &per_head);
  auto total = ad::scale(l_vel, static_cast<T>(w.lambda_v));
  double con = 0, orth = 0;
  if (terms.contrastive) {
    const auto l_con = contrastive_loss(out.features, w.tau);
    const auto l_orth = orthogonality_loss(out.features, w.clamped_orthogonality);
    con = l_con.item();
    orth = l_orth.item();
    total = ad::add(total, ad::add(ad::scale(l_con, static_cast<T>(w.lambda_c)),
                                   ad::scale(l_orth, static_cast<T>(w.lambda_o))));
  }
  Objective<T> obj{total, {}};
  obj.report = total_loss(l_vel.item(), con, orth, terms.contrastive ? w : LossWeights{w.lambda_v, 0, 0, w.tau, w.clamped_orthogonality});
  obj.report.per_head_vel_mse = std::move(per_head);
  return obj;
}

}  // namespace suitein::loss
