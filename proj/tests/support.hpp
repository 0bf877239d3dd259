#pragma once

// Independent reference computations and fixtures shared by the unit tests
// and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "revq/revq.hpp"

namespace support {

// Brute-force pairwise AUC: every (positive, negative) pair scores 1 when the
// positive ranks higher, 1/2 on a tie.
inline double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// 2x2 contingency table, table[actual][predicted].
using Table = std::array<std::array<double, 2>, 2>;

inline Table contingency(std::span<const int> predicted, std::span<const int> actual) {
  Table t{};
  for (std::size_t i = 0; i < predicted.size(); ++i) t[actual[i]][predicted[i]] += 1.0;
  return t;
}

inline double table_macro_f1(const Table& t) {
  double sum = 0.0;
  for (int c = 0; c < 2; ++c) {
    const double tp = t[c][c];
    const double predicted = t[0][c] + t[1][c];
    const double actual = t[c][0] + t[c][1];
    if (predicted == 0 && actual == 0) {
      sum += 1.0;
    } else if (predicted == 0 || actual == 0) {
      sum += 0.0;
    } else {
      const double precision = tp / predicted;
      const double recall = tp / actual;
      sum += precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
    }
  }
  return sum / 2.0;
}

// Kappa from the agreement table of two raters, table[a][b].
inline double table_kappa(const Table& t) {
  const double n = t[0][0] + t[0][1] + t[1][0] + t[1][1];
  const double observed = (t[0][0] + t[1][1]) / n;
  double expected = 0.0;
  for (int k = 0; k < 2; ++k) expected += ((t[k][0] + t[k][1]) / n) * ((t[0][k] + t[1][k]) / n);
  return (observed - expected) / (1.0 - expected);
}

// Fixtures ---------------------------------------------------------------------

/// Random labeled examples with active lengths in [3, max_len].
inline std::vector<revq::EncodedExample> random_examples(std::size_t n, std::size_t vocab_size,
                                                         std::size_t max_len, std::uint64_t seed) {
  revq::detail::Rng rng(seed);
  std::vector<revq::EncodedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    revq::EncodedExample ex;
    const std::size_t len = 3 + revq::detail::uniform_index(rng, max_len - 2);
    ex.token_ids.assign(max_len, 0);
    ex.attention_mask.assign(max_len, 0);
    ex.token_ids[0] = 2;
    for (std::size_t k = 1; k + 1 < len; ++k) {
      ex.token_ids[k] = static_cast<revq::Vocabulary::Id>(4 + revq::detail::uniform_index(rng, vocab_size - 4));
    }
    ex.token_ids[len - 1] = 3;
    std::fill_n(ex.attention_mask.begin(), len, std::uint8_t{1});
    revq::FeatureLabels labels;
    labels.suggestion = static_cast<std::uint8_t>(revq::detail::bernoulli(rng, 0.5));
    labels.problem = static_cast<std::uint8_t>(revq::detail::bernoulli(rng, 0.5));
    labels.positive_tone = static_cast<std::uint8_t>(revq::detail::bernoulli(rng, 0.5));
    ex.labels = labels;
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<revq::EncodedExample> encode_corpus(std::span<const revq::ReviewComment> comments,
                                                       const revq::Vocabulary& vocab,
                                                       std::size_t max_len = revq::kDefaultMaxLen) {
  std::vector<revq::EncodedExample> out;
  for (const auto& c : comments) {
    auto ex = revq::encode(revq::clean_text(c.text), vocab, max_len);
    ex.labels = c.labels;
    out.push_back(std::move(ex));
  }
  return out;
}

inline revq::ClassWeights skewed_weights() {
  revq::ClassWeights w;
  w[revq::Task::suggestion] = {0.6313, 2.4038};
  w[revq::Task::problem] = {0.8772, 1.1628};
  w[revq::Task::positive_tone] = {2.2727, 0.6410};
  return w;
}

// Gradient checks ----------------------------------------------------------------

/// Training-mode loss summed over `active` tasks, masks drawn from `seed`.
inline double training_loss(revq::ModelHandle& model, std::span<const revq::EncodedExample> batch,
                            const revq::ClassWeights& weights, std::span<const revq::Task> active,
                            std::uint64_t seed) {
  revq::detail::Rng rng(seed);
  revq::ModelTape tape;
  const auto logits = model.forward_train(batch, rng, tape);
  std::map<revq::Task, double> losses;
  for (revq::Task t : active) {
    std::vector<std::uint8_t> labels;
    for (const auto& ex : batch) labels.push_back((*ex.labels)[t]);
    losses[t] = revq::batch_loss(logits[t], labels, weights[t], nullptr);
  }
  return revq::mtl_total_loss(losses);
}

/// Parameter gradients of the training-mode loss, keyed by tensor name.
inline std::map<std::string, revq::nn::Matrix> gradients(revq::ModelHandle& model,
                                                         std::span<const revq::EncodedExample> batch,
                                                         const revq::ClassWeights& weights,
                                                         std::span<const revq::Task> active,
                                                         std::uint64_t seed) {
  model.zero_grad();
  revq::detail::Rng rng(seed);
  revq::accumulate_gradients(model, batch, weights, active, rng);
  std::map<std::string, revq::nn::Matrix> out;
  model.visit([&](revq::nn::Param& p) {
    if (p.trainable) out.emplace(p.name, p.grad);
  });
  return out;
}

inline double relative_error(const revq::nn::Matrix& a, const revq::nn::Matrix& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

/// Largest relative error, over shared encoder tensors, between the gradient
/// of the summed MTL loss and the sum of the per-task gradients.
inline double gradient_sum_error(revq::ModelHandle& model,
                                 std::span<const revq::EncodedExample> batch,
                                 const revq::ClassWeights& weights, std::uint64_t seed) {
  const auto all = gradients(model, batch, weights, revq::kAllTasks, seed);
  std::map<std::string, revq::nn::Matrix> summed;
  for (revq::Task t : revq::kAllTasks) {
    const std::array<revq::Task, 1> one{t};
    for (auto& [name, g] : gradients(model, batch, weights, one, seed)) {
      auto [it, inserted] = summed.emplace(name, g);
      if (!inserted) it->second += g;
    }
  }
  double worst = 0.0;
  for (const auto& [name, g] : all) {
    if (name.rfind("head.", 0) == 0) continue;
    worst = std::max(worst, relative_error(g, summed.at(name)));
  }
  return worst;
}

/// Largest per-tensor relative error between analytic gradients and central
/// differences, over tensors accepted by `select`.
inline double finite_difference_error(revq::ModelHandle& model,
                                      std::span<const revq::EncodedExample> batch,
                                      const revq::ClassWeights& weights,
                                      std::span<const revq::Task> active, std::uint64_t seed,
                                      double step,
                                      const std::function<bool(const std::string&)>& select) {
  const auto analytic = gradients(model, batch, weights, active, seed);
  double worst = 0.0;
  model.visit([&](revq::nn::Param& p) {
    if (!p.trainable || !select(p.name)) return;
    revq::nn::Matrix numeric(p.rows, p.cols);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = training_loss(model, batch, weights, active, seed);
      x = saved - step;
      const double down = training_loss(model, batch, weights, active, seed);
      x = saved;
      numeric.data()[i] = (up - down) / (2 * step);
    }
    worst = std::max(worst, relative_error(analytic.at(p.name), numeric));
  });
  return worst;
}

}  // namespace support
