#pragma once

// Discriminative few-shot baselines on raw pixels: nearest class mean, and a
// softmax linear classifier trained by cross-entropy until it fits the train
// split. Both latch onto whatever separates the train split most cheaply,
// which under a perfectly correlated environment is the environment.

#include "tif/denoiser.hpp"
#include "tif/worldgen.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif {

enum class BaselineMode { prototype, linear };

inline const char* to_string(BaselineMode m) {
  return m == BaselineMode::prototype ? "baseline_prototype" : "baseline_linear";
}

struct LinearFitConfig {
  double lr{0.5};
  int max_steps{5000};
  double target_accuracy{0.99};
};

struct BaselineModel {
  BaselineMode mode{BaselineMode::prototype};
  int K{0};
  Eigen::MatrixXd prototypes;  // D x K class means
  Eigen::MatrixXd weights;     // K x D (linear mode)
  Eigen::VectorXd bias;        // K
  int steps{0};                // gradient steps taken (linear mode)
  double train_accuracy{0.0};

  [[nodiscard]] Eigen::VectorXd logits(const Image& x) const {
    const Eigen::VectorXd v = x.data().cast<double>();
    if (mode == BaselineMode::linear) return weights * v + bias;
    Eigen::VectorXd out(K);
    for (int c = 0; c < K; ++c) out(c) = -(prototypes.col(c) - v).squaredNorm();
    return out;
  }
};

/// Argmax with ties to the smallest index.
inline int classify_baseline(const BaselineModel& model, const Image& x) {
  const Eigen::VectorXd z = model.logits(x);
  int best = 0;
  for (int c = 1; c < z.size(); ++c) {
    if (z(c) > z(best)) best = c;
  }
  return best;
}

namespace detail {

inline double train_accuracy(const BaselineModel& m, std::span<const Sample> train) {
  int hits = 0;
  for (const auto& s : train) hits += classify_baseline(m, s.image) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(train.size());
}

}  // namespace detail

inline BaselineModel fit_baseline(std::span<const Sample> train, int K, BaselineMode mode,
                                  const LinearFitConfig& cfg = {}) {
  if (train.empty()) throw std::invalid_argument("fit_baseline: empty train split");
  if (K < 1) throw std::invalid_argument("fit_baseline: K must be >= 1");
  const auto D = static_cast<Eigen::Index>(train.front().image.size());
  BaselineModel m;
  m.mode = mode;
  m.K = K;
  m.prototypes = Eigen::MatrixXd::Zero(D, K);
  std::vector<int> counts(static_cast<std::size_t>(K), 0);
  for (const auto& s : train) {
    if (s.label < 0 || s.label >= K) throw std::invalid_argument("fit_baseline: label outside [0, K)");
    if (static_cast<Eigen::Index>(s.image.size()) != D) throw std::invalid_argument("fit_baseline: image size mismatch");
    m.prototypes.col(s.label) += s.image.data().cast<double>();
    ++counts[static_cast<std::size_t>(s.label)];
  }
  for (int c = 0; c < K; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw std::invalid_argument("fit_baseline: class " + std::to_string(c) + " has no train images");
    }
    m.prototypes.col(c) /= counts[static_cast<std::size_t>(c)];
  }
  if (mode == BaselineMode::prototype) {
    m.train_accuracy = detail::train_accuracy(m, train);
    return m;
  }

  // Full-batch gradient descent on mean cross-entropy from zero weights.
  const auto n = static_cast<Eigen::Index>(train.size());
  Eigen::MatrixXd X(D, n);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(K, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X.col(i) = train[static_cast<std::size_t>(i)].image.data().cast<double>();
    Y(train[static_cast<std::size_t>(i)].label, i) = 1.0;
  }
  m.weights = Eigen::MatrixXd::Zero(K, D);
  m.bias = Eigen::VectorXd::Zero(K);
  for (m.steps = 0; m.steps < cfg.max_steps; ++m.steps) {
    m.train_accuracy = detail::train_accuracy(m, train);
    if (m.train_accuracy >= cfg.target_accuracy) return m;
    Eigen::MatrixXd Z = (m.weights * X).colwise() + m.bias;
    const Eigen::RowVectorXd zmax = Z.colwise().maxCoeff();
    Z.rowwise() -= zmax;
    Eigen::MatrixXd P = Z.array().exp().matrix();
    P.array().rowwise() /= P.colwise().sum().array();
    const Eigen::MatrixXd G = (P - Y) / static_cast<double>(n);
    m.weights -= cfg.lr * G * X.transpose();
    m.bias -= cfg.lr * G.rowwise().sum();
    if (!m.weights.allFinite() || !m.bias.allFinite()) {
      throw DivergenceError("fit_baseline: linear classifier diverged at step " + std::to_string(m.steps));
    }
  }
  m.train_accuracy = detail::train_accuracy(m, train);
  if (m.train_accuracy < cfg.target_accuracy) {
    throw DivergenceError("fit_baseline: linear classifier reached only " + std::to_string(m.train_accuracy) +
                          " train accuracy in " + std::to_string(cfg.max_steps) + " steps");
  }
  return m;
}

}  // namespace tif
