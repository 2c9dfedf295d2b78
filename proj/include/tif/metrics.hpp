#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace tif {

inline double accuracy(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (truth.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// Unweighted mean of per-class F1 over classes 0..K-1. Classes absent from
/// both truth and prediction are skipped.
inline double macro_f1(std::span<const int> truth, std::span<const int> pred, int K) {
  if (truth.size() != pred.size()) throw std::invalid_argument("macro_f1: length mismatch");
  if (truth.empty() || K < 1) throw std::invalid_argument("macro_f1: empty input");
  std::vector<double> tp(K, 0.0), fp(K, 0.0), fn(K, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= K || pred[i] < 0 || pred[i] >= K) {
      throw std::invalid_argument("macro_f1: label outside [0, K)");
    }
    if (truth[i] == pred[i]) {
      tp[truth[i]] += 1.0;
    } else {
      fp[pred[i]] += 1.0;
      fn[truth[i]] += 1.0;
    }
  }
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < K; ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    if (denom == 0.0) continue;
    sum += 2.0 * tp[c] / denom;
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / counted;
}

struct MeanStderr {
  double mean{0.0};
  double stderr_{0.0};
};

inline MeanStderr mean_stderr(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean_stderr: empty input");
  double m = 0.0;
  for (const double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (const double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

}  // namespace tif
