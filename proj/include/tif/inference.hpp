#pragma once

// Time-step weighted reconstruction scoring.
//
//   score(x, c) = -sum_t w_t L_t(adapter_c, x)
//
// The "tif" weights are the ratio of the class-attribute loss at distance
// delta* to the loss integrated over all coarser distances,
//
//   r_t = erfc(gamma_t delta*) / int_{delta*}^inf erfc(gamma_t d) dd
//       = gamma_t erfcx(z) / ierfcx(z),   z = gamma_t delta*,
//
// which stays finite where erfc(z) underflows. delta* is the per-pixel
// cross-class minimum distance of the training split.

#include "tif/denoiser.hpp"
#include "tif/schedule.hpp"
#include "tif/special.hpp"
#include "tif/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif {

struct WeightScheme {
  enum class Kind { tif, uniform, snr_gamma };
  Kind kind{Kind::tif};
  double gamma{1.0};  // exponent for snr_gamma

  static WeightScheme tif() { return {Kind::tif, 0.0}; }
  static WeightScheme uniform() { return {Kind::uniform, 0.0}; }
  static WeightScheme snr_gamma(double g) { return {Kind::snr_gamma, g}; }

  [[nodiscard]] std::string name() const {
    switch (kind) {
      case Kind::tif: return "tif";
      case Kind::uniform: return "uniform";
      case Kind::snr_gamma: {
        std::string g = std::to_string(gamma);
        g.erase(g.find_last_not_of('0') + 1);
        if (!g.empty() && g.back() == '.') g.pop_back();
        return "snr_gamma(" + g + ")";
      }
    }
    return "?";
  }
  bool operator==(const WeightScheme&) const = default;
};

inline WeightScheme parse_scheme(const std::string& s) {
  if (s == "tif") return WeightScheme::tif();
  if (s == "uniform") return WeightScheme::uniform();
  const std::string prefix = "snr_gamma(";
  if (s.rfind(prefix, 0) == 0 && s.back() == ')') {
    const double g = std::stod(s.substr(prefix.size(), s.size() - prefix.size() - 1));
    if (!(g > 0.0) || !std::isfinite(g)) throw std::invalid_argument("snr_gamma exponent must be positive");
    return WeightScheme::snr_gamma(g);
  }
  throw std::invalid_argument("unknown weight scheme '" + s + "' (expected tif|uniform|snr_gamma(<g>))");
}

struct TimestepWeights {
  std::vector<int> grid;
  std::vector<double> raw;      // before normalization
  std::vector<double> weights;  // sums to 1 over grid
  WeightScheme scheme;
};

/// Unnormalized tif weight for one time-step.
inline double tif_weight_raw(double gamma_t, double delta_star) {
  const double z = gamma_t * delta_star;
  return gamma_t * special::erfcx(z) / special::ierfcx(z);
}

inline TimestepWeights timestep_weights(const Schedule& s, double delta_star, std::vector<int> grid,
                                        WeightScheme scheme) {
  if (!(delta_star >= 0.0) || !std::isfinite(delta_star)) {
    throw std::invalid_argument("timestep_weights: delta_star must be finite and >= 0");
  }
  if (grid.empty()) throw std::invalid_argument("timestep_weights: empty grid");
  TimestepWeights w{std::move(grid), {}, {}, scheme};
  w.raw.reserve(w.grid.size());
  for (const int t : w.grid) {
    double r = 1.0;
    switch (scheme.kind) {
      case WeightScheme::Kind::tif: r = tif_weight_raw(s.gamma(t), delta_star); break;
      case WeightScheme::Kind::uniform: s.check_t(t); r = 1.0; break;
      case WeightScheme::Kind::snr_gamma: {
        const double ab = s.alpha_bar(t);
        r = std::pow(ab / (1.0 - ab), scheme.gamma);
        break;
      }
    }
    if (!std::isfinite(r) || r < 0.0) {
      throw std::runtime_error("timestep_weights: non-finite weight at t = " + std::to_string(t) + " for " +
                               scheme.name());
    }
    w.raw.push_back(r);
  }
  double total = 0.0;
  for (const double r : w.raw) total += r;
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw std::runtime_error("timestep_weights: weights do not normalize for " + scheme.name());
  }
  w.weights.reserve(w.raw.size());
  for (const double r : w.raw) w.weights.push_back(r / total);
  return w;
}

inline void write_weight_csv(std::ostream& os, const Schedule& s, const TimestepWeights& w) {
  os << "t,alpha_bar,gamma,weight_raw,weight_normalized\n";
  os.precision(17);
  for (std::size_t i = 0; i < w.grid.size(); ++i) {
    const int t = w.grid[i];
    os << t << ',' << s.alpha_bar(t) << ',' << s.gamma(t) << ',' << w.raw[i] << ',' << w.weights[i] << '\n';
  }
}

/// delta* = sqrt( sum over pixel locations of the minimum, over every pair of
/// training images with different labels, of the channel-summed squared
/// difference at that location ).
inline double estimate_delta_star(std::span<const Sample> train) {
  if (train.empty()) throw std::invalid_argument("estimate_delta_star: empty train split");
  const Shape shape = train.front().image.shape();
  const std::size_t plane = shape.pixels();
  std::vector<double> mins(plane, std::numeric_limits<double>::infinity());
  bool any_pair = false;
  for (std::size_t a = 0; a < train.size(); ++a) {
    require_same_shape(train[a].image, train.front().image, "estimate_delta_star");
    for (std::size_t b = a + 1; b < train.size(); ++b) {
      if (train[a].label == train[b].label) continue;
      any_pair = true;
      const auto& xa = train[a].image;
      const auto& xb = train[b].image;
      for (std::size_t p = 0; p < plane; ++p) {
        double d = 0.0;
        for (int ch = 0; ch < shape.channels; ++ch) {
          const std::size_t idx = static_cast<std::size_t>(ch) * plane + p;
          const double diff = static_cast<double>(xa[idx]) - static_cast<double>(xb[idx]);
          d += diff * diff;
        }
        mins[p] = std::min(mins[p], d);
      }
    }
  }
  if (!any_pair) throw std::invalid_argument("estimate_delta_star: need at least two classes");
  double total = 0.0;
  for (const double m : mins) total += m;
  return std::sqrt(total);
}

using AdapterBank = std::vector<Adapter>;

/// Seed of the noise draws shared by every class at time-step t.
inline std::uint64_t score_noise_seed(std::uint64_t seed, int t) {
  return derive_seed(seed, {0x73636F7265ULL, static_cast<std::uint64_t>(t)});
}

/// Per-class reconstruction losses L_t on a grid: row c, column g holds the
/// mean over n_noise draws of ||x - x0^||^2 under bank[c] at grid[g]. No
/// per-t training weight is folded in; all inference-side weighting comes
/// from the scheme. At each t every class sees the same draws, so rows
/// differ only through the adapters.
inline Eigen::MatrixXd class_losses(const Params& p, const AdapterBank& bank, const Image& x, const Schedule& s,
                                    std::span<const int> grid, int n_noise, std::uint64_t seed) {
  if (bank.empty()) throw std::invalid_argument("class_losses: empty adapter bank");
  if (n_noise < 1) throw std::invalid_argument("class_losses: n_noise must be >= 1");
  if (!(x.shape() == p.arch.image)) throw std::invalid_argument("class_losses: image shape mismatch");
  const auto d = static_cast<Eigen::Index>(x.size());
  const auto G = static_cast<Eigen::Index>(grid.size());
  const Eigen::Index cols = G * n_noise;

  Mat<float> xt(d, cols);
  std::vector<int> ts(static_cast<std::size_t>(cols));
  for (Eigen::Index g = 0; g < G; ++g) {
    const int t = grid[static_cast<std::size_t>(g)];
    const Mat<float> eps = recon_noise(d, n_noise, score_noise_seed(seed, t));
    const double ab = s.alpha_bar(t);
    for (int k = 0; k < n_noise; ++k) {
      const Eigen::Index col = g * n_noise + k;
      xt.col(col) = static_cast<float>(std::sqrt(1.0 - ab)) * eps.col(k) + static_cast<float>(std::sqrt(ab)) * x.data();
      ts[static_cast<std::size_t>(col)] = t;
    }
  }

  Eigen::MatrixXd losses(static_cast<Eigen::Index>(bank.size()), G);
  for (std::size_t c = 0; c < bank.size(); ++c) {
    const Mat<float> x0_hat = eps_to_x0(s, xt, predict_eps(p, &bank[c], s, xt, ts), ts);
    for (Eigen::Index g = 0; g < G; ++g) {
      double loss = 0.0;
      for (int k = 0; k < n_noise; ++k) {
        loss += static_cast<double>((x0_hat.col(g * n_noise + k) - x.data()).squaredNorm());
      }
      losses(static_cast<Eigen::Index>(c), g) = loss / n_noise;
    }
  }
  return losses;
}

/// Scores -sum_t w_t L_t from a class_losses table.
inline std::vector<double> weighted_scores(const Eigen::MatrixXd& losses, const TimestepWeights& w) {
  if (static_cast<std::size_t>(losses.cols()) != w.weights.size()) {
    throw std::invalid_argument("weighted_scores: loss table and weights disagree on grid size");
  }
  const Eigen::Map<const Eigen::VectorXd> wv(w.weights.data(), static_cast<Eigen::Index>(w.weights.size()));
  const Eigen::VectorXd sc = -(losses * wv);
  return {sc.data(), sc.data() + sc.size()};
}

inline std::vector<double> tif_score(const Params& p, const AdapterBank& bank, const Image& x, const Schedule& s,
                                     const TimestepWeights& w, int n_noise, std::uint64_t seed) {
  return weighted_scores(class_losses(p, bank, x, s, w.grid, n_noise, seed), w);
}

/// Argmax with ties going to the smallest index.
inline int classify(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("classify: empty score");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<int>(best);
}

}  // namespace tif
