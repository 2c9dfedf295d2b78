#pragma once

// Attribute loss under the forward diffusion process.
//
// Err(x0, x0', t) is the smallest symmetric error of any rule that, given a
// noisy sample from q(x_t|x0) or q(x_t|x0'), names which of the two clean
// images produced it. For isotropic Gaussians with equal covariance the
// optimal rule picks the nearer scaled mean, giving
//
//   Err = 1/2 erfc(gamma_t * ||x0 - x0'||).
//
// An attribute is "lost with degree tau" at t when the expected Err over pairs
// differing only in that attribute reaches tau.

#include "tif/image.hpp"
#include "tif/rng.hpp"
#include "tif/schedule.hpp"
#include "tif/special.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace tif {

/// Closed-form discrimination error for a pair at pixel distance `distance`.
inline double reconstruction_err(double distance, const Schedule& s, int t) {
  return 0.5 * std::erfc(s.gamma(t) * distance);
}

/// log Err, finite even where Err itself underflows (z beyond ~27).
inline double log_reconstruction_err(double distance, const Schedule& s, int t) {
  const double z = s.gamma(t) * distance;
  return std::log(0.5) + std::log(special::erfcx(z)) - z * z;
}

inline double reconstruction_err(const Image& x0, const Image& x0p, const Schedule& s, int t) {
  require_same_shape(x0, x0p, "reconstruction_err");
  return reconstruction_err(distance(x0, x0p), s, t);
}

/// Monte Carlo estimate of Err: draws `n_samples` noisy images from each of
/// q(x_t|x0) and q(x_t|x0'), assigns each to the nearer of sqrt(ab) x0 and
/// sqrt(ab) x0', and averages the two directional error rates. Exact ties
/// count as half an error.
inline double mc_reconstruction_err(const Image& x0, const Image& x0p, const Schedule& s, int t,
                                    std::size_t n_samples, std::uint64_t seed) {
  require_same_shape(x0, x0p, "mc_reconstruction_err");
  if (n_samples == 0) {
    throw std::invalid_argument("mc_reconstruction_err: n_samples must be positive");
  }
  const double ab = s.alpha_bar(t);
  const double mean_scale = std::sqrt(ab);
  const double sigma = std::sqrt(1.0 - ab);
  const std::size_t dim = x0.size();

  std::vector<double> mu_a(dim), mu_b(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    mu_a[i] = mean_scale * x0[i];
    mu_b[i] = mean_scale * x0p[i];
  }

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> xt(dim);

  auto error_rate = [&](const std::vector<double>& source, const std::vector<double>& other) {
    double errors = 0.0;
    for (std::size_t n = 0; n < n_samples; ++n) {
      double d_source = 0.0;
      double d_other = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        xt[i] = source[i] + sigma * normal(rng);
        const double ds = xt[i] - source[i];
        const double dother = xt[i] - other[i];
        d_source += ds * ds;
        d_other += dother * dother;
      }
      if (d_other < d_source) {
        errors += 1.0;
      } else if (d_other == d_source) {
        errors += 0.5;
      }
    }
    return errors / static_cast<double>(n_samples);
  };

  const double e_ab = error_rate(mu_a, mu_b);
  const double e_ba = error_rate(mu_b, mu_a);
  return 0.5 * (e_ab + e_ba);
}

/// Smallest t with Err(distance, t) >= tau, or nullopt if none up to T.
/// Err is monotone non-decreasing in t (gamma_t decreases), so the onset is
/// found by binary search.
inline std::optional<int> loss_onset(double distance, const Schedule& s, double tau) {
  if (!(tau > 0.0 && tau < 0.5)) {
    throw std::invalid_argument("loss_onset: tau must lie in (0, 0.5)");
  }
  if (!(distance >= 0.0) || !std::isfinite(distance)) {
    throw std::invalid_argument("loss_onset: distance must be finite and >= 0");
  }
  if (reconstruction_err(distance, s, s.T()) < tau) {
    return std::nullopt;
  }
  int lo = 1;
  int hi = s.T();
  while (lo < hi) {
    const int mid = lo + (hi - lo) / 2;
    if (reconstruction_err(distance, s, mid) >= tau) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  return lo;
}

/// Yields a pair of images that differ only in one designated attribute.
using PairSampler = std::function<std::pair<Image, Image>(Rng&)>;

/// Expected Err over `n_pairs` pairs from the sampler.
inline double attribute_loss_degree(const PairSampler& sampler, const Schedule& s, int t,
                                    std::size_t n_pairs, std::uint64_t seed) {
  if (!sampler) {
    throw std::invalid_argument("attribute_loss_degree: empty sampler");
  }
  if (n_pairs == 0) {
    throw std::invalid_argument("attribute_loss_degree: n_pairs must be positive");
  }
  s.check_t(t);
  Rng rng(seed);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const auto [a, b] = sampler(rng);
    acc += reconstruction_err(a, b, s, t);
  }
  return acc / static_cast<double>(n_pairs);
}

/// Same as above evaluated over a grid, reusing the same pairs at every t.
inline std::vector<double> attribute_loss_degree(const PairSampler& sampler, const Schedule& s,
                                                 std::span<const int> grid, std::size_t n_pairs,
                                                 std::uint64_t seed) {
  if (!sampler) {
    throw std::invalid_argument("attribute_loss_degree: empty sampler");
  }
  if (n_pairs == 0) {
    throw std::invalid_argument("attribute_loss_degree: n_pairs must be positive");
  }
  Rng rng(seed);
  std::vector<double> dists;
  dists.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const auto [a, b] = sampler(rng);
    dists.push_back(distance(a, b));
  }
  std::vector<double> out;
  out.reserve(grid.size());
  for (const int t : grid) {
    double acc = 0.0;
    for (const double d : dists) acc += reconstruction_err(d, s, t);
    out.push_back(acc / static_cast<double>(n_pairs));
  }
  return out;
}

/// First-order stochastic dominance of `a` over `b`: the empirical CDF of a
/// lies at or below that of b at every pooled sample point.
inline bool fosd_check(std::span<const double> samples_a, std::span<const double> samples_b) {
  if (samples_a.empty() || samples_b.empty()) {
    throw std::invalid_argument("fosd_check: sample sets must be non-empty");
  }
  std::vector<double> a(samples_a.begin(), samples_a.end());
  std::vector<double> b(samples_b.begin(), samples_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  auto cdf = [](const std::vector<double>& v, double x) {
    return static_cast<double>(std::upper_bound(v.begin(), v.end(), x) - v.begin());
  };
  // Step functions only change at sample points, so checking the pooled
  // points is exhaustive. Compare counts cross-multiplied to stay exact.
  for (const auto* pool : {&a, &b}) {
    for (const double x : *pool) {
      if (cdf(a, x) * nb > cdf(b, x) * na) return false;
    }
  }
  return true;
}

/// Err over a (distance x time-step) grid.
struct LossCurve {
  std::vector<double> distances;
  std::vector<int> timesteps;
  std::vector<std::vector<double>> errs;  // errs[distance][t-index]

  void write_csv(std::ostream& os) const {
    os << "distance,t,err\n";
    os.precision(17);
    for (std::size_t i = 0; i < distances.size(); ++i) {
      for (std::size_t j = 0; j < timesteps.size(); ++j) {
        os << distances[i] << ',' << timesteps[j] << ',' << errs[i][j] << '\n';
      }
    }
  }
};

inline LossCurve make_loss_curve(const Schedule& s, std::vector<double> distances,
                                 std::vector<int> timesteps) {
  LossCurve curve{std::move(distances), std::move(timesteps), {}};
  curve.errs.reserve(curve.distances.size());
  for (const double d : curve.distances) {
    std::vector<double> row;
    row.reserve(curve.timesteps.size());
    for (const int t : curve.timesteps) row.push_back(reconstruction_err(d, s, t));
    curve.errs.push_back(std::move(row));
  }
  return curve;
}

}  // namespace tif
