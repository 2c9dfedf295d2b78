#pragma once

#include "tif/image.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tif {

/// Diffusion variance schedule over time-steps t = 1..T.
///
/// Holds beta_t, the cumulative products alpha_bar_t = prod_{s<=t}(1 - beta_s)
/// and gamma_t = sqrt(alpha_bar_t) / (2 sqrt(2 (1 - alpha_bar_t))), the factor
/// that turns a pixel distance into the erf argument of the two-image
/// discrimination error. t = 0 is not a valid index; the clean image is x0.
class Schedule {
 public:
  explicit Schedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.size() < 2) {
      throw std::invalid_argument("Schedule: need at least 2 time-steps");
    }
    alpha_bars_.resize(betas_.size());
    gammas_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      const double b = betas_[i];
      if (!(b > 0.0 && b < 1.0)) {
        throw std::invalid_argument("Schedule: beta_" + std::to_string(i + 1) + " = " +
                                    std::to_string(b) + " outside (0, 1)");
      }
      prod *= 1.0 - b;
      alpha_bars_[i] = prod;
      gammas_[i] = std::sqrt(prod) / (2.0 * std::sqrt(2.0 * (1.0 - prod)));
    }
    for (std::size_t i = 0; i < gammas_.size(); ++i) {
      if (!std::isfinite(gammas_[i]) || !(gammas_[i] > 0.0)) {
        throw std::invalid_argument("Schedule: gamma_" + std::to_string(i + 1) +
                                    " is not finite and positive (alpha_bar underflow)");
      }
    }
  }

  [[nodiscard]] int T() const { return static_cast<int>(betas_.size()); }

  [[nodiscard]] double beta(int t) const { return betas_[index(t)]; }
  [[nodiscard]] double alpha(int t) const { return 1.0 - betas_[index(t)]; }
  [[nodiscard]] double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
  [[nodiscard]] double gamma(int t) const { return gammas_[index(t)]; }

  [[nodiscard]] const std::vector<double>& betas() const { return betas_; }
  [[nodiscard]] const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  [[nodiscard]] const std::vector<double>& gammas() const { return gammas_; }

  void check_t(int t) const { (void)index(t); }

 private:
  [[nodiscard]] std::size_t index(int t) const {
    if (t < 1 || t > T()) {
      throw std::out_of_range("Schedule: time-step " + std::to_string(t) + " outside [1, " +
                              std::to_string(T()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> gammas_;
};

/// Linear beta schedule, inclusive of both endpoints.
inline Schedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) {
    throw std::invalid_argument("make_linear_schedule: T must be >= 2");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] =
        beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  return Schedule(std::move(betas));
}

inline Schedule default_schedule() { return make_linear_schedule(1000, 1e-4, 0.02); }

/// Draw from q(x_t | x0) with caller-supplied standard-normal noise:
/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
inline Image forward_sample(const Schedule& s, const Image& x0, int t, const Image& noise) {
  require_same_shape(x0, noise, "forward_sample");
  const double ab = s.alpha_bar(t);
  const auto a = static_cast<float>(std::sqrt(ab));
  const auto b = static_cast<float>(std::sqrt(1.0 - ab));
  return Image(x0.shape(), a * x0.data() + b * noise.data());
}

/// `count` time-steps spread evenly over {1..T}, endpoints included.
inline std::vector<int> even_grid(const Schedule& s, int count) {
  if (count < 1 || count > s.T()) {
    throw std::invalid_argument("even_grid: count must be in [1, T]");
  }
  if (count == 1) return {1};
  std::vector<int> grid;
  grid.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double t = 1.0 + static_cast<double>(k) * (s.T() - 1) / (count - 1);
    grid.push_back(static_cast<int>(std::lround(t)));
  }
  return grid;
}

}  // namespace tif
