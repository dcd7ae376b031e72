#pragma once

#include <cmath>
#include <vector>

#include "fcdm/diffusion.hpp"

namespace fcdm::oracle {

struct MarginalError {
  double mean = 0;  // average over pixels of |mean - closed form| / closed-form sd
  double var = 0;   // average over pixels of |var / closed form - 1|
};

/// Simulates x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z stepwise from x0 up
/// to t for `samples` chains per pixel and compares the empirical per-pixel
/// moments with the closed-form marginal.
inline MarginalError stepwise_marginals(const NoiseSchedule& s, std::size_t t, const std::vector<double>& x0,
                                        std::size_t samples, Rng& rng) {
  std::vector<double> sum(x0.size()), sum2(x0.size());
  for (std::size_t k = 0; k < samples; ++k)
    for (std::size_t p = 0; p < x0.size(); ++p) {
      double x = x0[p];
      for (std::size_t u = 0; u <= t; ++u) x = std::sqrt(s.alpha[u]) * x + std::sqrt(s.beta[u]) * rng.normal();
      sum[p] += x;
      sum2[p] += x * x;
    }
  MarginalError e;
  const double ev = 1 - s.alpha_bar[t];
  for (std::size_t p = 0; p < x0.size(); ++p) {
    const double m = sum[p] / samples, var = sum2[p] / samples - m * m;
    e.mean += std::abs(m - std::sqrt(s.alpha_bar[t]) * x0[p]) / std::sqrt(ev) / x0.size();
    e.var += std::abs(var / ev - 1) / x0.size();
  }
  return e;
}

}  // namespace fcdm::oracle
