#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace resdiff {

/// Sigma discretization for the reverse process:
///   sigma_i = (smax^(1/rho) + i/(N-1) * (smin^(1/rho) - smax^(1/rho)))^rho
/// for i in 0..N-1, appended with sigma_N = 0. Endpoints are assigned
/// exactly rather than through pow().
struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  int n_steps = 18;

  void validate() const {
    if (!(sigma_min > 0)) throw std::invalid_argument("schedule: sigma_min must be > 0");
    if (!(sigma_max > sigma_min))
      throw std::invalid_argument("schedule: sigma_max must be > sigma_min");
    if (!(rho > 0)) throw std::invalid_argument("schedule: rho must be > 0");
    if (n_steps < 1) throw std::invalid_argument("schedule: n_steps must be >= 1");
  }
};

inline std::vector<double> sigma_steps(const NoiseSchedule& s) {
  s.validate();
  std::vector<double> sigmas(static_cast<std::size_t>(s.n_steps) + 1, 0.0);
  sigmas[0] = s.sigma_max;
  if (s.n_steps == 1) return sigmas;  // [sigma_max, 0]
  const double inv_rho = 1.0 / s.rho;
  const double lo = std::pow(s.sigma_min, inv_rho);
  const double hi = std::pow(s.sigma_max, inv_rho);
  for (int i = 1; i + 1 < s.n_steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(s.n_steps - 1);
    sigmas[static_cast<std::size_t>(i)] = std::pow(hi + t * (lo - hi), s.rho);
  }
  sigmas[static_cast<std::size_t>(s.n_steps) - 1] = s.sigma_min;
  return sigmas;
}

/// Second-order steps spend two denoiser calls except the final step to
/// sigma = 0, so a budget of `nfe` calls supports (nfe + 1) / 2 steps.
inline int steps_for_nfe(int nfe) {
  if (nfe < 1) throw std::invalid_argument("steps_for_nfe: nfe must be >= 1");
  return (nfe + 1) / 2;
}

/// Stochastic-sampler knobs. s_churn = 0 gives the deterministic
/// second-order sampler.
struct SamplerConfig {
  int nfe = 200;
  double s_churn = 0.0;
  double s_tmin = 0.0;
  double s_tmax = 1e30;
  double s_noise = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (nfe < 1) throw std::invalid_argument("sampler: nfe must be >= 1");
    if (s_churn < 0) throw std::invalid_argument("sampler: s_churn must be >= 0");
  }

  /// Preset for stochastic end-to-end runs.
  static SamplerConfig stochastic_preset() {
    SamplerConfig cfg;
    cfg.s_churn = 10.0;
    cfg.s_tmin = 0.01;
    cfg.s_tmax = 50.0;
    cfg.s_noise = 1.0;
    return cfg;
  }
};

/// Training-loop knobs. sigma draws are log-normal:
/// sigma = exp(sigma_sample_mean + sigma_sample_std * z).
struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 24;
  double sigma_sample_mean = -1.2;
  double sigma_sample_std = 1.2;
  int max_updates = 200000;
  std::uint64_t seed = 0;

  void validate() const {
    // zero is allowed: a no-op update, useful for exercising the loop
    if (!(learning_rate >= 0))
      throw std::invalid_argument("train: learning_rate must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (max_updates < 0) throw std::invalid_argument("train: max_updates must be >= 0");
  }
};

}  // namespace resdiff
