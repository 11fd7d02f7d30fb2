#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resdiff/denoiser.hpp"
#include "resdiff/parallel.hpp"
#include "resdiff/rng.hpp"
#include "resdiff/schedule.hpp"
#include "resdiff/volume.hpp"

namespace resdiff {

// Stream tags keep the sampler's init noise, per-step churn noise, and the
// training draws on disjoint counter sequences.
inline constexpr std::uint64_t kStreamSampleInit = 0x696e6974;  // "init"
inline constexpr std::uint64_t kStreamSampleChurn = 0x63687572; // "chur"

/// Score of the smoothed density from a denoiser output:
///   grad_x log p(x; sigma) = (D(x; sigma) - x) / sigma^2.
template <typename Scalar>
Volume<Scalar> score_from_denoiser(const Volume<Scalar>& d_out,
                                   const Volume<Scalar>& x, Scalar sigma) {
  if (!(sigma > 0))
    throw std::invalid_argument("score_from_denoiser: sigma must be > 0");
  require_same_geometry(d_out, x, "score_from_denoiser");
  return Volume<Scalar>(x.dims(), x.spacing(),
                        (d_out.data() - x.data()) / (sigma * sigma));
}

/// Probability-flow drift dx/dsigma with sigma(t) = t:
///   (x - D(x; sigma, cond)) / sigma.
template <typename Scalar>
Volume<Scalar> ode_rhs(const Volume<Scalar>& x, Scalar sigma,
                       const Denoiser<Scalar>& denoiser,
                       const ConditioningStack<Scalar>* cond = nullptr) {
  if (!(sigma > 0)) throw std::invalid_argument("ode_rhs: sigma must be > 0");
  const Volume<Scalar> d = denoiser.evaluate(x, sigma, cond);
  return Volume<Scalar>(x.dims(), x.spacing(), (x.data() - d.data()) / sigma);
}

/// One deterministic second-order step from sigma_cur down to sigma_next.
/// The final step to sigma_next = 0 is plain Euler (the drift is undefined
/// at sigma = 0).
template <typename Scalar>
Volume<Scalar> heun_step(const Volume<Scalar>& x, Scalar sigma_cur,
                         Scalar sigma_next, const Denoiser<Scalar>& denoiser,
                         const ConditioningStack<Scalar>* cond = nullptr) {
  if (!(sigma_cur > sigma_next) || !(sigma_next >= 0))
    throw std::invalid_argument("heun_step: need sigma_cur > sigma_next >= 0");
  const Scalar h = sigma_next - sigma_cur;
  const Volume<Scalar> d1 = ode_rhs(x, sigma_cur, denoiser, cond);
  Volume<Scalar> euler(x.dims(), x.spacing(), x.data() + h * d1.data());
  if (!(sigma_next > 0)) return euler;
  const Volume<Scalar> d2 = ode_rhs(euler, sigma_next, denoiser, cond);
  return Volume<Scalar>(x.dims(), x.spacing(),
                        x.data() + h * Scalar(0.5) * (d1.data() + d2.data()));
}

/// Stochastic EDM reverse sampler. Starts from x ~ N(0, sigma_max^2 I),
/// optionally lifts sigma by the churn factor and injects fresh noise, then
/// takes a Heun step per schedule interval. A pure function of (inputs,
/// cfg.seed): reruns are bit-identical regardless of thread count.
/// denoiser_evals, when given, receives the number of denoiser calls made
/// (2*n_steps - 1, always <= cfg.nfe).
template <typename Scalar>
Volume<Scalar> sample(const Dims3& dims, const Spacing3& spacing,
                      const Denoiser<Scalar>& denoiser,
                      const ConditioningStack<Scalar>* cond,
                      const NoiseSchedule& schedule, const SamplerConfig& cfg,
                      int* denoiser_evals = nullptr) {
  schedule.validate();
  cfg.validate();
  if (steps_for_nfe(cfg.nfe) != schedule.n_steps)
    throw std::invalid_argument(
        "sample: schedule n_steps=" + std::to_string(schedule.n_steps) +
        " inconsistent with nfe=" + std::to_string(cfg.nfe) + " (expected " +
        std::to_string(steps_for_nfe(cfg.nfe)) + ")");
  const std::vector<double> sigmas = sigma_steps(schedule);
  const int n_steps = schedule.n_steps;

  ArrayX<Scalar> init(Volume<Scalar>::voxel_count(dims));
  {
    CounterRng init_rng(stream_key(cfg.seed, kStreamSampleInit));
    for (Index i = 0; i < init.size(); ++i)
      init[i] = Scalar(schedule.sigma_max) * static_cast<Scalar>(init_rng.normal());
  }
  Volume<Scalar> x(dims, spacing, std::move(init));

  int evals = 0;
  const double gamma_cap = std::sqrt(2.0) - 1.0;
  for (int i = 0; i < n_steps; ++i) {
    const double sig = sigmas[static_cast<std::size_t>(i)];
    const double sig_next = sigmas[static_cast<std::size_t>(i) + 1];
    double sig_hat = sig;
    if (cfg.s_churn > 0 && sig >= cfg.s_tmin && sig <= cfg.s_tmax) {
      const double gamma = std::min(cfg.s_churn / n_steps, gamma_cap);
      if (gamma > 0) {
        sig_hat = sig * (1.0 + gamma);
        const double amp =
            cfg.s_noise * std::sqrt(sig_hat * sig_hat - sig * sig);
        CounterRng churn_rng(
            stream_key(cfg.seed, kStreamSampleChurn, static_cast<std::uint64_t>(i)));
        ArrayX<Scalar> eps(x.size());
        for (Index v = 0; v < eps.size(); ++v)
          eps[v] = static_cast<Scalar>(churn_rng.normal());
        x = Volume<Scalar>(x.dims(), x.spacing(), x.data() + Scalar(amp) * eps);
      }
    }
    x = heun_step(x, Scalar(sig_hat), Scalar(sig_next), denoiser, cond);
    evals += sig_next > 0 ? 2 : 1;
  }
  if (denoiser_evals) *denoiser_evals = evals;
  return x;
}

/// EDM loss weight lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma*sigma_data)^2.
inline double edm_loss_weight(double sigma, double sigma_data) {
  const double p = sigma * sigma_data;
  return (sigma * sigma + sigma_data * sigma_data) / (p * p);
}

/// Weighted denoising score-matching loss for one example. The caller draws
/// noise ~ N(0, sigma^2 I) and passes it explicitly so tests can pin it.
template <typename Scalar>
Scalar dsm_loss(const Denoiser<Scalar>& denoiser,
                const Volume<Scalar>& clean_residual,
                const ConditioningStack<Scalar>* cond, Scalar sigma,
                const Volume<Scalar>& noise, double sigma_data = 0.5) {
  if (!(sigma > 0)) throw std::invalid_argument("dsm_loss: sigma must be > 0");
  require_same_geometry(clean_residual, noise, "dsm_loss");
  const Volume<Scalar> noisy(clean_residual.dims(), clean_residual.spacing(),
                             clean_residual.data() + noise.data());
  const Volume<Scalar> d = denoiser.evaluate(noisy, sigma, cond);
  const Scalar weight = Scalar(edm_loss_weight(double(sigma), sigma_data));
  return weight * (d.data() - clean_residual.data()).square().mean();
}

/// dsm_loss plus its exact parameter gradient for a trainable denoiser.
template <typename Scalar>
typename TrainableDenoiser<Scalar>::LossGrad dsm_loss_gradient(
    const TrainableDenoiser<Scalar>& denoiser,
    const Volume<Scalar>& clean_residual, const ConditioningStack<Scalar>& cond,
    Scalar sigma, const Volume<Scalar>& noise, double sigma_data = 0.5) {
  if (!(sigma > 0))
    throw std::invalid_argument("dsm_loss_gradient: sigma must be > 0");
  require_same_geometry(clean_residual, noise, "dsm_loss_gradient");
  const Volume<Scalar> noisy(clean_residual.dims(), clean_residual.spacing(),
                             clean_residual.data() + noise.data());
  const Scalar weight = Scalar(edm_loss_weight(double(sigma), sigma_data));
  return denoiser.loss_and_gradient(noisy, sigma, cond, clean_residual, weight);
}

/// Log-normal training noise level: sigma = exp(mean + std * z), z ~ N(0,1).
inline double sample_training_sigma(const TrainConfig& cfg, CounterRng& rng) {
  return std::exp(cfg.sigma_sample_mean + cfg.sigma_sample_std * rng.normal());
}

/// First-order adaptive-moment update with bias correction.
template <typename Scalar>
class AdamOptimizer {
 public:
  struct Config {
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-8);
  };

  explicit AdamOptimizer(Index n_params, Config cfg = {})
      : cfg_(cfg),
        m_(ArrayX<Scalar>::Zero(n_params)),
        v_(ArrayX<Scalar>::Zero(n_params)) {}

  std::int64_t step() const { return t_; }

  void apply(ArrayX<Scalar>& params, const ArrayX<Scalar>& grad, Scalar lr) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw std::invalid_argument("AdamOptimizer: size mismatch");
    ++t_;
    m_ = cfg_.beta1 * m_ + (Scalar(1) - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (Scalar(1) - cfg_.beta2) * grad.square();
    const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, Scalar(t_));
    const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, Scalar(t_));
    params -= lr * (m_ / bc1) / ((v_ / bc2).sqrt() + cfg_.eps);
  }

 private:
  Config cfg_;
  ArrayX<Scalar> m_;
  ArrayX<Scalar> v_;
  std::int64_t t_ = 0;
};

template <typename Scalar>
struct TrainSample {
  Volume<Scalar> clean;
  ConditioningStack<Scalar> cond;
};

/// One optimizer update against the batch-averaged dsm_loss. Noise levels
/// and noise fields are drawn from rng in a fixed serial order, so a given
/// (rng state, batch) pair yields the same update on any thread count.
/// Returns the pre-update loss.
template <typename Scalar>
Scalar train_step(TrainableDenoiser<Scalar>& denoiser,
                  const std::vector<TrainSample<Scalar>>& batch,
                  const TrainConfig& cfg, AdamOptimizer<Scalar>& opt,
                  CounterRng& rng, double sigma_data = 0.5,
                  double* sigma_mean_out = nullptr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  cfg.validate();
  const std::size_t b = batch.size();

  std::vector<Scalar> sigmas(b);
  std::vector<Volume<Scalar>> noises;
  noises.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    sigmas[i] = Scalar(sample_training_sigma(cfg, rng));
    ArrayX<Scalar> d(batch[i].clean.size());
    for (Index v = 0; v < d.size(); ++v)
      d[v] = sigmas[i] * static_cast<Scalar>(rng.normal());
    noises.emplace_back(batch[i].clean.dims(), batch[i].clean.spacing(),
                        std::move(d));
  }
  if (sigma_mean_out) {
    double acc = 0;
    for (Scalar s : sigmas) acc += static_cast<double>(s);
    *sigma_mean_out = acc / static_cast<double>(b);
  }

  std::vector<typename TrainableDenoiser<Scalar>::LossGrad> parts(b);
  parallel_for(static_cast<Index>(b), [&](Index i) {
    const auto& item = batch[static_cast<std::size_t>(i)];
    parts[static_cast<std::size_t>(i)] = dsm_loss_gradient(
        denoiser, item.clean, item.cond, sigmas[static_cast<std::size_t>(i)],
        noises[static_cast<std::size_t>(i)], sigma_data);
  });

  Scalar loss = 0;
  ArrayX<Scalar> grad = ArrayX<Scalar>::Zero(denoiser.parameter_count());
  for (std::size_t i = 0; i < b; ++i) {  // fixed reduction order
    loss += parts[i].loss;
    grad += parts[i].grad;
  }
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);
  loss *= inv_b;
  grad *= inv_b;

  if (!grad.allFinite() || !std::isfinite(static_cast<double>(loss))) {
    std::ostringstream os;
    os << "train_step: non-finite gradient at optimizer step " << opt.step() + 1
       << " (batch sigmas:";
    for (Scalar s : sigmas) os << " " << s;
    os << ")";
    throw std::runtime_error(os.str());
  }

  ArrayX<Scalar> params = denoiser.parameters();
  opt.apply(params, grad, Scalar(cfg.learning_rate));
  denoiser.set_parameters(params);
  return loss;
}

}  // namespace resdiff
