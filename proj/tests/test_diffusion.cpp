#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "resdiff/denoiser.hpp"
#include "resdiff/diffusion.hpp"
#include "resdiff/rng.hpp"
#include "resdiff/schedule.hpp"
#include "resdiff/volume.hpp"

using namespace resdiff;

namespace {

Volume<double> random_volume(Dims3 dims, std::uint64_t key, double scale = 1.0) {
  CounterRng rng(key);
  ArrayX<double> d(Volume<double>::voxel_count(dims));
  for (Index i = 0; i < d.size(); ++i) d[i] = scale * rng.normal();
  return Volume<double>(dims, {1, 1, 1}, std::move(d));
}

ConditioningStack<double> random_stack(Dims3 dims, std::uint64_t key) {
  CounterRng rng(key);
  ConditioningStack<double> stack;
  stack.dims = dims;
  const Index n = dims[0] * dims[1] * dims[2];
  for (auto& ch : stack.channels) {
    ch.resize(n);
    for (Index i = 0; i < n; ++i) ch[i] = rng.normal();
  }
  return stack;
}

// Ignores its input and returns a fixed grid; enough to pin the algebra of
// the score/drift formulas.
class ConstDenoiser final : public Denoiser<double> {
 public:
  explicit ConstDenoiser(Volume<double> out) : out_(std::move(out)) {}
  Volume<double> evaluate(const Volume<double>& x, double /*sigma*/,
                          const ConditioningStack<double>* /*cond*/ =
                              nullptr) const override {
    require_same_geometry(x, out_, "ConstDenoiser");
    return out_;
  }

 private:
  Volume<double> out_;
};

// Exact flow map of the probability-flow ODE under the Gaussian oracle:
// x(sig1) = mu + (x(sig0) - mu) * sqrt((s2 + sig1^2)/(s2 + sig0^2)).
double exact_flow(double x0, double mu, double s2, double sig0, double sig1) {
  return mu + (x0 - mu) * std::sqrt((s2 + sig1 * sig1) / (s2 + sig0 * sig0));
}

}  // namespace

TEST_CASE("score is zero at a denoiser fixed point") {
  const auto x = random_volume({3, 3, 3}, 1);
  const auto score = score_from_denoiser(x, x, 0.7);
  CHECK((score.data() == 0.0).all());
}

TEST_CASE("score scalar example: x 2, D 1, sigma 1 gives -1") {
  const auto x = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, 2.0);
  const auto d = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, 1.0);
  CHECK(score_from_denoiser(d, x, 1.0).data()[0] == -1.0);
}

TEST_CASE("gaussian oracle score matches the closed form to 1e-12 relative") {
  const Dims3 dims{4, 3, 4};
  const auto mean = Volume<double>::constant(dims, {1, 1, 1}, 0.25);
  const double s2 = 0.8;
  GaussianOracleDenoiser<double> oracle(mean, s2);
  for (double sigma : {0.01, 1.0, 80.0}) {
    const auto x = random_volume(dims, 3, 2.0);
    const auto d = oracle.evaluate(x, sigma);
    const auto score = score_from_denoiser(d, x, sigma);
    for (Index i = 0; i < x.size(); ++i) {
      const double want = -(x.data()[i] - 0.25) / (s2 + sigma * sigma);
      const double scale = std::max(std::abs(want), 1e-300);
      CHECK(std::abs(score.data()[i] - want) <= 1e-12 * scale);
    }
  }
}

TEST_CASE("score rejects non-positive sigma and geometry mismatch") {
  const auto x = Volume<double>::zeros({2, 2, 2}, {1, 1, 1});
  const auto y = Volume<double>::zeros({2, 2, 3}, {1, 1, 1});
  CHECK_THROWS_AS(score_from_denoiser(x, x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(score_from_denoiser(y, x, 1.0), std::invalid_argument);
}

TEST_CASE("drift vanishes when the denoiser returns x") {
  const auto mean = random_volume({2, 3, 2}, 5);
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  // at x = mean the oracle returns mean, so the drift is zero
  const auto rhs = ode_rhs(mean, 2.5, oracle);
  CHECK(rhs.data().abs().maxCoeff() == 0.0);
}

TEST_CASE("drift scalar example: x 3, D 1, sigma 2 gives 1") {
  const auto x = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, 3.0);
  ConstDenoiser den(Volume<double>::constant({1, 1, 1}, {1, 1, 1}, 1.0));
  CHECK(ode_rhs(x, 2.0, den).data()[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gaussian drift is x sigma / (s2 + sigma^2)") {
  const Dims3 dims{3, 3, 3};
  const auto mean = Volume<double>::zeros(dims, {1, 1, 1});
  const double s2 = 0.8;
  GaussianOracleDenoiser<double> oracle(mean, s2);
  const auto x = random_volume(dims, 7, 3.0);
  for (double sigma : {0.05, 1.0, 20.0}) {
    const auto rhs = ode_rhs(x, sigma, oracle);
    for (Index i = 0; i < x.size(); ++i)
      CHECK(rhs.data()[i] ==
            doctest::Approx(x.data()[i] * sigma / (s2 + sigma * sigma))
                .epsilon(1e-13));
  }
}

TEST_CASE("heun_step rejects degenerate sigma orderings") {
  const auto x = Volume<double>::zeros({1, 1, 1}, {1, 1, 1});
  ConstDenoiser den(x);
  CHECK_THROWS_AS(heun_step(x, 1.0, 1.0, den), std::invalid_argument);
  CHECK_THROWS_AS(heun_step(x, 1.0, 2.0, den), std::invalid_argument);
  CHECK_THROWS_AS(heun_step(x, 1.0, -0.5, den), std::invalid_argument);
  CHECK_NOTHROW(heun_step(x, 1.0, 0.0, den));
}

TEST_CASE("heun_step leaves a fixed point unchanged") {
  const auto mean = random_volume({2, 2, 2}, 9);
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  const auto out = heun_step(mean, 2.0, 1.0, oracle);
  CHECK((out.data() == mean.data()).all());
}

TEST_CASE("heun local error shrinks about 8x when the step is halved") {
  const double mu = 0.2, s2 = 0.8;
  const auto mean = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, mu);
  GaussianOracleDenoiser<double> oracle(mean, s2);
  const double x0 = 1.7, sig0 = 2.0;
  const auto start = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, x0);

  auto local_error = [&](double h) {
    const auto stepped = heun_step(start, sig0, sig0 - h, oracle);
    return std::abs(stepped.data()[0] - exact_flow(x0, mu, s2, sig0, sig0 - h));
  };
  const double e1 = local_error(0.4);
  const double e2 = local_error(0.2);
  CHECK(e1 / e2 > 6.0);
  CHECK(e1 / e2 < 10.0);
}

TEST_CASE("sampling is bit-identical for the same seed") {
  const Dims3 dims{2, 3, 2};
  const auto mean = Volume<double>::constant(dims, {1, 1, 1}, 0.3);
  GaussianOracleDenoiser<double> oracle(mean, 0.8);
  NoiseSchedule schedule;
  SamplerConfig cfg = SamplerConfig::stochastic_preset();
  cfg.nfe = 8;
  schedule.n_steps = steps_for_nfe(cfg.nfe);
  cfg.seed = 99;
  const auto a = sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg);
  const auto b = sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg);
  CHECK((a.data() == b.data()).all());
  cfg.seed = 100;
  const auto c = sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg);
  CHECK_FALSE((a.data() == c.data()).all());
}

TEST_CASE("nfe 1 performs a single Euler step and stays finite") {
  const Dims3 dims{2, 2, 2};
  const auto mean = Volume<double>::zeros(dims, {1, 1, 1});
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  NoiseSchedule schedule;
  schedule.n_steps = 1;
  SamplerConfig cfg;
  cfg.nfe = 1;
  int evals = -1;
  const auto out = sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg, &evals);
  CHECK(evals == 1);
  CHECK(out.data().allFinite());
}

TEST_CASE("denoiser call counts stay within the nfe budget") {
  const Dims3 dims{1, 1, 1};
  const auto mean = Volume<double>::zeros(dims, {1, 1, 1});
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  for (int nfe : {1, 4, 5, 16, 33}) {
    NoiseSchedule schedule;
    schedule.n_steps = steps_for_nfe(nfe);
    SamplerConfig cfg;
    cfg.nfe = nfe;
    int evals = -1;
    sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg, &evals);
    CHECK(evals == 2 * schedule.n_steps - 1);
    CHECK(evals <= nfe);
  }
}

TEST_CASE("sample rejects a schedule inconsistent with the nfe budget") {
  const Dims3 dims{1, 1, 1};
  const auto mean = Volume<double>::zeros(dims, {1, 1, 1});
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  NoiseSchedule schedule;
  schedule.n_steps = 5;
  SamplerConfig cfg;
  cfg.nfe = 16;  // expects 8 steps
  CHECK_THROWS_WITH_AS(sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg),
                       doctest::Contains("inconsistent"), std::invalid_argument);
}

TEST_CASE("deterministic sampling reproduces the gaussian marginal") {
  // light version of the sampling-statistics check; the acceptance binary
  // runs the full-budget variant
  const double mu = 0.3, s2 = 0.8;
  const Dims3 dims{1, 1, 1};
  const auto mean = Volume<double>::constant(dims, {1, 1, 1}, mu);
  GaussianOracleDenoiser<double> oracle(mean, s2);
  NoiseSchedule schedule;
  SamplerConfig cfg;
  cfg.nfe = 40;
  schedule.n_steps = steps_for_nfe(cfg.nfe);
  const int n_runs = 1500;
  double acc = 0, acc2 = 0;
  for (int r = 0; r < n_runs; ++r) {
    cfg.seed = static_cast<std::uint64_t>(r);
    const double v =
        sample(dims, {1, 1, 1}, oracle, nullptr, schedule, cfg).data()[0];
    acc += v;
    acc2 += v * v;
  }
  const double m = acc / n_runs;
  const double var = acc2 / n_runs - m * m;
  CHECK(std::abs(m - mu) < 0.06);
  CHECK(std::abs(var / s2 - 1.0) < 0.10);
}

TEST_CASE("edm loss weight closed form") {
  CHECK(edm_loss_weight(1.0, 0.5) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(edm_loss_weight(2.0, 1.0) == doctest::Approx(1.25).epsilon(1e-15));
}

TEST_CASE("dsm loss is zero for a denoiser that returns the clean grid") {
  const Dims3 dims{3, 3, 3};
  const auto clean = random_volume(dims, 11, 0.5);
  ConstDenoiser den(clean);
  const auto noise = random_volume(dims, 12, 0.4);
  CHECK(dsm_loss<double>(den, clean, nullptr, 0.4, noise) == 0.0);
}

TEST_CASE("dsm loss of a zero-output denoiser is the weighted clean power") {
  const Dims3 dims{3, 3, 3};
  const auto clean = random_volume(dims, 13, 0.5);
  ConstDenoiser den(Volume<double>::zeros(dims, {1, 1, 1}));
  const auto noise = random_volume(dims, 14, 0.4);
  const double sigma = 0.7;
  const double want = edm_loss_weight(sigma, 0.5) * clean.data().square().mean();
  CHECK(dsm_loss<double>(den, clean, nullptr, sigma, noise) ==
        doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("dsm loss matches an independent scalar loop") {
  const Dims3 dims{3, 4, 3};
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1, 1};
  ConvDenoiser<double> den(spec, 15);
  {
    CounterRng rng(16);
    ArrayX<double> p(den.parameter_count());
    for (Index i = 0; i < p.size(); ++i) p[i] = 0.2 * rng.normal();
    den.set_parameters(p);
  }
  const auto clean = random_volume(dims, 17, 0.5);
  const auto cond = random_stack(dims, 18);
  const double sigma = 0.35;
  const auto noise = random_volume(dims, 19, sigma);

  const Volume<double> noisy(dims, clean.spacing(),
                             clean.data() + noise.data());
  const auto d = den.evaluate(noisy, sigma, &cond);
  double acc = 0;
  for (Index i = 0; i < clean.size(); ++i) {
    const double e = d.data()[i] - clean.data()[i];
    acc += e * e;
  }
  const double want =
      edm_loss_weight(sigma, 0.5) * acc / static_cast<double>(clean.size());
  CHECK(dsm_loss<double>(den, clean, &cond, sigma, noise) ==
        doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("dsm loss is nonnegative and rejects bad sigma") {
  const Dims3 dims{2, 2, 2};
  const auto clean = random_volume(dims, 20, 0.5);
  ConstDenoiser den(random_volume(dims, 21, 0.5));
  const auto noise = random_volume(dims, 22, 0.4);
  CHECK(dsm_loss<double>(den, clean, nullptr, 0.5, noise) >= 0.0);
  CHECK_THROWS_AS(dsm_loss<double>(den, clean, nullptr, 0.0, noise),
                  std::invalid_argument);
}

TEST_CASE("training sigma draws are log-normal around the configured mean") {
  TrainConfig cfg;  // mean -1.2, std 1.2
  CounterRng rng(23);
  const int n = 30000;
  double acc = 0;
  bool all_positive = true;
  for (int i = 0; i < n; ++i) {
    const double s = sample_training_sigma(cfg, rng);
    all_positive = all_positive && s > 0.0;
    acc += std::log(s);
  }
  CHECK(all_positive);
  const double se = cfg.sigma_sample_std / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(acc / n - cfg.sigma_sample_mean) < 4.0 * se);
}

TEST_CASE("training sigma replays the generator draw exactly") {
  TrainConfig cfg;
  CounterRng a(31), b(31);
  const double got = sample_training_sigma(cfg, a);
  const double want = std::exp(cfg.sigma_sample_mean +
                               cfg.sigma_sample_std * b.normal());
  CHECK(got == want);
}

TEST_CASE("adam matches a hand-stepped scalar recurrence") {
  const double lr = 0.1, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  AdamOptimizer<double> opt(1);
  ArrayX<double> theta = ArrayX<double>::Constant(1, 2.0);
  double ref = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 50; ++t) {
    const ArrayX<double> grad = theta;  // d/dtheta of 0.5 theta^2
    opt.apply(theta, grad, lr);
    const double g = ref;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mh = m / (1.0 - std::pow(beta1, t));
    const double vh = v / (1.0 - std::pow(beta2, t));
    ref -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(theta[0] == doctest::Approx(ref).epsilon(1e-14));
  }
  CHECK(opt.step() == 50);
  CHECK(std::abs(theta[0]) < 2.0);  // descent actually descended
}

TEST_CASE("adam with zero learning rate changes nothing") {
  AdamOptimizer<double> opt(3);
  ArrayX<double> p = ArrayX<double>::LinSpaced(3, 1.0, 3.0);
  const ArrayX<double> before = p;
  ArrayX<double> g = ArrayX<double>::Constant(3, 0.7);
  opt.apply(p, g, 0.0);
  CHECK((p == before).all());
}

TEST_CASE("train_step with zero learning rate leaves parameters unchanged") {
  const Dims3 dims{3, 3, 3};
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  ConvDenoiser<double> den(spec, 41);
  const ArrayX<double> before = den.parameters();
  std::vector<TrainSample<double>> batch;
  batch.push_back({random_volume(dims, 42, 0.5), random_stack(dims, 43)});
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  AdamOptimizer<double> opt(den.parameter_count());
  CounterRng rng(44);
  const double loss = train_step(den, batch, cfg, opt, rng);
  CHECK(std::isfinite(loss));
  CHECK((den.parameters() == before).all());
}

TEST_CASE("train_step returns the pre-update loss and reduces it over time") {
  const Dims3 dims{4, 4, 4};
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1, 1};
  ConvDenoiser<double> den(spec, 51);
  std::vector<TrainSample<double>> batch;
  batch.push_back({random_volume(dims, 52, 0.3), random_stack(dims, 53)});

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 1;
  AdamOptimizer<double> opt(den.parameter_count());
  CounterRng rng(54);

  // fixed probe: the same (sigma, noise) instance before and after training
  const double probe_sigma = 0.5;
  const auto probe_noise = random_volume(dims, 55, probe_sigma);
  const double probe_before = dsm_loss<double>(
      den, batch[0].clean, &batch[0].cond, probe_sigma, probe_noise);

  std::vector<double> losses;
  for (int step = 0; step < 200; ++step)
    losses.push_back(train_step(den, batch, cfg, opt, rng));

  const double probe_after = dsm_loss<double>(
      den, batch[0].clean, &batch[0].cond, probe_sigma, probe_noise);
  CHECK(probe_after < probe_before);

  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 10 + static_cast<std::size_t>(i)];
  }
  CHECK(tail < head);
}

TEST_CASE("train_step aborts on non-finite gradients with a diagnostic") {
  const Dims3 dims{3, 3, 3};
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  ConvDenoiser<double> den(spec, 61);
  // blow up the output layer: weights land at [272, 299) for widths {1}
  ArrayX<double> p = den.parameters();
  for (Index i = 272; i < 299; ++i) p[i] = 1e250;
  den.set_parameters(p);
  std::vector<TrainSample<double>> batch;
  batch.push_back({random_volume(dims, 62, 0.5), random_stack(dims, 63)});
  TrainConfig cfg;
  AdamOptimizer<double> opt(den.parameter_count());
  CounterRng rng(64);
  CHECK_THROWS_WITH_AS(train_step(den, batch, cfg, opt, rng),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("train_step rejects an empty batch") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  ConvDenoiser<double> den(spec, 71);
  TrainConfig cfg;
  AdamOptimizer<double> opt(den.parameter_count());
  CounterRng rng(72);
  std::vector<TrainSample<double>> batch;
  CHECK_THROWS_AS(train_step(den, batch, cfg, opt, rng), std::invalid_argument);
}
