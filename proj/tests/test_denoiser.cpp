#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "resdiff/denoiser.hpp"
#include "resdiff/rng.hpp"
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

ArrayX<double> random_params(Index n, std::uint64_t key, double scale) {
  CounterRng rng(key);
  ArrayX<double> p(n);
  for (Index i = 0; i < n; ++i) p[i] = scale * rng.normal();
  return p;
}

// Independent layout bookkeeping for the flat parameter vector:
// per layer, weights [out][in][27 taps], then bias [out], then (hidden
// layers only) noise scale [out]. Tap order walks dz, dy, dx in -1..1.
struct LayerRef {
  int in_ch, out_ch;
  bool hidden;
  Index w_off, b_off, s_off;
};

std::vector<LayerRef> reference_layout(const std::vector<int>& hidden_widths) {
  std::vector<int> widths;
  widths.push_back(10);
  for (int w : hidden_widths) widths.push_back(w);
  widths.push_back(1);
  std::vector<LayerRef> layers;
  Index off = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    LayerRef l;
    l.in_ch = widths[i];
    l.out_ch = widths[i + 1];
    l.hidden = i + 2 < widths.size();
    l.w_off = off;
    off += static_cast<Index>(l.out_ch) * l.in_ch * 27;
    l.b_off = off;
    off += l.out_ch;
    l.s_off = off;
    if (l.hidden) off += l.out_ch;
    layers.push_back(l);
  }
  return layers;
}

double silu_ref(double v) { return v / (1.0 + std::exp(-v)); }

Index clamp_ref(Index i, Index n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// Naive single-voxel-at-a-time forward pass over the same parameter vector,
// written without any of the library's traversal shortcuts.
ArrayX<double> reference_forward(const std::vector<int>& hidden_widths,
                                 const ArrayX<double>& params, double sigma_data,
                                 const Volume<double>& x, double sigma,
                                 const ConditioningStack<double>& cond) {
  const Index nz = x.dims()[0], ny = x.dims()[1], nx = x.dims()[2];
  const Index n = nz * ny * nx;
  const double c_in = 1.0 / std::sqrt(sigma * sigma + sigma_data * sigma_data);
  const double c_noise = std::log(sigma) / 4.0;

  std::vector<ArrayX<double>> act(10);
  act[0] = c_in * x.data();
  for (int c = 0; c < 9; ++c) act[static_cast<std::size_t>(c) + 1] = cond.channels[c];

  for (const LayerRef& layer : reference_layout(hidden_widths)) {
    std::vector<ArrayX<double>> next(static_cast<std::size_t>(layer.out_ch));
    for (int oc = 0; oc < layer.out_ch; ++oc) {
      ArrayX<double> out(n);
      for (Index z = 0; z < nz; ++z)
        for (Index y = 0; y < ny; ++y)
          for (Index xx = 0; xx < nx; ++xx) {
            double acc = params[layer.b_off + oc];
            if (layer.hidden) acc += params[layer.s_off + oc] * c_noise;
            for (int ic = 0; ic < layer.in_ch; ++ic) {
              int k = 0;
              for (Index dz = -1; dz <= 1; ++dz)
                for (Index dy = -1; dy <= 1; ++dy)
                  for (Index dx = -1; dx <= 1; ++dx, ++k) {
                    const Index src = (clamp_ref(z + dz, nz) * ny +
                                       clamp_ref(y + dy, ny)) *
                                          nx +
                                      clamp_ref(xx + dx, nx);
                    acc += params[layer.w_off +
                                  (static_cast<Index>(oc) * layer.in_ch + ic) *
                                      27 +
                                  k] *
                           act[static_cast<std::size_t>(ic)][src];
                  }
            }
            out[(z * ny + y) * nx + xx] = layer.hidden ? silu_ref(acc) : acc;
          }
      next[static_cast<std::size_t>(oc)] = std::move(out);
    }
    act = std::move(next);
  }
  return act[0];
}

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gaussian oracle returns x when sigma is zero") {
  const auto mean = random_volume({3, 3, 3}, 3);
  const auto x = random_volume({3, 3, 3}, 5);
  GaussianOracleDenoiser<double> oracle(mean, 0.8);
  const auto d = oracle.evaluate(x, 0.0);
  CHECK((d.data() == x.data()).all());
}

TEST_CASE("gaussian oracle is fixed at its mean for every sigma") {
  const auto mean = random_volume({2, 3, 2}, 7);
  GaussianOracleDenoiser<double> oracle(mean, 1.5);
  for (double sigma : {0.01, 1.0, 80.0}) {
    const auto d = oracle.evaluate(mean, sigma);
    CHECK((d.data() == mean.data()).all());
  }
}

TEST_CASE("gaussian oracle shrinkage: mu 0, s2 1, sigma 1, x 2 gives D 1") {
  const auto mean = Volume<double>::zeros({1, 1, 1}, {1, 1, 1});
  const auto x = Volume<double>::constant({1, 1, 1}, {1, 1, 1}, 2.0);
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  CHECK(oracle.evaluate(x, 1.0).data()[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gaussian oracle rejects non-positive variance and bad geometry") {
  const auto mean = Volume<double>::zeros({2, 2, 2}, {1, 1, 1});
  CHECK_THROWS_AS(GaussianOracleDenoiser<double>(mean, 0.0),
                  std::invalid_argument);
  GaussianOracleDenoiser<double> oracle(mean, 1.0);
  const auto wrong = Volume<double>::zeros({2, 2, 3}, {1, 1, 1});
  CHECK_THROWS_AS(oracle.evaluate(wrong, 1.0), std::invalid_argument);
}

TEST_CASE("conv denoiser parameter counts are exact") {
  CHECK(ConvDenoiser<double>(ConvDenoiserSpec{}, 0).parameter_count() == 9353);
  ConvDenoiserSpec small;
  small.hidden_widths = {1, 1};
  CHECK(ConvDenoiser<double>(small, 0).parameter_count() == 329);
}

TEST_CASE("preconditioning coefficients follow the closed forms") {
  ConvDenoiserSpec spec;  // sigma_data 0.5
  ConvDenoiser<double> den(spec, 0);
  CHECK(den.skip_coeff(0.5) == doctest::Approx(0.5).epsilon(1e-15));
  for (double sigma : {0.01, 1.0, 80.0}) {
    const double sd2 = 0.25;
    CHECK(den.skip_coeff(sigma) ==
          doctest::Approx(sd2 / (sigma * sigma + sd2)).epsilon(1e-15));
    CHECK(den.in_coeff(sigma) ==
          doctest::Approx(1.0 / std::sqrt(sigma * sigma + sd2)).epsilon(1e-15));
    CHECK(den.out_coeff(sigma) ==
          doctest::Approx(sigma * 0.5 / std::sqrt(sigma * sigma + sd2))
              .epsilon(1e-15));
    CHECK(ConvDenoiser<double>::noise_coeff(sigma) ==
          doctest::Approx(std::log(sigma) / 4.0).epsilon(1e-15));
  }
}

TEST_CASE("a fresh conv denoiser is the pure skip path") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {2, 3};
  const ConvDenoiser<double> den(spec, 42);
  const Dims3 dims{3, 4, 3};
  const auto x = random_volume(dims, 9);
  const auto cond = random_stack(dims, 10);
  for (double sigma : {0.05, 0.5, 4.0}) {
    const auto d = den.evaluate(x, sigma, &cond);
    const double c_skip = den.skip_coeff(sigma);
    for (Index i = 0; i < x.size(); ++i)
      CHECK(d.data()[i] == c_skip * x.data()[i]);
  }
}

TEST_CASE("perturbing x moves a fresh net's output by exactly the skip gain") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {2};
  const ConvDenoiser<double> den(spec, 1);
  const Dims3 dims{2, 2, 2};
  const auto x = random_volume(dims, 11);
  const auto cond = random_stack(dims, 12);
  const double delta = 0.37;
  const Volume<double> x2(dims, x.spacing(), x.data() + delta);
  const double sigma = 0.8;
  const auto d1 = den.evaluate(x, sigma, &cond);
  const auto d2 = den.evaluate(x2, sigma, &cond);
  const double c_skip = den.skip_coeff(sigma);
  for (Index i = 0; i < x.size(); ++i)
    CHECK(d2.data()[i] - d1.data()[i] ==
          doctest::Approx(c_skip * delta).epsilon(1e-13));
}

TEST_CASE("conv forward matches a naive per-voxel reference to 1e-12") {
  const std::vector<int> widths{2, 3};
  ConvDenoiserSpec spec;
  spec.hidden_widths = widths;
  ConvDenoiser<double> den(spec, 77);
  den.set_parameters(random_params(den.parameter_count(), 78, 0.25));

  for (const Dims3 dims : {Dims3{4, 4, 4}, Dims3{3, 5, 2}, Dims3{1, 4, 3}}) {
    const auto x = random_volume(dims, 79);
    const auto cond = random_stack(dims, 80);
    for (double sigma : {0.07, 0.9}) {
      const auto got = den.evaluate(x, sigma, &cond);
      const ArrayX<double> f = reference_forward(widths, den.parameters(),
                                                 spec.sigma_data, x, sigma, cond);
      const double c_skip = den.skip_coeff(sigma);
      const double c_out = den.out_coeff(sigma);
      for (Index i = 0; i < x.size(); ++i) {
        const double want = c_skip * x.data()[i] + c_out * f[i];
        const double scale = std::max({std::abs(want), std::abs(got.data()[i]), 1.0});
        CHECK(std::abs(got.data()[i] - want) <= 1e-12 * scale);
      }
    }
  }
}

TEST_CASE("evaluate preserves spatial dims on odd, even, and flat shapes") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  const ConvDenoiser<double> den(spec, 5);
  for (const Dims3 dims : {Dims3{1, 1, 1}, Dims3{1, 4, 3}, Dims3{2, 1, 5},
                           Dims3{4, 4, 4}}) {
    const auto x = random_volume(dims, 13);
    const auto cond = random_stack(dims, 14);
    const auto d = den.evaluate(x, 0.3, &cond);
    CHECK(d.dims() == dims);
    CHECK(d.data().allFinite());
  }
}

TEST_CASE("initialization is a pure function of the seed") {
  ConvDenoiserSpec spec;
  const ConvDenoiser<double> a(spec, 123);
  const ConvDenoiser<double> b(spec, 123);
  const ConvDenoiser<double> c(spec, 124);
  CHECK((a.parameters() == b.parameters()).all());
  CHECK_FALSE((a.parameters() == c.parameters()).all());
}

TEST_CASE("evaluate validates sigma, conditioning, and shapes") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  const ConvDenoiser<double> den(spec, 0);
  const Dims3 dims{2, 2, 2};
  const auto x = random_volume(dims, 15);
  const auto cond = random_stack(dims, 16);
  CHECK_THROWS_AS(den.evaluate(x, 0.0, &cond), std::invalid_argument);
  CHECK_THROWS_AS(den.evaluate(x, -1.0, &cond), std::invalid_argument);
  CHECK_THROWS_WITH_AS(den.evaluate(x, 1.0, nullptr),
                       doctest::Contains("conditioning"), std::invalid_argument);
  const auto cond_bad = random_stack({2, 2, 3}, 17);
  CHECK_THROWS_AS(den.evaluate(x, 1.0, &cond_bad), std::invalid_argument);
}

TEST_CASE("set_parameters validates size and finiteness") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  ConvDenoiser<double> den(spec, 0);
  CHECK_THROWS_AS(den.set_parameters(ArrayX<double>::Zero(5)),
                  std::invalid_argument);
  ArrayX<double> p = ArrayX<double>::Zero(den.parameter_count());
  p[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(den.set_parameters(p), std::invalid_argument);
}

TEST_CASE("an exactly-denoised case has zero gradient everywhere") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1, 1};
  const ConvDenoiser<double> den(spec, 3);  // fresh: F is identically zero
  const Dims3 dims{3, 3, 3};
  const auto zero = Volume<double>::zeros(dims, {1, 1, 1});
  const auto cond = random_stack(dims, 18);
  const auto lg = den.loss_and_gradient(zero, 0.6, cond, zero, 2.0);
  CHECK(lg.loss == 0.0);
  CHECK((lg.grad == 0.0).all());
}

TEST_CASE("analytic gradients match central finite differences") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1, 1};  // 329 parameters, all checked
  ConvDenoiser<double> den(spec, 21);
  den.set_parameters(random_params(den.parameter_count(), 22, 0.2));
  const Dims3 dims{3, 4, 3};
  const auto x = random_volume(dims, 23);
  const auto cond = random_stack(dims, 24);
  const auto target = random_volume(dims, 25);
  const double sigma = 0.45;
  const double weight = 3.7;

  const auto lg = den.loss_and_gradient(x, sigma, cond, target, weight);
  REQUIRE(lg.grad.size() == den.parameter_count());

  auto loss_at = [&](const ArrayX<double>& p) {
    ConvDenoiser<double> probe(spec, 0);
    probe.set_parameters(p);
    const auto d = probe.evaluate(x, sigma, &cond);
    return weight * (d.data() - target.data()).square().mean();
  };

  const double h = 1e-5;
  const ArrayX<double> base = den.parameters();
  double worst = 0.0;
  for (Index i = 0; i < base.size(); ++i) {
    ArrayX<double> p = base;
    p[i] = base[i] + h;
    const double up = loss_at(p);
    p[i] = base[i] - h;
    const double dn = loss_at(p);
    const double fd = (up - dn) / (2.0 * h);
    const double rel =
        std::abs(fd - lg.grad[i]) /
        std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-8});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("frozen layers contribute exactly zero gradient") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1, 1};
  ConvDenoiser<double> den(spec, 31);
  den.set_parameters(random_params(den.parameter_count(), 32, 0.2));
  const Dims3 dims{3, 3, 3};
  const auto x = random_volume(dims, 33);
  const auto cond = random_stack(dims, 34);
  const auto target = random_volume(dims, 35);

  const auto layout = reference_layout(spec.hidden_widths);
  const Index l0_len = layout[1].w_off;  // everything before layer 1

  den.set_layer_frozen(0, true);
  const auto lg = den.loss_and_gradient(x, 0.5, cond, target, 1.0);
  CHECK((lg.grad.head(l0_len) == 0.0).all());
  CHECK(lg.grad.tail(lg.grad.size() - l0_len).abs().maxCoeff() > 0.0);

  den.set_layer_frozen(0, false);
  const auto lg2 = den.loss_and_gradient(x, 0.5, cond, target, 1.0);
  CHECK(lg2.grad.head(l0_len).abs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(den.set_layer_frozen(99, true), std::out_of_range);
}

TEST_CASE("checkpoints round-trip parameters, step, and layer spec") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {2, 3};
  spec.sigma_data = 0.4;
  ConvDenoiser<double> den(spec, 51);
  den.set_parameters(random_params(den.parameter_count(), 52, 0.3));
  const std::string path = tmp_path("denoiser_roundtrip.ckpt");
  den.save_checkpoint(path, 1234);
  const auto ckpt = ConvDenoiser<double>::load_checkpoint(path);
  CHECK(ckpt.step == 1234);
  CHECK(ckpt.denoiser.spec().hidden_widths == spec.hidden_widths);
  CHECK(ckpt.denoiser.spec().sigma_data == 0.4);
  CHECK((ckpt.denoiser.parameters() == den.parameters()).all());
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  const std::string path = tmp_path("denoiser_corrupt.ckpt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT\n";
  }
  CHECK_THROWS_WITH_AS(ConvDenoiser<double>::load_checkpoint(path),
                       doctest::Contains("bad magic"), std::runtime_error);
  ConvDenoiserSpec spec;
  spec.hidden_widths = {1};
  ConvDenoiser<double> den(spec, 0);
  den.save_checkpoint(path, 1);
  // truncate the parameter block
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 16);
  CHECK_THROWS_WITH_AS(ConvDenoiser<double>::load_checkpoint(path),
                       doctest::Contains("short parameter block"),
                       std::runtime_error);
  std::remove(path.c_str());
  CHECK_THROWS_WITH_AS(ConvDenoiser<double>::load_checkpoint(path),
                       doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("conv denoiser spec validation") {
  ConvDenoiserSpec spec;
  spec.hidden_widths = {};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.hidden_widths = {4, 0};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = ConvDenoiserSpec{};
  spec.sigma_data = 0.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
