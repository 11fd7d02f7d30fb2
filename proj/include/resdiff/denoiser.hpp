#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "resdiff/rng.hpp"
#include "resdiff/volume.hpp"

namespace resdiff {

/// D(x; sigma, cond): maps a noisy grid to an estimate of the clean grid.
/// Implementations must preserve spatial dims, return finite values for
/// finite inputs, and be safe to call concurrently (read-only parameters).
template <typename Scalar>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Volume<Scalar> evaluate(
      const Volume<Scalar>& x, Scalar sigma,
      const ConditioningStack<Scalar>* cond = nullptr) const = 0;
};

/// Exact posterior mean of the clean signal under a N(mean, s2*I) prior
/// when x = clean + sigma * noise:
///   D(x; sigma) = mean + s2 / (s2 + sigma^2) * (x - mean).
/// Ignores conditioning. Used to verify the sampling machinery against
/// closed-form Gaussian results.
template <typename Scalar>
class GaussianOracleDenoiser final : public Denoiser<Scalar> {
 public:
  GaussianOracleDenoiser(Volume<Scalar> mean, Scalar variance)
      : mean_(std::move(mean)), variance_(variance) {
    if (!(variance_ > 0))
      throw std::invalid_argument("GaussianOracleDenoiser: variance must be > 0");
  }

  const Volume<Scalar>& mean() const { return mean_; }
  Scalar variance() const { return variance_; }

  Volume<Scalar> evaluate(const Volume<Scalar>& x, Scalar sigma,
                          const ConditioningStack<Scalar>* /*cond*/ =
                              nullptr) const override {
    require_same_geometry(x, mean_, "GaussianOracleDenoiser");
    const Scalar shrink = variance_ / (variance_ + sigma * sigma);
    return Volume<Scalar>(x.dims(), x.spacing(),
                          mean_.data() + shrink * (x.data() - mean_.data()));
  }

 private:
  Volume<Scalar> mean_;
  Scalar variance_;
};

/// A denoiser exposing a flat parameter vector and the exact gradient of
/// the weighted squared-error denoising loss.
template <typename Scalar>
class TrainableDenoiser : public Denoiser<Scalar> {
 public:
  virtual Index parameter_count() const = 0;
  virtual const ArrayX<Scalar>& parameters() const = 0;
  virtual void set_parameters(const ArrayX<Scalar>& p) = 0;

  struct LossGrad {
    Scalar loss = 0;
    ArrayX<Scalar> grad;
  };

  /// loss = weight * mean((D(x; sigma, cond) - target)^2) and its exact
  /// reverse-mode gradient with respect to every parameter.
  virtual LossGrad loss_and_gradient(const Volume<Scalar>& x, Scalar sigma,
                                     const ConditioningStack<Scalar>& cond,
                                     const Volume<Scalar>& target,
                                     Scalar weight) const = 0;
};

/// Architecture of the convolutional denoiser core: a plain stack of 3^3
/// convolutions with SiLU activations between them. Input is the noisy
/// residual concatenated with the 9 conditioning channels; output is one
/// channel.
struct ConvDenoiserSpec {
  std::vector<int> hidden_widths{8, 16, 8};
  double sigma_data = 0.5;

  void validate() const {
    if (hidden_widths.empty())
      throw std::invalid_argument("ConvDenoiserSpec: need at least one hidden layer");
    for (int w : hidden_widths)
      if (w < 1) throw std::invalid_argument("ConvDenoiserSpec: widths must be >= 1");
    if (!(sigma_data > 0))
      throw std::invalid_argument("ConvDenoiserSpec: sigma_data must be > 0");
  }
};

/// Small trainable 3D convolutional denoiser with the usual sigma-dependent
/// preconditioning:
///   c_in = 1/sqrt(sigma^2 + sd^2), c_skip = sd^2/(sigma^2 + sd^2),
///   c_out = sigma*sd/sqrt(sigma^2 + sd^2), c_noise = ln(sigma)/4,
///   D(x) = c_skip*x + c_out * F(concat(c_in*x, cond); c_noise).
/// Convolutions use mirror padding so spatial dims are preserved. Noise
/// conditioning adds a learned per-channel multiple of c_noise after each
/// hidden convolution. The output layer is zero-initialized, so a fresh
/// network computes D(x) = c_skip * x exactly.
template <typename Scalar>
class ConvDenoiser final : public TrainableDenoiser<Scalar> {
 public:
  static constexpr int kInputChannels = 1 + kConditioningChannels;  // 10
  static constexpr int kKernel = 3;
  static constexpr int kTaps = kKernel * kKernel * kKernel;

  ConvDenoiser(ConvDenoiserSpec spec, std::uint64_t seed)
      : spec_(std::move(spec)) {
    spec_.validate();
    build_layout();
    params_ = ArrayX<Scalar>::Zero(param_count_);
    init_parameters(seed);
  }

  const ConvDenoiserSpec& spec() const { return spec_; }
  Index parameter_count() const override { return param_count_; }
  const ArrayX<Scalar>& parameters() const override { return params_; }

  void set_parameters(const ArrayX<Scalar>& p) override {
    if (p.size() != param_count_)
      throw std::invalid_argument("ConvDenoiser: parameter vector has size " +
                                  std::to_string(p.size()) + ", expected " +
                                  std::to_string(param_count_));
    if (!p.allFinite())
      throw std::invalid_argument("ConvDenoiser: non-finite parameters");
    params_ = p;
  }

  std::size_t layer_count() const { return layers_.size(); }

  /// Frozen layers keep their parameters: their gradient entries are
  /// identically zero.
  void set_layer_frozen(std::size_t layer, bool frozen) {
    layers_.at(layer).frozen = frozen;
  }

  Volume<Scalar> evaluate(const Volume<Scalar>& x, Scalar sigma,
                          const ConditioningStack<Scalar>* cond =
                              nullptr) const override {
    check_inputs(x, sigma, cond);
    const ArrayX<Scalar> f = forward_core(x, sigma, *cond, nullptr);
    const Scalar c_skip = skip_coeff(sigma);
    const Scalar c_out = out_coeff(sigma);
    return Volume<Scalar>(x.dims(), x.spacing(), c_skip * x.data() + c_out * f);
  }

  typename TrainableDenoiser<Scalar>::LossGrad loss_and_gradient(
      const Volume<Scalar>& x, Scalar sigma,
      const ConditioningStack<Scalar>& cond, const Volume<Scalar>& target,
      Scalar weight) const override {
    check_inputs(x, sigma, &cond);
    require_same_geometry(x, target, "loss_and_gradient");
    Tape tape;
    const ArrayX<Scalar> f = forward_core(x, sigma, cond, &tape);
    const Scalar c_skip = skip_coeff(sigma);
    const Scalar c_out = out_coeff(sigma);
    const Index n = x.size();

    const ArrayX<Scalar> diff = c_skip * x.data() + c_out * f - target.data();
    typename TrainableDenoiser<Scalar>::LossGrad result;
    result.loss = weight * diff.square().mean();
    // dL/dF = 2 * weight / n * diff * c_out
    ArrayX<Scalar> df = (Scalar(2) * weight / static_cast<Scalar>(n) * c_out) * diff;
    result.grad = backward_core(tape, df, sigma, x.dims());
    return result;
  }

  double sigma_data() const { return spec_.sigma_data; }

  // -- checkpoint io --------------------------------------------------------

  void save_checkpoint(const std::string& path, std::int64_t step) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os << "RDCKPT1\nwidths";
    for (int w : spec_.hidden_widths) os << " " << w;
    os << "\nkernel " << kKernel << "\n";
    os.precision(std::numeric_limits<double>::max_digits10);
    os << "sigma_data " << spec_.sigma_data << "\n";
    os << "step " << step << "\n";
    os << "params " << param_count_ << "\n";
    std::vector<double> buf(static_cast<std::size_t>(param_count_));
    for (Index i = 0; i < param_count_; ++i)
      buf[static_cast<std::size_t>(i)] = static_cast<double>(params_[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
  }

  struct Checkpoint {
    ConvDenoiser denoiser;
    std::int64_t step = 0;
  };

  static Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "RDCKPT1")
      throw std::runtime_error("load_checkpoint: bad magic in " + path);
    ConvDenoiserSpec spec;
    spec.hidden_widths.clear();
    std::int64_t step = 0;
    Index n_params = -1;
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "widths") {
        int w;
        while (ls >> w) spec.hidden_widths.push_back(w);
      } else if (key == "kernel") {
        int k;
        ls >> k;
        if (k != kKernel)
          throw std::runtime_error("load_checkpoint: unsupported kernel size");
      } else if (key == "sigma_data") {
        ls >> spec.sigma_data;
      } else if (key == "step") {
        ls >> step;
      } else if (key == "params") {
        ls >> n_params;
        break;  // binary block follows
      } else {
        throw std::runtime_error("load_checkpoint: unknown header field '" +
                                 key + "'");
      }
    }
    ConvDenoiser d(spec, /*seed=*/0);
    if (n_params != d.parameter_count())
      throw std::runtime_error("load_checkpoint: parameter count " +
                               std::to_string(n_params) +
                               " does not match layer spec");
    std::vector<double> buf(static_cast<std::size_t>(n_params));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != buf.size() * sizeof(double))
      throw std::runtime_error("load_checkpoint: short parameter block");
    ArrayX<Scalar> p(n_params);
    for (Index i = 0; i < n_params; ++i)
      p[i] = static_cast<Scalar>(buf[static_cast<std::size_t>(i)]);
    d.set_parameters(p);
    return Checkpoint{std::move(d), step};
  }

  Scalar skip_coeff(Scalar sigma) const {
    const Scalar sd2 = Scalar(spec_.sigma_data * spec_.sigma_data);
    return sd2 / (sigma * sigma + sd2);
  }
  Scalar in_coeff(Scalar sigma) const {
    const Scalar sd2 = Scalar(spec_.sigma_data * spec_.sigma_data);
    return Scalar(1) / std::sqrt(sigma * sigma + sd2);
  }
  Scalar out_coeff(Scalar sigma) const {
    const Scalar sd2 = Scalar(spec_.sigma_data * spec_.sigma_data);
    return sigma * Scalar(spec_.sigma_data) / std::sqrt(sigma * sigma + sd2);
  }
  static Scalar noise_coeff(Scalar sigma) { return std::log(sigma) / Scalar(4); }

 private:
  struct Layer {
    int in_ch = 0;
    int out_ch = 0;
    bool hidden = true;  // hidden layers get noise conditioning + SiLU
    bool frozen = false;
    Index w_off = 0;     // weights, [out][in][taps]
    Index b_off = 0;     // bias, [out]
    Index s_off = 0;     // noise scale, [out] (hidden only)
  };

  struct Tape {
    // Channel-major activations entering each layer, and hidden-layer
    // pre-activations for the SiLU derivative.
    std::vector<ArrayX<Scalar>> inputs;
    std::vector<ArrayX<Scalar>> preact;
  };

  void build_layout() {
    std::vector<int> widths;
    widths.push_back(kInputChannels);
    for (int w : spec_.hidden_widths) widths.push_back(w);
    widths.push_back(1);
    Index off = 0;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      Layer layer;
      layer.in_ch = widths[i];
      layer.out_ch = widths[i + 1];
      layer.hidden = (i + 2 < widths.size());
      layer.w_off = off;
      off += static_cast<Index>(layer.out_ch) * layer.in_ch * kTaps;
      layer.b_off = off;
      off += layer.out_ch;
      if (layer.hidden) {
        layer.s_off = off;
        off += layer.out_ch;
      }
      layers_.push_back(layer);
    }
    param_count_ = off;
  }

  // Hidden weights are fan-in scaled normal draws; the output layer stays
  // zero so a freshly built network is the pure skip path.
  void init_parameters(std::uint64_t seed) {
    CounterRng rng(stream_key(seed, 0x636f6e76));
    for (const Layer& layer : layers_) {
      if (!layer.hidden) continue;
      const Scalar scale =
          Scalar(1) / std::sqrt(static_cast<Scalar>(layer.in_ch * kTaps));
      const Index nw = static_cast<Index>(layer.out_ch) * layer.in_ch * kTaps;
      for (Index i = 0; i < nw; ++i)
        params_[layer.w_off + i] = scale * static_cast<Scalar>(rng.normal());
      // biases and noise scales start at zero
    }
  }

  void check_inputs(const Volume<Scalar>& x, Scalar sigma,
                    const ConditioningStack<Scalar>* cond) const {
    if (!(sigma > 0))
      throw std::invalid_argument("ConvDenoiser: sigma must be > 0");
    if (cond == nullptr)
      throw std::invalid_argument(
          "ConvDenoiser: conditioning stack required (channel-count mismatch)");
    if (cond->dims != x.dims())
      throw std::invalid_argument("ConvDenoiser: conditioning dims " +
                                  dims_to_string(cond->dims) +
                                  " do not match input dims " +
                                  dims_to_string(x.dims()));
    for (const auto& ch : cond->channels)
      if (ch.size() != x.size())
        throw std::invalid_argument(
            "ConvDenoiser: conditioning channel size mismatch");
  }

  static Index clamp_index(Index i, Index n) {
    // mirror padding; with radius-1 kernels the reflection is the edge voxel
    return i < 0 ? 0 : (i >= n ? n - 1 : i);
  }

  static Scalar silu(Scalar v) { return v / (Scalar(1) + std::exp(-v)); }
  static Scalar silu_grad(Scalar v) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
    return s * (Scalar(1) + v * (Scalar(1) - s));
  }

  void conv_layer_forward(const Layer& layer, const Scalar* in, Scalar* out,
                          const Dims3& dims, Scalar c_noise) const {
    const Index nz = dims[0], ny = dims[1], nx = dims[2];
    const Index n = nz * ny * nx;
    Index ioff[kTaps];
    {
      int k = 0;
      for (Index dz = -1; dz <= 1; ++dz)
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) ioff[k++] = (dz * ny + dy) * nx + dx;
    }
    const Scalar* W = params_.data() + layer.w_off;
    const Scalar* bias = params_.data() + layer.b_off;
    const Scalar* nscale = layer.hidden ? params_.data() + layer.s_off : nullptr;
    for (int oc = 0; oc < layer.out_ch; ++oc) {
      Scalar* dst = out + static_cast<Index>(oc) * n;
      const Scalar base =
          bias[oc] + (layer.hidden ? nscale[oc] * c_noise : Scalar(0));
      for (Index v = 0; v < n; ++v) dst[v] = base;
      for (int ic = 0; ic < layer.in_ch; ++ic) {
        const Scalar* w = W + (static_cast<Index>(oc) * layer.in_ch + ic) * kTaps;
        const Scalar* src = in + static_cast<Index>(ic) * n;
        for (Index z = 0; z < nz; ++z) {
          const bool zin = z > 0 && z + 1 < nz;
          for (Index y = 0; y < ny; ++y) {
            const bool row_interior = zin && y > 0 && y + 1 < ny;
            const Index row = (z * ny + y) * nx;
            if (row_interior && nx > 2) {
              for (Index x = 1; x + 1 < nx; ++x) {
                const Index v = row + x;
                Scalar acc = 0;
                for (int k = 0; k < kTaps; ++k) acc += w[k] * src[v + ioff[k]];
                dst[v] += acc;
              }
              // two edge voxels of the row
              for (Index x : {Index(0), nx - 1}) {
                dst[row + x] += mirrored_tap(w, src, dims, z, y, x);
              }
            } else {
              for (Index x = 0; x < nx; ++x)
                dst[row + x] += mirrored_tap(w, src, dims, z, y, x);
            }
          }
        }
      }
    }
  }

  Scalar mirrored_tap(const Scalar* w, const Scalar* src, const Dims3& dims,
                      Index z, Index y, Index x) const {
    const Index nz = dims[0], ny = dims[1], nx = dims[2];
    Scalar acc = 0;
    int k = 0;
    for (Index dz = -1; dz <= 1; ++dz) {
      const Index zz = clamp_index(z + dz, nz);
      for (Index dy = -1; dy <= 1; ++dy) {
        const Index yy = clamp_index(y + dy, ny);
        for (Index dx = -1; dx <= 1; ++dx) {
          const Index xx = clamp_index(x + dx, nx);
          acc += w[k++] * src[(zz * ny + yy) * nx + xx];
        }
      }
    }
    return acc;
  }

  /// Runs the convolutional core F on concat(c_in * x, cond). When tape is
  /// non-null the per-layer inputs and pre-activations are recorded.
  ArrayX<Scalar> forward_core(const Volume<Scalar>& x, Scalar sigma,
                              const ConditioningStack<Scalar>& cond,
                              Tape* tape) const {
    const Index n = x.size();
    const Scalar c_in = in_coeff(sigma);
    const Scalar c_noise = noise_coeff(sigma);

    ArrayX<Scalar> act(static_cast<Index>(kInputChannels) * n);
    act.segment(0, n) = c_in * x.data();
    for (int c = 0; c < kConditioningChannels; ++c)
      act.segment(static_cast<Index>(c + 1) * n, n) = cond.channels[c];

    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& layer = layers_[li];
      if (tape) tape->inputs.push_back(act);
      ArrayX<Scalar> next(static_cast<Index>(layer.out_ch) * n);
      conv_layer_forward(layer, act.data(), next.data(), x.dims(), c_noise);
      if (!next.allFinite())
        throw std::runtime_error("ConvDenoiser: non-finite activations after layer " +
                                 std::to_string(li));
      if (layer.hidden) {
        if (tape) tape->preact.push_back(next);
        for (Index i = 0; i < next.size(); ++i) next[i] = silu(next[i]);
      }
      act = std::move(next);
    }
    return act;  // single channel, length n
  }

  /// Reverse pass from dL/dF back to the flat parameter gradient.
  ArrayX<Scalar> backward_core(const Tape& tape, ArrayX<Scalar> d_act,
                               Scalar sigma, const Dims3& dims) const {
    const Index nz = dims[0], ny = dims[1], nx = dims[2];
    const Index n = nz * ny * nx;
    const Scalar c_noise = noise_coeff(sigma);
    ArrayX<Scalar> grad = ArrayX<Scalar>::Zero(param_count_);

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const Layer& layer = layers_[li];
      if (layer.hidden) {
        const ArrayX<Scalar>& pre = tape.preact[li];
        for (Index i = 0; i < d_act.size(); ++i)
          d_act[i] *= silu_grad(pre[i]);
      }
      const ArrayX<Scalar>& in = tape.inputs[li];
      ArrayX<Scalar> d_in = ArrayX<Scalar>::Zero(in.size());
      const Scalar* W = params_.data() + layer.w_off;
      Scalar* dW = grad.data() + layer.w_off;
      Scalar* dB = grad.data() + layer.b_off;
      Scalar* dS = layer.hidden ? grad.data() + layer.s_off : nullptr;

      for (int oc = 0; oc < layer.out_ch; ++oc) {
        const Scalar* dout = d_act.data() + static_cast<Index>(oc) * n;
        Scalar sum_dout = 0;
        for (Index v = 0; v < n; ++v) sum_dout += dout[v];
        dB[oc] += sum_dout;
        if (layer.hidden) dS[oc] += c_noise * sum_dout;
        for (int ic = 0; ic < layer.in_ch; ++ic) {
          const Scalar* w = W + (static_cast<Index>(oc) * layer.in_ch + ic) * kTaps;
          Scalar* dw = dW + (static_cast<Index>(oc) * layer.in_ch + ic) * kTaps;
          const Scalar* src = in.data() + static_cast<Index>(ic) * n;
          Scalar* din = d_in.data() + static_cast<Index>(ic) * n;
          for (Index z = 0; z < nz; ++z)
            for (Index y = 0; y < ny; ++y)
              for (Index x = 0; x < nx; ++x) {
                const Index v = (z * ny + y) * nx + x;
                const Scalar g = dout[v];
                if (g == Scalar(0)) continue;
                int k = 0;
                for (Index dz = -1; dz <= 1; ++dz) {
                  const Index zz = clamp_index(z + dz, nz);
                  for (Index dy = -1; dy <= 1; ++dy) {
                    const Index yy = clamp_index(y + dy, ny);
                    for (Index dx = -1; dx <= 1; ++dx) {
                      const Index xx = clamp_index(x + dx, nx);
                      const Index u = (zz * ny + yy) * nx + xx;
                      dw[k] += g * src[u];
                      din[u] += w[k] * g;
                      ++k;
                    }
                  }
                }
              }
        }
      }
      if (layer.frozen) {
        const Index w_len = static_cast<Index>(layer.out_ch) * layer.in_ch * kTaps;
        grad.segment(layer.w_off, w_len).setZero();
        grad.segment(layer.b_off, layer.out_ch).setZero();
        if (layer.hidden) grad.segment(layer.s_off, layer.out_ch).setZero();
      }
      d_act = std::move(d_in);
    }
    return grad;
  }

  ConvDenoiserSpec spec_;
  std::vector<Layer> layers_;
  Index param_count_ = 0;
  ArrayX<Scalar> params_;
};

}  // namespace resdiff
