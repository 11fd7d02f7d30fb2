#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resdiff/analytics.hpp"
#include "resdiff/config.hpp"
#include "resdiff/denoiser.hpp"
#include "resdiff/diffusion.hpp"
#include "resdiff/io.hpp"
#include "resdiff/phantom.hpp"
#include "resdiff/projection.hpp"
#include "resdiff/schedule.hpp"
#include "resdiff/volume.hpp"

namespace resdiff {

inline constexpr double kDefaultHuScale = 500.0;
inline constexpr double kDefaultMuWater = 0.02;
inline constexpr std::uint64_t kStreamTrainStep = 0x73746570;  // "step"

/// Everything a run needs, resolvable from a config file plus flag
/// overrides. The global seed feeds every stochastic component.
struct RunConfig {
  std::string dataset_dir;
  std::string checkpoint_path;
  std::string output_dir = ".";
  std::uint64_t seed = 0;
  double hu_scale = kDefaultHuScale;
  double mu_water = kDefaultMuWater;
  PhantomSpec phantom;
  int n_pairs = 8;
  NoiseSchedule schedule;  // n_steps is derived from sampler.nfe at use sites
  SamplerConfig sampler;
  TrainConfig train;
  int patch_size = 10;
  bool resume = false;
  ConvDenoiserSpec denoiser;

  static RunConfig from_config(const Config& cfg) {
    static const char* known[] = {
        "seed",          "hu_scale",        "mu_water",
        "paths.dataset", "paths.checkpoint", "paths.output",
        "phantom.dim",   "phantom.spacing_mm", "phantom.n_pairs",
        "phantom.noise_hu",
        "ranges.peep_min", "ranges.peep_max", "ranges.tv_min", "ranges.tv_max",
        "schedule.sigma_min", "schedule.sigma_max", "schedule.rho",
        "sampler.nfe",   "sampler.s_churn", "sampler.s_tmin",
        "sampler.s_tmax", "sampler.s_noise",
        "train.learning_rate", "train.batch_size", "train.max_updates",
        "train.patch_size", "train.sigma_sample_mean", "train.sigma_sample_std",
        "train.resume",
        "denoiser.widths", "denoiser.sigma_data"};
    for (const auto& [key, value] : cfg.entries()) {
      bool ok = false;
      for (const char* k : known) ok = ok || key == k;
      if (!ok) throw std::runtime_error("config: unknown key '" + key + "'");
    }

    RunConfig rc;
    rc.seed = cfg.get_u64("seed", rc.seed);
    rc.hu_scale = cfg.get_double("hu_scale", rc.hu_scale);
    rc.mu_water = cfg.get_double("mu_water", rc.mu_water);
    rc.dataset_dir = cfg.get_string("paths.dataset", rc.dataset_dir);
    rc.checkpoint_path = cfg.get_string("paths.checkpoint", rc.checkpoint_path);
    rc.output_dir = cfg.get_string("paths.output", rc.output_dir);

    const Index dim = cfg.get_int("phantom.dim", rc.phantom.dims[0]);
    rc.phantom.dims = {dim, dim, dim};
    const double sp = cfg.get_double("phantom.spacing_mm", rc.phantom.spacing[0]);
    rc.phantom.spacing = {sp, sp, sp};
    rc.phantom.noise_hu = cfg.get_double("phantom.noise_hu", rc.phantom.noise_hu);
    rc.n_pairs = static_cast<int>(cfg.get_int("phantom.n_pairs", rc.n_pairs));
    rc.phantom.ranges.peep_min =
        cfg.get_double("ranges.peep_min", rc.phantom.ranges.peep_min);
    rc.phantom.ranges.peep_max =
        cfg.get_double("ranges.peep_max", rc.phantom.ranges.peep_max);
    rc.phantom.ranges.tv_min = cfg.get_double("ranges.tv_min", rc.phantom.ranges.tv_min);
    rc.phantom.ranges.tv_max = cfg.get_double("ranges.tv_max", rc.phantom.ranges.tv_max);

    rc.schedule.sigma_min = cfg.get_double("schedule.sigma_min", rc.schedule.sigma_min);
    rc.schedule.sigma_max = cfg.get_double("schedule.sigma_max", rc.schedule.sigma_max);
    rc.schedule.rho = cfg.get_double("schedule.rho", rc.schedule.rho);

    rc.sampler.nfe = static_cast<int>(cfg.get_int("sampler.nfe", rc.sampler.nfe));
    rc.sampler.s_churn = cfg.get_double("sampler.s_churn", rc.sampler.s_churn);
    rc.sampler.s_tmin = cfg.get_double("sampler.s_tmin", rc.sampler.s_tmin);
    rc.sampler.s_tmax = cfg.get_double("sampler.s_tmax", rc.sampler.s_tmax);
    rc.sampler.s_noise = cfg.get_double("sampler.s_noise", rc.sampler.s_noise);
    rc.sampler.seed = rc.seed;

    rc.train.learning_rate = cfg.get_double("train.learning_rate", rc.train.learning_rate);
    rc.train.batch_size =
        static_cast<int>(cfg.get_int("train.batch_size", rc.train.batch_size));
    rc.train.max_updates =
        static_cast<int>(cfg.get_int("train.max_updates", rc.train.max_updates));
    rc.train.sigma_sample_mean =
        cfg.get_double("train.sigma_sample_mean", rc.train.sigma_sample_mean);
    rc.train.sigma_sample_std =
        cfg.get_double("train.sigma_sample_std", rc.train.sigma_sample_std);
    rc.train.seed = rc.seed;
    rc.patch_size = static_cast<int>(cfg.get_int("train.patch_size", rc.patch_size));
    rc.resume = cfg.get_bool("train.resume", rc.resume);

    if (cfg.has("denoiser.widths")) {
      rc.denoiser.hidden_widths.clear();
      std::stringstream ws(cfg.get_string("denoiser.widths", ""));
      std::string tok;
      while (std::getline(ws, tok, ','))
        rc.denoiser.hidden_widths.push_back(std::stoi(tok));
    }
    rc.denoiser.sigma_data = cfg.get_double("denoiser.sigma_data", rc.denoiser.sigma_data);

    if (!(rc.hu_scale > 0)) throw std::runtime_error("config: hu_scale must be > 0");
    if (!(rc.mu_water > 0)) throw std::runtime_error("config: mu_water must be > 0");
    if (rc.patch_size < 1) throw std::runtime_error("config: train.patch_size must be >= 1");
    rc.denoiser.validate();
    return rc;
  }

  /// Fully resolved configuration, defaults included, as sorted key = value
  /// lines (the --config-dump payload).
  void dump(std::ostream& os) const {
    Config out;
    std::ostringstream num;
    num.precision(std::numeric_limits<double>::max_digits10);
    auto put_num = [&](const std::string& key, double v) {
      num.str("");
      num << v;
      out.set(key, num.str());
    };
    auto put_int = [&](const std::string& key, std::int64_t v) {
      out.set(key, std::to_string(v));
    };
    put_int("seed", static_cast<std::int64_t>(seed));
    put_num("hu_scale", hu_scale);
    put_num("mu_water", mu_water);
    out.set("paths.dataset", dataset_dir);
    out.set("paths.checkpoint", checkpoint_path);
    out.set("paths.output", output_dir);
    put_int("phantom.dim", phantom.dims[0]);
    put_num("phantom.spacing_mm", phantom.spacing[0]);
    put_int("phantom.n_pairs", n_pairs);
    put_num("phantom.noise_hu", phantom.noise_hu);
    put_num("ranges.peep_min", phantom.ranges.peep_min);
    put_num("ranges.peep_max", phantom.ranges.peep_max);
    put_num("ranges.tv_min", phantom.ranges.tv_min);
    put_num("ranges.tv_max", phantom.ranges.tv_max);
    put_num("schedule.sigma_min", schedule.sigma_min);
    put_num("schedule.sigma_max", schedule.sigma_max);
    put_num("schedule.rho", schedule.rho);
    put_int("sampler.nfe", sampler.nfe);
    put_num("sampler.s_churn", sampler.s_churn);
    put_num("sampler.s_tmin", sampler.s_tmin);
    put_num("sampler.s_tmax", sampler.s_tmax);
    put_num("sampler.s_noise", sampler.s_noise);
    put_num("train.learning_rate", train.learning_rate);
    put_int("train.batch_size", train.batch_size);
    put_int("train.max_updates", train.max_updates);
    put_int("train.patch_size", patch_size);
    put_num("train.sigma_sample_mean", train.sigma_sample_mean);
    put_num("train.sigma_sample_std", train.sigma_sample_std);
    out.set("train.resume", resume ? "true" : "false");
    std::string widths;
    for (std::size_t i = 0; i < denoiser.hidden_widths.size(); ++i) {
      if (i) widths += ",";
      widths += std::to_string(denoiser.hidden_widths[i]);
    }
    out.set("denoiser.widths", widths);
    put_num("denoiser.sigma_data", denoiser.sigma_data);
    out.dump(os);
  }
};

/// One manifest pair with its derived training inputs. Channels are kept
/// at O(1) scale: prior HU / 1000, back-projections / mu_water, residual /
/// hu_scale.
template <typename Scalar = double>
struct PairData {
  ManifestRow row;
  Volume<Scalar> prior;         // raw HU
  Volume<Scalar> target;        // raw HU
  Volume<Scalar> prior_scaled;
  Volume<Scalar> bp_pa;
  Volume<Scalar> bp_lat;
  Volume<Scalar> residual_scaled;
};

inline std::string resolve_path(const std::string& stored,
                                const std::string& base_dir) {
  namespace fs = std::filesystem;
  const fs::path p(stored);
  if (p.is_absolute() || fs::exists(p)) return stored;
  return (fs::path(base_dir) / p.filename()).string();
}

template <typename Scalar = double>
PairData<Scalar> load_pair(const ManifestRow& row, const std::string& base_dir,
                           double hu_scale, double mu_water) {
  PairData<Scalar> pd;
  pd.row = row;
  pd.prior = read_rvol<Scalar>(resolve_path(row.prior_path, base_dir));
  pd.target = read_rvol<Scalar>(resolve_path(row.target_path, base_dir));
  require_same_geometry(pd.prior, pd.target, "load_pair");
  const Radiograph<Scalar> pa = read_rimg<Scalar>(resolve_path(row.pa_path, base_dir));
  const Radiograph<Scalar> lat = read_rimg<Scalar>(resolve_path(row.lat_path, base_dir));

  pd.prior_scaled = Volume<Scalar>(pd.prior.dims(), pd.prior.spacing(),
                                   pd.prior.data() / Scalar(1000));
  Volume<Scalar> bp_pa = back_project(pa, pd.prior.dims(), pd.prior.spacing());
  Volume<Scalar> bp_lat = back_project(lat, pd.prior.dims(), pd.prior.spacing());
  pd.bp_pa = Volume<Scalar>(bp_pa.dims(), bp_pa.spacing(),
                            bp_pa.data() / Scalar(mu_water));
  pd.bp_lat = Volume<Scalar>(bp_lat.dims(), bp_lat.spacing(),
                             bp_lat.data() / Scalar(mu_water));
  pd.residual_scaled =
      Volume<Scalar>(pd.prior.dims(), pd.prior.spacing(),
                     (pd.target.data() - pd.prior.data()) / Scalar(hu_scale));
  return pd;
}

template <typename Scalar = double>
std::vector<PairData<Scalar>> load_dataset(const std::string& dataset_dir,
                                           double hu_scale, double mu_water) {
  const std::string manifest = dataset_dir + "/manifest.csv";
  const std::vector<ManifestRow> rows = read_manifest(manifest);
  std::vector<PairData<Scalar>> pairs;
  pairs.reserve(rows.size());
  for (const ManifestRow& row : rows)
    pairs.push_back(load_pair<Scalar>(row, dataset_dir, hu_scale, mu_water));
  return pairs;
}

/// Conditioning stack for one patch of a pair, conditioned on the target
/// ventilation (the scan being generated).
template <typename Scalar>
ConditioningStack<Scalar> conditioning_for_patch(
    const PairData<Scalar>& pd, const PatchSpec& spec,
    const NormalizationRanges& ranges) {
  return build_conditioning(extract_patch(pd.prior_scaled, spec),
                            extract_patch(pd.bp_pa, spec),
                            extract_patch(pd.bp_lat, spec), pd.row.vent_target,
                            spec, ranges);
}

/// Conditioning from raw inputs (stand-alone sampling path).
template <typename Scalar>
ConditioningStack<Scalar> conditioning_for_volume(
    const CTVolume<Scalar>& prior, const Radiograph<Scalar>& pa,
    const Radiograph<Scalar>& lat, const VentilationParams& vent_target,
    const NormalizationRanges& ranges, double mu_water) {
  const Volume<Scalar> prior_scaled(prior.dims(), prior.spacing(),
                                    prior.data() / Scalar(1000));
  Volume<Scalar> bp_pa = back_project(pa, prior.dims(), prior.spacing());
  Volume<Scalar> bp_lat = back_project(lat, prior.dims(), prior.spacing());
  bp_pa = Volume<Scalar>(prior.dims(), prior.spacing(), bp_pa.data() / Scalar(mu_water));
  bp_lat = Volume<Scalar>(prior.dims(), prior.spacing(), bp_lat.data() / Scalar(mu_water));
  return build_conditioning(prior_scaled, bp_pa, bp_lat, vent_target,
                            PatchSpec::full(prior.dims()), ranges);
}

struct TrainRunResult {
  std::int64_t start_step = 0;
  std::int64_t final_step = 0;
  double first_loss = 0;
  double last_loss = 0;
  std::string checkpoint_path;
  std::string loss_log_path;
};

/// Training loop: per update, a fresh counter stream keyed by the update
/// index drives batch selection, noise levels, and noise fields, so a
/// resumed run replays exactly the updates an uninterrupted run would
/// have made. Optimizer moments are not checkpointed; a resume restarts
/// them at zero.
template <typename Scalar = double>
TrainRunResult run_training(const RunConfig& cfg) {
  if (cfg.dataset_dir.empty())
    throw std::runtime_error("train: paths.dataset is required");
  if (cfg.checkpoint_path.empty())
    throw std::runtime_error("train: paths.checkpoint is required");
  const std::vector<PairData<Scalar>> pairs =
      load_dataset<Scalar>(cfg.dataset_dir, cfg.hu_scale, cfg.mu_water);
  if (pairs.empty()) throw std::runtime_error("train: dataset is empty");

  const Dims3 vol_dims = pairs.front().prior.dims();
  for (const auto& pd : pairs)
    require_same_geometry(pd.prior, pairs.front().prior, "train dataset");
  const Index patch = std::min<Index>(
      cfg.patch_size, std::min({vol_dims[0], vol_dims[1], vol_dims[2]}));

  std::int64_t start_step = 0;
  ConvDenoiser<Scalar> den(cfg.denoiser, cfg.seed);
  if (cfg.resume) {
    auto ckpt = ConvDenoiser<Scalar>::load_checkpoint(cfg.checkpoint_path);
    den = std::move(ckpt.denoiser);
    start_step = ckpt.step;
  }

  std::filesystem::create_directories(cfg.output_dir);
  const std::string log_path = cfg.output_dir + "/train_log.csv";
  std::ofstream log(log_path, cfg.resume ? std::ios::app : std::ios::out);
  if (!log) throw std::runtime_error("train: cannot open " + log_path);
  log.precision(std::numeric_limits<double>::max_digits10);
  if (!cfg.resume) log << "step,sigma_mean,loss\n";

  AdamOptimizer<Scalar> opt(den.parameter_count());
  TrainRunResult result;
  result.start_step = start_step;
  result.checkpoint_path = cfg.checkpoint_path;
  result.loss_log_path = log_path;

  bool first = true;
  std::int64_t step = start_step;
  for (; step < cfg.train.max_updates; ++step) {
    CounterRng rng(stream_key(cfg.seed, kStreamTrainStep,
                              static_cast<std::uint64_t>(step)));
    std::vector<TrainSample<Scalar>> batch;
    batch.reserve(static_cast<std::size_t>(cfg.train.batch_size));
    std::vector<double> batch_sigmas;
    for (int b = 0; b < cfg.train.batch_size; ++b) {
      const std::size_t pick = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(pairs.size())));
      PatchSpec spec;
      spec.parent_dims = vol_dims;
      spec.size = {patch, patch, patch};
      spec.origin = {rng.uniform_int(vol_dims[0] - patch + 1),
                     rng.uniform_int(vol_dims[1] - patch + 1),
                     rng.uniform_int(vol_dims[2] - patch + 1)};
      const PairData<Scalar>& pd = pairs[pick];
      batch.push_back(TrainSample<Scalar>{
          extract_patch(pd.residual_scaled, spec),
          conditioning_for_patch(pd, spec, cfg.phantom.ranges)});
    }
    double sigma_mean = 0;
    const Scalar loss = train_step(den, batch, cfg.train, opt, rng,
                                   den.sigma_data(), &sigma_mean);
    log << step + 1 << "," << sigma_mean << "," << static_cast<double>(loss) << "\n";
    if (first) {
      result.first_loss = static_cast<double>(loss);
      first = false;
    }
    result.last_loss = static_cast<double>(loss);
  }
  if (!log) throw std::runtime_error("train: write failed for " + log_path);
  log.close();

  den.save_checkpoint(cfg.checkpoint_path, step);
  result.final_step = step;
  return result;
}

/// Reverse-samples a residual conditioned on (prior, radiographs, target
/// ventilation) and recomposes the generated CT.
template <typename Scalar = double>
CTVolume<Scalar> sample_volume(const Denoiser<Scalar>& den,
                               const CTVolume<Scalar>& prior,
                               const Radiograph<Scalar>& pa,
                               const Radiograph<Scalar>& lat,
                               const VentilationParams& vent_target,
                               const RunConfig& cfg, int* nfe_used = nullptr) {
  const ConditioningStack<Scalar> cond = conditioning_for_volume(
      prior, pa, lat, vent_target, cfg.phantom.ranges, cfg.mu_water);
  NoiseSchedule schedule = cfg.schedule;
  schedule.n_steps = steps_for_nfe(cfg.sampler.nfe);
  const Volume<Scalar> res = sample(prior.dims(), prior.spacing(), den, &cond,
                                    schedule, cfg.sampler, nfe_used);
  return CTVolume<Scalar>(prior.dims(), prior.spacing(),
                          prior.data() + Scalar(cfg.hu_scale) * res.data());
}

struct EvalPair {
  std::int64_t pair_id = 0;
  std::string original_path;
  std::string generated_path;
};

inline std::vector<EvalPair> read_eval_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_eval_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "pair_id,original_path,generated_path")
    throw std::runtime_error("read_eval_manifest: bad header in " + path);
  std::vector<EvalPair> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string id, orig, gen;
    if (!std::getline(ls, id, ',') || !std::getline(ls, orig, ',') ||
        !std::getline(ls, gen))
      throw std::runtime_error("read_eval_manifest: malformed row: " + line);
    rows.push_back(EvalPair{std::stoll(id), orig, gen});
  }
  return rows;
}

inline void write_eval_manifest(const std::string& path,
                                const std::vector<EvalPair>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_eval_manifest: cannot open " + path);
  os << "pair_id,original_path,generated_path\n";
  for (const auto& r : rows)
    os << r.pair_id << "," << r.original_path << "," << r.generated_path << "\n";
  if (!os) throw std::runtime_error("write_eval_manifest: write failed for " + path);
}

/// Agreement CSVs plus plot-data files (x/y columns) under output_dir.
template <typename Scalar = double>
AgreementStudyResult run_evaluate(const std::string& eval_manifest_path,
                                  const std::string& output_dir,
                                  const ThresholdConfig& seg = {}) {
  const std::vector<EvalPair> entries = read_eval_manifest(eval_manifest_path);
  const std::string base_dir =
      std::filesystem::path(eval_manifest_path).parent_path().string();
  std::vector<StudyPair<Scalar>> pairs;
  pairs.reserve(entries.size());
  for (const EvalPair& e : entries) {
    StudyPair<Scalar> sp;
    sp.pair_id = e.pair_id;
    sp.original = read_rvol<Scalar>(resolve_path(e.original_path, base_dir));
    sp.generated = read_rvol<Scalar>(resolve_path(e.generated_path, base_dir));
    pairs.push_back(std::move(sp));
  }
  const AgreementStudyResult result = agreement_study(pairs, seg);

  std::filesystem::create_directories(output_dir);
  write_pair_rows_csv(output_dir + "/agreement_pairs.csv", result.rows);
  write_summary_csv(output_dir + "/agreement_summary.csv", result);
  for (const char* metric : {"lung_volume_ml", "aeration_fraction"}) {
    std::ofstream ba(output_dir + "/plot_ba_" + std::string(metric) + ".csv");
    std::ofstream fit(output_dir + "/plot_fit_" + std::string(metric) + ".csv");
    if (!ba || !fit)
      throw std::runtime_error("run_evaluate: cannot open plot files in " +
                               output_dir);
    ba.precision(std::numeric_limits<double>::max_digits10);
    fit.precision(std::numeric_limits<double>::max_digits10);
    ba << "mean,difference\n";
    fit << "original,generated\n";
    for (const PairMetricRow& r : result.rows) {
      if (r.metric != metric) continue;
      ba << r.mean << "," << r.difference << "\n";
      fit << r.original << "," << r.generated << "\n";
    }
  }
  return result;
}

}  // namespace resdiff
