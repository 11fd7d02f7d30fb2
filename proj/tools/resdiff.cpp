// resdiff command-line front end: phantom, train, sample, project, evaluate.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "resdiff/pipeline.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

// Single-instance guard: exclusive lock file inside the output directory.
struct DirLock {
  std::string lock_path;
  int fd = -1;

  explicit DirLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    lock_path = dir + "/.resdiff.lock";
    fd = ::open(lock_path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error("output directory locked: " + dir);
  }
  ~DirLock() {
    if (fd >= 0) {
      ::close(fd);
      ::unlink(lock_path.c_str());
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

int main(int argc, char** argv) {
  using namespace resdiff;

  CLI::App app{"volumetric residual-diffusion toolkit"};
  app.fallthrough();
  app.set_version_flag("--version", std::string("resdiff ") + kVersion);

  std::string config_path;
  bool config_dump = false;
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_flag("--config-dump", config_dump,
               "print the fully resolved configuration and exit");

  std::string opt_seed, opt_dataset, opt_checkpoint, opt_output;
  auto* o_seed = app.add_option("--seed", opt_seed, "global seed");
  auto* o_dataset = app.add_option("--dataset", opt_dataset, "dataset directory");
  auto* o_checkpoint = app.add_option("--checkpoint", opt_checkpoint, "checkpoint path");
  auto* o_output = app.add_option("--output", opt_output, "output directory");

  auto* cmd_phantom = app.add_subcommand("phantom", "write a paired phantom dataset");
  std::string opt_pairs, opt_dim, opt_spacing;
  auto* o_pairs = cmd_phantom->add_option("--pairs", opt_pairs, "number of pairs");
  auto* o_dim = cmd_phantom->add_option("--dim", opt_dim, "cubic volume dimension");
  auto* o_spacing = cmd_phantom->add_option("--spacing", opt_spacing, "voxel spacing mm");

  auto* cmd_train = app.add_subcommand("train", "train the denoiser on a dataset");
  std::string opt_updates, opt_batch, opt_lr, opt_patch;
  bool flag_resume = false;
  auto* o_updates = cmd_train->add_option("--updates", opt_updates, "total update count");
  auto* o_batch = cmd_train->add_option("--batch", opt_batch, "batch size");
  auto* o_lr = cmd_train->add_option("--lr", opt_lr, "learning rate");
  auto* o_patch = cmd_train->add_option("--patch", opt_patch, "training patch size");
  cmd_train->add_flag("--resume", flag_resume, "continue from the checkpoint");

  auto* cmd_sample = app.add_subcommand("sample", "generate a CT from prior + X-rays");
  std::string s_prior, s_pa, s_lat, s_phase = "EndExpiratory", s_out;
  double s_peep = 3.0, s_tv = 6.0;
  std::string opt_nfe, opt_churn;
  std::optional<double> s_oracle_mean, s_oracle_var;
  cmd_sample->add_option("--prior", s_prior, "prior CT (.rvol)")->required();
  cmd_sample->add_option("--pa", s_pa, "PA radiograph (.rimg)");
  cmd_sample->add_option("--lat", s_lat, "LAT radiograph (.rimg)");
  cmd_sample->add_option("--peep", s_peep, "target PEEP, cm H2O");
  cmd_sample->add_option("--tv", s_tv, "target tidal volume, ml/kg");
  cmd_sample->add_option("--phase", s_phase, "EndInspiratory | EndExpiratory");
  cmd_sample->add_option("--out", s_out, "output volume path");
  auto* o_nfe = cmd_sample->add_option("--nfe", opt_nfe, "function evaluation budget");
  auto* o_churn = cmd_sample->add_option("--churn", opt_churn, "stochastic churn");
  cmd_sample->add_option("--oracle-mean", s_oracle_mean,
                         "use the Gaussian oracle denoiser with this mean");
  cmd_sample->add_option("--oracle-var", s_oracle_var,
                         "Gaussian oracle variance (enables oracle mode)");

  auto* cmd_project = app.add_subcommand("project", "render a DRR from a volume");
  std::string p_volume, p_view = "PA", p_out;
  cmd_project->add_option("--volume", p_volume, "input CT (.rvol)")->required();
  cmd_project->add_option("--view", p_view, "PA | LAT");
  cmd_project->add_option("--out", p_out, "output radiograph path")->required();

  auto* cmd_evaluate = app.add_subcommand("evaluate", "agreement study over pairs");
  std::string e_manifest;
  cmd_evaluate->add_option("--manifest", e_manifest,
                           "CSV: pair_id,original_path,generated_path")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    Config cfg = config_path.empty() ? Config() : Config::from_file(config_path);
    auto override_key = [&cfg](const CLI::Option* opt, const char* key,
                               const std::string& value) {
      if (opt->count() > 0) cfg.set(key, value);
    };
    override_key(o_seed, "seed", opt_seed);
    override_key(o_dataset, "paths.dataset", opt_dataset);
    override_key(o_checkpoint, "paths.checkpoint", opt_checkpoint);
    override_key(o_output, "paths.output", opt_output);
    override_key(o_pairs, "phantom.n_pairs", opt_pairs);
    override_key(o_dim, "phantom.dim", opt_dim);
    override_key(o_spacing, "phantom.spacing_mm", opt_spacing);
    override_key(o_updates, "train.max_updates", opt_updates);
    override_key(o_batch, "train.batch_size", opt_batch);
    override_key(o_lr, "train.learning_rate", opt_lr);
    override_key(o_patch, "train.patch_size", opt_patch);
    if (flag_resume) cfg.set("train.resume", "true");
    override_key(o_nfe, "sampler.nfe", opt_nfe);
    override_key(o_churn, "sampler.s_churn", opt_churn);

    RunConfig rc = RunConfig::from_config(cfg);
    if (!(rc.phantom.ranges.peep_min < rc.phantom.ranges.peep_max) ||
        !(rc.phantom.ranges.tv_min < rc.phantom.ranges.tv_max))
      throw std::runtime_error("config: invalid ventilation range");

    if (config_dump) {
      std::cout << "version = " << kVersion << "\n";
      rc.dump(std::cout);
      return 0;
    }

    if (app.got_subcommand(cmd_phantom)) {
      if (rc.dataset_dir.empty())
        throw std::runtime_error("phantom: paths.dataset is required");
      DirLock lock(rc.dataset_dir);
      build_dataset<double>(rc.phantom, rc.n_pairs, rc.phantom.ranges, rc.seed,
                            rc.dataset_dir, rc.mu_water);
      std::cout << rc.dataset_dir << "/manifest.csv\n";
      return 0;
    }

    if (app.got_subcommand(cmd_train)) {
      DirLock lock(rc.output_dir);
      const auto t0 = std::chrono::steady_clock::now();
      const TrainRunResult r = run_training<double>(rc);
      std::cout << "checkpoint " << r.checkpoint_path << " step "
                << r.final_step << " loss " << r.last_loss << " wall_s "
                << elapsed_s(t0) << "\n";
      return 0;
    }

    if (app.got_subcommand(cmd_sample)) {
      DirLock lock(rc.output_dir);
      const std::string out_path =
          s_out.empty() ? rc.output_dir + "/generated.rvol" : s_out;
      const CTVolume<double> prior = read_rvol<double>(s_prior);
      const auto t0 = std::chrono::steady_clock::now();
      int nfe_used = 0;
      CTVolume<double> generated = prior;

      if (s_oracle_var.has_value()) {
        const double mean = s_oracle_mean.value_or(0.0);
        const GaussianOracleDenoiser<double> den(
            Volume<double>::constant(prior.dims(), prior.spacing(), mean),
            *s_oracle_var);
        NoiseSchedule schedule = rc.schedule;
        schedule.n_steps = steps_for_nfe(rc.sampler.nfe);
        const Volume<double> res = sample<double>(
            prior.dims(), prior.spacing(), den, nullptr, schedule, rc.sampler,
            &nfe_used);
        generated = CTVolume<double>(prior.dims(), prior.spacing(),
                                     prior.data() + rc.hu_scale * res.data());
      } else {
        if (rc.checkpoint_path.empty())
          throw std::runtime_error("sample: paths.checkpoint is required");
        if (s_pa.empty() || s_lat.empty())
          throw std::runtime_error("sample: --pa and --lat are required");
        auto ckpt = ConvDenoiser<double>::load_checkpoint(rc.checkpoint_path);
        VentilationParams vent;
        vent.peep = s_peep;
        vent.tidal_volume = s_tv;
        vent.phase = phase_from_string(s_phase);
        validate_ventilation(vent, rc.phantom.ranges);
        const Radiograph<double> pa = read_rimg<double>(s_pa);
        const Radiograph<double> lat = read_rimg<double>(s_lat);
        generated = sample_volume<double>(ckpt.denoiser, prior, pa, lat, vent,
                                          rc, &nfe_used);
      }
      write_rvol(out_path, generated);
      std::cout << out_path << " nfe " << nfe_used << " wall_s " << elapsed_s(t0)
                << "\n";
      return 0;
    }

    if (app.got_subcommand(cmd_project)) {
      const CTVolume<double> vol = read_rvol<double>(p_volume);
      const Radiograph<double> rad =
          drr(vol, view_from_string(p_view), rc.mu_water);
      write_rimg(p_out, rad);
      std::cout << p_out << "\n";
      return 0;
    }

    if (app.got_subcommand(cmd_evaluate)) {
      DirLock lock(rc.output_dir);
      const AgreementStudyResult r =
          run_evaluate<double>(e_manifest, rc.output_dir);
      std::cout << "lung_volume_ml bias " << r.lung_volume.bias << " r2 "
                << r.lung_volume.r_squared << "\n";
      std::cout << "aeration_fraction bias " << r.aeration.bias << " r2 "
                << r.aeration.r_squared << "\n";
      std::cout << rc.output_dir << "/agreement_summary.csv\n";
      return 0;
    }

    std::cerr << "error: no subcommand given (see --help)\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
