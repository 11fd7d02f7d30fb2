#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resdiff/io.hpp"
#include "resdiff/parallel.hpp"
#include "resdiff/projection.hpp"
#include "resdiff/rng.hpp"
#include "resdiff/volume.hpp"

namespace resdiff {

inline constexpr std::uint64_t kStreamTexture = 0x746578;  // "tex"
inline constexpr std::uint64_t kStreamPairSeed = 0x70616972;  // "pair"
inline constexpr std::uint64_t kStreamVentDraw = 0x76656e74;  // "vent"

/// Analytic ventilated-lung phantom: a tissue torso ellipsoid over air,
/// two mirrored lung ellipsoids whose size tracks tidal volume and phase
/// and whose HU tracks PEEP, plus a fixed airway bar joining the lungs so
/// threshold segmentation sees a single interior component. Semi-axes are
/// (z, y, x) in mm. The dorsal gradient raises HU toward the dependent
/// side so low PEEP leaves more poorly aerated voxels there.
struct PhantomSpec {
  Dims3 dims{32, 32, 32};
  Spacing3 spacing{4.0, 4.0, 4.0};
  std::array<double, 3> torso_semi_mm{60.0, 46.0, 56.0};
  std::array<double, 3> lung_semi_mm{34.0, 22.0, 20.0};
  double lung_offset_x_mm = 26.0;
  double tissue_hu = 50.0;
  double air_hu = -1000.0;
  double base_lung_hu = -600.0;
  double aeration_gain_peep = 15.0;  // HU drop per cm H2O above peep_min
  double dorsal_gradient_hu = 320.0; // HU rise at the fully dependent edge
  double volume_gain_tv = 0.02;      // semi-axis growth per ml/kg above tv_min
  double inspiration_growth = 0.05;  // extra growth at EndInspiratory
  double noise_hu = 40.0;            // texture amplitude
  double texture_cell_mm = 16.0;
  double airway_radius_mm = 7.0;
  double airway_hu = -950.0;
  NormalizationRanges ranges{};
  std::uint64_t seed = 0;

  double lung_scale(const VentilationParams& vent) const {
    double s = 1.0 + volume_gain_tv * (vent.tidal_volume - ranges.tv_min);
    if (vent.phase == RespiratoryPhase::EndInspiratory) s += inspiration_growth;
    return s;
  }

  void validate() const {
    if (!(air_hu <= base_lung_hu && base_lung_hu <= tissue_hu))
      throw std::invalid_argument(
          "PhantomSpec: need air_hu <= base_lung_hu <= tissue_hu");
    for (double s : {lung_semi_mm[0], lung_semi_mm[1], lung_semi_mm[2],
                     torso_semi_mm[0], torso_semi_mm[1], torso_semi_mm[2]})
      if (!(s > 0)) throw std::invalid_argument("PhantomSpec: semi-axes must be > 0");
    if (!(noise_hu >= 0) || !(texture_cell_mm > 0))
      throw std::invalid_argument("PhantomSpec: bad texture parameters");
    VentilationParams biggest;
    biggest.tidal_volume = ranges.tv_max;
    biggest.phase = RespiratoryPhase::EndInspiratory;
    const double s = lung_scale(biggest);
    if (max_torso_quadric_on_lung(s) >= 1.0)
      throw std::invalid_argument(
          "PhantomSpec: lungs exceed torso at maximum inflation");
  }

  /// Maximum of the torso quadric over the scaled lung surface. The lung
  /// center is offset along x only, so the maximization reduces to one
  /// dimension: g(t) = M (1 - t^2) + ((c + r t)/A)^2 with M the larger of
  /// the z/y axis ratios squared, stationary at t* = (r c/A^2)/(M - r^2/A^2).
  double max_torso_quadric_on_lung(double scale) const {
    const double rz = scale * lung_semi_mm[0] / torso_semi_mm[0];
    const double ry = scale * lung_semi_mm[1] / torso_semi_mm[1];
    const double m = std::max(rz * rz, ry * ry);
    const double r = scale * lung_semi_mm[2];
    const double a2 = torso_semi_mm[2] * torso_semi_mm[2];
    const double c = lung_offset_x_mm;
    auto g = [&](double t) { return m * (1.0 - t * t) + (c + r * t) * (c + r * t) / a2; };
    double best = std::max(g(-1.0), g(1.0));
    const double denom = m - r * r / a2;
    if (denom != 0.0) {
      const double t = std::clamp(r * c / a2 / denom, -1.0, 1.0);
      best = std::max(best, g(t));
    }
    return best;
  }
};

namespace detail {

// Smooth seeded value noise: uniform lattice values in [-1, 1] hashed from
// integer cell coordinates, trilinearly interpolated at the query point.
// Pure in (seed, position), so texture is shared across a pair.
inline double lattice_value(std::uint64_t seed, std::int64_t iz, std::int64_t iy,
                            std::int64_t ix) {
  const std::uint64_t packed = (static_cast<std::uint64_t>(iz + 4096) << 42) ^
                               (static_cast<std::uint64_t>(iy + 4096) << 21) ^
                               static_cast<std::uint64_t>(ix + 4096);
  const std::uint64_t h = mix64(stream_key(seed, kStreamTexture, packed));
  const double u = (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
  return 2.0 * u - 1.0;
}

inline double value_noise(std::uint64_t seed, double pz, double py, double px,
                          double cell_mm) {
  const double qz = pz / cell_mm, qy = py / cell_mm, qx = px / cell_mm;
  const double fz = std::floor(qz), fy = std::floor(qy), fx = std::floor(qx);
  const std::int64_t iz = static_cast<std::int64_t>(fz);
  const std::int64_t iy = static_cast<std::int64_t>(fy);
  const std::int64_t ix = static_cast<std::int64_t>(fx);
  const double tz = qz - fz, ty = qy - fy, tx = qx - fx;
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dz ? tz : 1.0 - tz) * (dy ? ty : 1.0 - ty) *
                         (dx ? tx : 1.0 - tx);
        acc += w * lattice_value(seed, iz + dz, iy + dy, ix + dx);
      }
  return acc;
}

}  // namespace detail

template <typename Scalar>
struct LabeledVolume {
  Volume<Scalar> ct;
  VoxelMask mask;  // exact lung-ellipsoid membership
};

/// Deterministic phantom CT plus its ground-truth lung mask.
template <typename Scalar = double>
LabeledVolume<Scalar> generate(const PhantomSpec& spec,
                               const VentilationParams& vent) {
  spec.validate();
  validate_ventilation(vent, spec.ranges);

  const Index nz = spec.dims[0], ny = spec.dims[1], nx = spec.dims[2];
  const double sz = spec.spacing[0], sy = spec.spacing[1], sx = spec.spacing[2];
  const double cz = 0.5 * static_cast<double>(nz) * sz;
  const double cy = 0.5 * static_cast<double>(ny) * sy;
  const double cx = 0.5 * static_cast<double>(nx) * sx;

  const double scale = spec.lung_scale(vent);
  const double laz = scale * spec.lung_semi_mm[0];
  const double lay = scale * spec.lung_semi_mm[1];
  const double lax = scale * spec.lung_semi_mm[2];
  const double lung_base =
      spec.base_lung_hu - spec.aeration_gain_peep * (vent.peep - spec.ranges.peep_min);
  const double dorsal_sign =
      vent.position == ImagingPosition::Supine ? 1.0 : -1.0;
  const double r2 = spec.airway_radius_mm * spec.airway_radius_mm;

  ArrayX<Scalar> hu = ArrayX<Scalar>::Constant(
      Volume<Scalar>::voxel_count(spec.dims), Scalar(spec.air_hu));
  VoxelMask mask(spec.dims, spec.spacing);

  parallel_for(nz, [&](Index z) {
    const double pz = (static_cast<double>(z) + 0.5) * sz - cz;
    for (Index y = 0; y < ny; ++y) {
      const double py = (static_cast<double>(y) + 0.5) * sy - cy;
      for (Index x = 0; x < nx; ++x) {
        const double px = (static_cast<double>(x) + 0.5) * sx - cx;
        const Index v = (z * ny + y) * nx + x;

        const double tq = (pz / spec.torso_semi_mm[0]) * (pz / spec.torso_semi_mm[0]) +
                          (py / spec.torso_semi_mm[1]) * (py / spec.torso_semi_mm[1]) +
                          (px / spec.torso_semi_mm[2]) * (px / spec.torso_semi_mm[2]);
        if (tq > 1.0) continue;  // air background
        double val = spec.tissue_hu;

        for (double side : {-1.0, 1.0}) {
          const double lx = px - side * spec.lung_offset_x_mm;
          const double lq = (pz / laz) * (pz / laz) + (py / lay) * (py / lay) +
                            (lx / lax) * (lx / lax);
          if (lq <= 1.0) {
            const double dep =
                std::clamp(dorsal_sign * py / lay, -1.0, 1.0);
            val = lung_base + spec.dorsal_gradient_hu * std::max(0.0, dep) +
                  spec.noise_hu *
                      detail::value_noise(spec.seed, pz, py, px,
                                          spec.texture_cell_mm);
            mask.at(z, y, x) = 1;
            break;
          }
        }

        // ventilation-independent airway bar joining the lung interiors
        if (std::abs(px) <= spec.lung_offset_x_mm && py * py + pz * pz <= r2)
          val = spec.airway_hu;

        hu[v] = Scalar(val);
      }
    }
  });
  return LabeledVolume<Scalar>{
      Volume<Scalar>(spec.dims, spec.spacing, std::move(hu)), std::move(mask)};
}

template <typename Scalar>
struct PhantomPair {
  LabeledVolume<Scalar> prior;
  LabeledVolume<Scalar> target;
};

/// Same anatomy and texture, different ventilation: the residual is
/// ventilation-driven by construction.
template <typename Scalar = double>
PhantomPair<Scalar> generate_pair(const PhantomSpec& spec,
                                  const VentilationParams& vent_prior,
                                  const VentilationParams& vent_target) {
  return PhantomPair<Scalar>{generate<Scalar>(spec, vent_prior),
                             generate<Scalar>(spec, vent_target)};
}

/// Uniform ventilation draw over the configured ranges; phase is a coin.
inline VentilationParams sample_ventilation(const NormalizationRanges& r,
                                            CounterRng& rng) {
  VentilationParams v;
  v.peep = r.peep_min + (r.peep_max - r.peep_min) * rng.uniform();
  v.tidal_volume = r.tv_min + (r.tv_max - r.tv_min) * rng.uniform();
  v.phase = rng.uniform() < 0.5 ? RespiratoryPhase::EndExpiratory
                                : RespiratoryPhase::EndInspiratory;
  return v;
}

struct ManifestRow {
  std::int64_t pair_id = 0;
  std::string prior_path;
  std::string target_path;
  std::string pa_path;
  std::string lat_path;
  VentilationParams vent_prior;
  VentilationParams vent_target;
  std::uint64_t seed = 0;  // per-pair anatomy seed
};

inline std::string manifest_header() {
  return "pair_id,prior_path,target_path,pa_path,lat_path,peep_prior,"
         "tv_prior,phase_prior,peep_target,tv_target,phase_target,seed";
}

/// Writes n_pairs of (prior, target, target DRRs) plus manifest.csv into
/// out_dir. File contents and manifest are pure functions of (spec minus
/// seed, ranges, seed, n_pairs).
template <typename Scalar = double>
std::vector<ManifestRow> build_dataset(const PhantomSpec& base_spec,
                                       int n_pairs,
                                       const NormalizationRanges& ranges,
                                       std::uint64_t seed,
                                       const std::string& out_dir,
                                       double mu_water = 0.02) {
  if (n_pairs < 0) throw std::invalid_argument("build_dataset: n_pairs < 0");
  if (ranges.peep_min < base_spec.ranges.peep_min ||
      ranges.peep_max > base_spec.ranges.peep_max ||
      ranges.tv_min < base_spec.ranges.tv_min ||
      ranges.tv_max > base_spec.ranges.tv_max)
    throw std::invalid_argument(
        "build_dataset: sampling ranges exceed spec ranges");
  std::filesystem::create_directories(out_dir);

  std::vector<ManifestRow> rows;
  rows.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    ManifestRow row;
    row.pair_id = i;
    row.seed = stream_key(seed, kStreamPairSeed, static_cast<std::uint64_t>(i));
    CounterRng vent_rng(
        stream_key(seed, kStreamVentDraw, static_cast<std::uint64_t>(i)));
    row.vent_prior = sample_ventilation(ranges, vent_rng);
    row.vent_target = sample_ventilation(ranges, vent_rng);

    PhantomSpec spec = base_spec;
    spec.seed = row.seed;
    const PhantomPair<Scalar> pair =
        generate_pair<Scalar>(spec, row.vent_prior, row.vent_target);

    std::ostringstream stem;
    stem << "pair_" << std::setw(4) << std::setfill('0') << i;
    const std::string base = out_dir + "/" + stem.str();
    row.prior_path = base + "_prior.rvol";
    row.target_path = base + "_target.rvol";
    row.pa_path = base + "_pa.rimg";
    row.lat_path = base + "_lat.rimg";

    write_rvol(row.prior_path, pair.prior.ct);
    write_rvol(row.target_path, pair.target.ct);
    write_rimg(row.pa_path, drr(pair.target.ct, View::PA, Scalar(mu_water)));
    write_rimg(row.lat_path, drr(pair.target.ct, View::LAT, Scalar(mu_water)));
    rows.push_back(std::move(row));
  }

  const std::string manifest_path = out_dir + "/manifest.csv";
  std::ofstream os(manifest_path);
  if (!os)
    throw std::runtime_error("build_dataset: cannot open " + manifest_path);
  os.precision(std::numeric_limits<double>::max_digits10);
  os << manifest_header() << "\n";
  for (const ManifestRow& r : rows) {
    os << r.pair_id << "," << r.prior_path << "," << r.target_path << ","
       << r.pa_path << "," << r.lat_path << "," << r.vent_prior.peep << ","
       << r.vent_prior.tidal_volume << "," << to_string(r.vent_prior.phase)
       << "," << r.vent_target.peep << "," << r.vent_target.tidal_volume << ","
       << to_string(r.vent_target.phase) << "," << r.seed << "\n";
  }
  if (!os)
    throw std::runtime_error("build_dataset: write failed for " + manifest_path);
  return rows;
}

/// Parses a manifest written by build_dataset. Paths are returned as
/// stored; callers resolve them relative to the manifest's directory if
/// they are not absolute.
inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != manifest_header())
    throw std::runtime_error("read_manifest: bad header in " + path);
  std::vector<ManifestRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 12)
      throw std::runtime_error("read_manifest: malformed row in " + path +
                               ": " + line);
    ManifestRow r;
    r.pair_id = std::stoll(f[0]);
    r.prior_path = f[1];
    r.target_path = f[2];
    r.pa_path = f[3];
    r.lat_path = f[4];
    r.vent_prior.peep = std::stod(f[5]);
    r.vent_prior.tidal_volume = std::stod(f[6]);
    r.vent_prior.phase = phase_from_string(f[7]);
    r.vent_target.peep = std::stod(f[8]);
    r.vent_target.tidal_volume = std::stod(f[9]);
    r.vent_target.phase = phase_from_string(f[10]);
    r.seed = std::stoull(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace resdiff
