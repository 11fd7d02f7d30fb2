#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "resdiff/volume.hpp"

namespace resdiff {

/// Aeration HU window, closed interval.
inline constexpr double kNormallyAeratedLowHu = -900.0;
inline constexpr double kNormallyAeratedHighHu = -500.0;

/// HU-threshold segmentation parameters. Voxels inside [hu_min, hu_max]
/// are lung candidates; the largest connected component that does not
/// touch the volume boundary is kept (outside air is in range at -1000 HU
/// but always touches the boundary, which is what rules it out).
struct ThresholdConfig {
  double hu_min = -1000.0;
  double hu_max = -200.0;
};

/// Ground-truth mask passthrough. The mask must match the volume grid and
/// be non-empty; an all-background mask is an error, not a silent zero.
template <typename Scalar>
VoxelMask segment_lung(const Volume<Scalar>& vol, const VoxelMask& gt_mask) {
  if (gt_mask.dims != vol.dims())
    throw std::invalid_argument("segment_lung: mask dims " +
                                dims_to_string(gt_mask.dims) +
                                " do not match volume dims " +
                                dims_to_string(vol.dims()));
  if (gt_mask.count() == 0)
    throw std::runtime_error("segment_lung: empty lung mask");
  return gt_mask;
}

/// Threshold fallback: 6-connected components of in-range voxels,
/// boundary-touching components dropped, largest interior component kept.
template <typename Scalar>
VoxelMask segment_lung(const Volume<Scalar>& vol, const ThresholdConfig& cfg) {
  if (!(cfg.hu_min <= cfg.hu_max))
    throw std::invalid_argument("segment_lung: hu_min > hu_max");
  const Index nz = vol.dims()[0], ny = vol.dims()[1], nx = vol.dims()[2];
  const Index n = vol.size();
  const auto& hu = vol.data();

  std::vector<std::int32_t> label(static_cast<std::size_t>(n), -1);
  auto in_range = [&](Index v) {
    const double h = static_cast<double>(hu[v]);
    return h >= cfg.hu_min && h <= cfg.hu_max;
  };

  std::int32_t n_components = 0;
  std::vector<Index> comp_size;
  std::vector<std::uint8_t> comp_touches;
  std::vector<Index> stack;
  for (Index start = 0; start < n; ++start) {
    if (label[static_cast<std::size_t>(start)] >= 0 || !in_range(start)) continue;
    const std::int32_t id = n_components++;
    comp_size.push_back(0);
    comp_touches.push_back(0);
    stack.push_back(start);
    label[static_cast<std::size_t>(start)] = id;
    while (!stack.empty()) {
      const Index v = stack.back();
      stack.pop_back();
      ++comp_size[static_cast<std::size_t>(id)];
      const Index z = v / (ny * nx);
      const Index y = (v / nx) % ny;
      const Index x = v % nx;
      if (z == 0 || z == nz - 1 || y == 0 || y == ny - 1 || x == 0 ||
          x == nx - 1)
        comp_touches[static_cast<std::size_t>(id)] = 1;
      const Index neighbors[6] = {v - ny * nx, v + ny * nx, v - nx,
                                  v + nx,      v - 1,       v + 1};
      const bool ok[6] = {z > 0, z < nz - 1, y > 0, y < ny - 1, x > 0,
                          x < nx - 1};
      for (int k = 0; k < 6; ++k) {
        if (!ok[k]) continue;
        const Index u = neighbors[k];
        if (label[static_cast<std::size_t>(u)] < 0 && in_range(u)) {
          label[static_cast<std::size_t>(u)] = id;
          stack.push_back(u);
        }
      }
    }
  }

  std::int32_t best = -1;
  Index best_size = 0;
  for (std::int32_t c = 0; c < n_components; ++c) {
    if (comp_touches[static_cast<std::size_t>(c)]) continue;
    if (comp_size[static_cast<std::size_t>(c)] > best_size) {
      best = c;
      best_size = comp_size[static_cast<std::size_t>(c)];
    }
  }
  if (best < 0) throw std::runtime_error("segment_lung: empty lung mask");

  VoxelMask mask(vol.dims(), vol.spacing());
  for (Index v = 0; v < n; ++v)
    if (label[static_cast<std::size_t>(v)] == best)
      mask.data[static_cast<std::size_t>(v)] = 1;
  return mask;
}

inline double lung_volume_ml(const VoxelMask& mask) {
  return static_cast<double>(mask.count()) * mask.voxel_volume_mm3() / 1000.0;
}

/// Dice overlap 2|A∩B| / (|A| + |B|); 1 for two empty masks.
inline double mask_dice(const VoxelMask& a, const VoxelMask& b) {
  if (a.dims != b.dims)
    throw std::invalid_argument("mask_dice: dims mismatch");
  Index inter = 0, total = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool ia = a.data[i] != 0, ib = b.data[i] != 0;
    inter += ia && ib;
    total += ia;
    total += ib;
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

struct AerationReport {
  double lung_volume_ml = 0;
  double normally_aerated_fraction = 0;
  Index lung_voxels = 0;
  Index normally_aerated_voxels = 0;
  Index below_range_voxels = 0;  // HU < -900 within the mask
  Index above_range_voxels = 0;  // HU > -500 within the mask
};

template <typename Scalar>
AerationReport aeration_report(const Volume<Scalar>& vol, const VoxelMask& mask) {
  if (mask.dims != vol.dims())
    throw std::invalid_argument("aeration_report: mask dims mismatch");
  AerationReport rep;
  const auto& hu = vol.data();
  for (Index v = 0; v < vol.size(); ++v) {
    if (mask.data[static_cast<std::size_t>(v)] == 0) continue;
    ++rep.lung_voxels;
    const double h = static_cast<double>(hu[v]);
    if (h < kNormallyAeratedLowHu)
      ++rep.below_range_voxels;
    else if (h > kNormallyAeratedHighHu)
      ++rep.above_range_voxels;
    else
      ++rep.normally_aerated_voxels;
  }
  if (rep.lung_voxels == 0)
    throw std::runtime_error("aeration_report: empty lung mask");
  rep.lung_volume_ml = lung_volume_ml(mask);
  rep.normally_aerated_fraction =
      static_cast<double>(rep.normally_aerated_voxels) /
      static_cast<double>(rep.lung_voxels);
  return rep;
}

template <typename Scalar>
double normally_aerated_fraction(const Volume<Scalar>& vol,
                                 const VoxelMask& mask) {
  return aeration_report(vol, mask).normally_aerated_fraction;
}

struct BlandAltman {
  double bias = 0;
  double loa_low = 0;
  double loa_high = 0;
};

/// d = a - b; bias = mean(d); limits = bias -/+ 1.96 * sample sd(d).
inline BlandAltman bland_altman(const ArrayX<double>& a, const ArrayX<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("bland_altman: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("bland_altman: need n >= 2");
  const ArrayX<double> d = a - b;
  const double bias = d.mean();
  const double var =
      (d - bias).square().sum() / static_cast<double>(d.size() - 1);
  const double sd = std::sqrt(var);
  return BlandAltman{bias, bias - 1.96 * sd, bias + 1.96 * sd};
}

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r_squared = 0;
  double pearson_r = 0;
};

/// Ordinary least squares of y on x with r^2 = 1 - SS_res/SS_tot and the
/// product-moment correlation. Constant x or constant y is degenerate.
inline LinearFit linear_fit(const ArrayX<double>& x, const ArrayX<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("linear_fit: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("linear_fit: need n >= 2");
  const double mx = x.mean(), my = y.mean();
  const ArrayX<double> dx = x - mx, dy = y - my;
  const double sxx = dx.square().sum();
  const double syy = dy.square().sum();
  const double sxy = (dx * dy).sum();
  if (sxx == 0) throw std::invalid_argument("linear_fit: degenerate fit, constant x");
  if (syy == 0) throw std::invalid_argument("linear_fit: degenerate fit, constant y");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  const double ss_res = (dy - fit.slope * dx).square().sum();
  fit.r_squared = 1.0 - ss_res / syy;
  fit.pearson_r = sxy / std::sqrt(sxx * syy);
  return fit;
}

struct AgreementReport {
  double bias = 0;
  double loa_low = 0;
  double loa_high = 0;
  double slope = 0;
  double intercept = 0;
  double r_squared = 0;
  double pearson_r = 0;
};

inline AgreementReport make_agreement_report(const ArrayX<double>& original,
                                             const ArrayX<double>& generated) {
  const BlandAltman ba = bland_altman(original, generated);
  const LinearFit fit = linear_fit(original, generated);
  return AgreementReport{ba.bias,  ba.loa_low,    ba.loa_high,   fit.slope,
                         fit.intercept, fit.r_squared, fit.pearson_r};
}

template <typename Scalar>
struct StudyPair {
  std::int64_t pair_id = 0;
  Volume<Scalar> original;
  Volume<Scalar> generated;
};

struct PairMetricRow {
  std::int64_t pair_id = 0;
  std::string metric;
  double original = 0;
  double generated = 0;
  double difference = 0;  // original - generated
  double mean = 0;
};

struct AgreementStudyResult {
  std::vector<PairMetricRow> rows;
  AgreementReport lung_volume;
  AgreementReport aeration;
};

/// Lung volume and aeration agreement across pairs. Both sides are
/// segmented the same way (per-volume threshold segmentation), mirroring a
/// protocol where each CT is segmented independently.
template <typename Scalar>
AgreementStudyResult agreement_study(const std::vector<StudyPair<Scalar>>& pairs,
                                     const ThresholdConfig& seg = {}) {
  if (pairs.size() < 2)
    throw std::invalid_argument("agreement_study: need at least 2 pairs");
  const Index n = static_cast<Index>(pairs.size());
  ArrayX<double> lv_orig(n), lv_gen(n), af_orig(n), af_gen(n);
  AgreementStudyResult result;
  for (Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    require_same_geometry(p.original, p.generated, "agreement_study");
    const VoxelMask m_orig = segment_lung(p.original, seg);
    const VoxelMask m_gen = segment_lung(p.generated, seg);
    const AerationReport r_orig = aeration_report(p.original, m_orig);
    const AerationReport r_gen = aeration_report(p.generated, m_gen);
    lv_orig[i] = r_orig.lung_volume_ml;
    lv_gen[i] = r_gen.lung_volume_ml;
    af_orig[i] = r_orig.normally_aerated_fraction;
    af_gen[i] = r_gen.normally_aerated_fraction;
    result.rows.push_back(PairMetricRow{p.pair_id, "lung_volume_ml",
                                        lv_orig[i], lv_gen[i],
                                        lv_orig[i] - lv_gen[i],
                                        0.5 * (lv_orig[i] + lv_gen[i])});
    result.rows.push_back(PairMetricRow{p.pair_id, "aeration_fraction",
                                        af_orig[i], af_gen[i],
                                        af_orig[i] - af_gen[i],
                                        0.5 * (af_orig[i] + af_gen[i])});
  }
  result.lung_volume = make_agreement_report(lv_orig, lv_gen);
  result.aeration = make_agreement_report(af_orig, af_gen);
  return result;
}

inline void write_pair_rows_csv(const std::string& path,
                                const std::vector<PairMetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_pair_rows_csv: cannot open " + path);
  os.precision(std::numeric_limits<double>::max_digits10);
  os << "pair_id,metric,original,generated,difference,mean\n";
  for (const auto& r : rows)
    os << r.pair_id << "," << r.metric << "," << r.original << ","
       << r.generated << "," << r.difference << "," << r.mean << "\n";
  if (!os) throw std::runtime_error("write_pair_rows_csv: write failed for " + path);
}

inline void write_summary_csv(const std::string& path,
                              const AgreementStudyResult& result) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_summary_csv: cannot open " + path);
  os.precision(std::numeric_limits<double>::max_digits10);
  os << "metric,bias,loa_low,loa_high,slope,intercept,r_squared,pearson_r\n";
  auto line = [&](const char* name, const AgreementReport& r) {
    os << name << "," << r.bias << "," << r.loa_low << "," << r.loa_high << ","
       << r.slope << "," << r.intercept << "," << r.r_squared << ","
       << r.pearson_r << "\n";
  };
  line("lung_volume_ml", result.lung_volume);
  line("aeration_fraction", result.aeration);
  if (!os) throw std::runtime_error("write_summary_csv: write failed for " + path);
}

}  // namespace resdiff
