#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace resdiff {

using Index = Eigen::Index;

// Voxel counts (nz, ny, nx). Data is laid out z-major:
// index = (z * ny + y) * nx + x.
using Dims3 = std::array<Index, 3>;

// Physical voxel spacing (sz, sy, sx) in mm.
using Spacing3 = std::array<double, 3>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

inline std::string dims_to_string(const Dims3& d) {
  std::ostringstream os;
  os << "(" << d[0] << ", " << d[1] << ", " << d[2] << ")";
  return os.str();
}

/// A 3D scalar grid with physical spacing. Carries CT volumes in HU,
/// residuals in HU-difference units, and attenuation grids in 1/mm;
/// the unit convention is the caller's. Values are immutable after
/// construction and always finite.
template <typename Scalar>
class Volume {
 public:
  using Array = ArrayX<Scalar>;

  Volume() = default;

  Volume(Dims3 dims, Spacing3 spacing, Array data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    for (int a = 0; a < 3; ++a) {
      if (dims_[a] < 1)
        throw std::invalid_argument("Volume: dims must be >= 1, got " +
                                    dims_to_string(dims_));
      if (!(spacing_[a] > 0.0))
        throw std::invalid_argument("Volume: spacing must be > 0");
    }
    if (data_.size() != voxel_count(dims_))
      throw std::invalid_argument(
          "Volume: data length " + std::to_string(data_.size()) +
          " does not match dims " + dims_to_string(dims_));
    if (!data_.allFinite())
      throw std::invalid_argument("Volume: non-finite voxel values");
  }

  static Volume zeros(Dims3 dims, Spacing3 spacing) {
    return Volume(dims, spacing, Array::Zero(voxel_count(dims)));
  }

  static Volume constant(Dims3 dims, Spacing3 spacing, Scalar value) {
    return Volume(dims, spacing, Array::Constant(voxel_count(dims), value));
  }

  static Index voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  const Array& data() const { return data_; }
  Index size() const { return data_.size(); }

  Index index_of(Index z, Index y, Index x) const {
    return (z * dims_[1] + y) * dims_[2] + x;
  }

  Scalar at(Index z, Index y, Index x) const {
    return data_[index_of(z, y, x)];
  }

  bool same_geometry_as(const Volume& other) const {
    return dims_ == other.dims_ && spacing_ == other.spacing_;
  }

 private:
  Dims3 dims_{1, 1, 1};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  Array data_;
};

// Naming convention for call sites: CT volumes are in HU, residuals in
// HU-difference units. Both share the Volume representation.
template <typename Scalar>
using CTVolume = Volume<Scalar>;
template <typename Scalar>
using ResidualVolume = Volume<Scalar>;

template <typename Scalar>
void require_same_geometry(const Volume<Scalar>& a, const Volume<Scalar>& b,
                           const char* op) {
  if (!a.same_geometry_as(b))
    throw std::invalid_argument(std::string(op) + ": geometry mismatch, " +
                                dims_to_string(a.dims()) + " vs " +
                                dims_to_string(b.dims()));
}

/// Binary voxel labeling on the same grid layout as Volume.
struct VoxelMask {
  Dims3 dims{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;  // nonzero = inside

  VoxelMask() : data(1, 0) {}
  VoxelMask(const Dims3& d, const Spacing3& s)
      : dims(d),
        spacing(s),
        data(static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) *
                 static_cast<std::size_t>(d[2]),
             0) {}

  Index index_of(Index z, Index y, Index x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  std::uint8_t at(Index z, Index y, Index x) const {
    return data[static_cast<std::size_t>(index_of(z, y, x))];
  }
  std::uint8_t& at(Index z, Index y, Index x) {
    return data[static_cast<std::size_t>(index_of(z, y, x))];
  }
  Index count() const {
    Index n = 0;
    for (std::uint8_t v : data) n += v != 0;
    return n;
  }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
};

/// Elementwise target - prior over congruent volumes.
template <typename Scalar>
ResidualVolume<Scalar> residual(const CTVolume<Scalar>& target,
                                const CTVolume<Scalar>& prior) {
  require_same_geometry(target, prior, "residual");
  return ResidualVolume<Scalar>(target.dims(), target.spacing(),
                                target.data() - prior.data());
}

/// Elementwise prior + res; inverse of residual() up to rounding.
template <typename Scalar>
CTVolume<Scalar> recompose(const CTVolume<Scalar>& prior,
                           const ResidualVolume<Scalar>& res) {
  require_same_geometry(prior, res, "recompose");
  return CTVolume<Scalar>(prior.dims(), prior.spacing(),
                          prior.data() + res.data());
}

/// Min-max normalization onto [0, 1]. Out-of-range values are an error,
/// never clamped.
template <typename Scalar>
Scalar normalize_param(Scalar value, Scalar lo, Scalar hi) {
  if (!(hi > lo))
    throw std::invalid_argument("normalize_param: requires hi > lo");
  if (value < lo || value > hi) {
    std::ostringstream os;
    os << "normalize_param: value " << value << " outside [" << lo << ", "
       << hi << "]";
    throw std::out_of_range(os.str());
  }
  return (value - lo) / (hi - lo);
}

enum class RespiratoryPhase { EndInspiratory, EndExpiratory };
enum class ImagingPosition { Supine, Prone };

inline const char* to_string(RespiratoryPhase p) {
  return p == RespiratoryPhase::EndInspiratory ? "EndInspiratory"
                                               : "EndExpiratory";
}

inline RespiratoryPhase phase_from_string(const std::string& s) {
  if (s == "EndInspiratory") return RespiratoryPhase::EndInspiratory;
  if (s == "EndExpiratory") return RespiratoryPhase::EndExpiratory;
  throw std::invalid_argument("unknown respiratory phase: " + s);
}

/// Ventilator settings attached to a scan. Position is metadata only;
/// pairs are always formed within one position.
struct VentilationParams {
  double peep = 3.0;          // cm H2O
  double tidal_volume = 6.0;  // ml/kg
  RespiratoryPhase phase = RespiratoryPhase::EndExpiratory;
  ImagingPosition position = ImagingPosition::Supine;
};

/// Min-max bounds used to normalize ventilation parameters.
struct NormalizationRanges {
  double peep_min = 3.0;
  double peep_max = 15.0;
  double tv_min = 6.0;
  double tv_max = 12.0;
};

inline void validate_ventilation(const VentilationParams& v,
                                 const NormalizationRanges& r) {
  if (v.peep < r.peep_min || v.peep > r.peep_max) {
    std::ostringstream os;
    os << "ventilation: PEEP " << v.peep << " outside [" << r.peep_min << ", "
       << r.peep_max << "]";
    throw std::out_of_range(os.str());
  }
  if (v.tidal_volume < r.tv_min || v.tidal_volume > r.tv_max) {
    std::ostringstream os;
    os << "ventilation: tidal volume " << v.tidal_volume << " outside ["
       << r.tv_min << ", " << r.tv_max << "]";
    throw std::out_of_range(os.str());
  }
}

/// A sub-grid of a parent volume: origin and size in voxels, plus the
/// parent dims the origin refers to.
struct PatchSpec {
  Dims3 origin{0, 0, 0};
  Dims3 size{1, 1, 1};
  Dims3 parent_dims{1, 1, 1};

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (origin[a] < 0 || size[a] < 1 ||
          origin[a] + size[a] > parent_dims[a])
        throw std::invalid_argument(
            "PatchSpec: origin " + dims_to_string(origin) + " + size " +
            dims_to_string(size) + " exceeds parent dims " +
            dims_to_string(parent_dims));
    }
  }

  static PatchSpec full(const Dims3& dims) {
    return PatchSpec{{0, 0, 0}, dims, dims};
  }
};

/// Contiguous sub-grid copy; spacing is preserved.
template <typename Scalar>
Volume<Scalar> extract_patch(const Volume<Scalar>& vol, const PatchSpec& spec) {
  spec.validate();
  if (spec.parent_dims != vol.dims())
    throw std::invalid_argument("extract_patch: spec parent dims " +
                                dims_to_string(spec.parent_dims) +
                                " do not match volume dims " +
                                dims_to_string(vol.dims()));
  ArrayX<Scalar> out(Volume<Scalar>::voxel_count(spec.size));
  Index i = 0;
  for (Index z = 0; z < spec.size[0]; ++z)
    for (Index y = 0; y < spec.size[1]; ++y)
      for (Index x = 0; x < spec.size[2]; ++x)
        out[i++] = vol.at(spec.origin[0] + z, spec.origin[1] + y,
                          spec.origin[2] + x);
  return Volume<Scalar>(spec.size, vol.spacing(), std::move(out));
}

/// Scatter of a patch back into a copy of the parent at the same origin.
template <typename Scalar>
Volume<Scalar> insert_patch(const Volume<Scalar>& parent,
                            const Volume<Scalar>& patch, const Dims3& origin) {
  PatchSpec spec{origin, patch.dims(), parent.dims()};
  spec.validate();
  ArrayX<Scalar> out = parent.data();
  Index i = 0;
  for (Index z = 0; z < patch.dims()[0]; ++z)
    for (Index y = 0; y < patch.dims()[1]; ++y)
      for (Index x = 0; x < patch.dims()[2]; ++x)
        out[parent.index_of(origin[0] + z, origin[1] + y, origin[2] + x)] =
            patch.data()[i++];
  return Volume<Scalar>(parent.dims(), parent.spacing(), std::move(out));
}

/// Conditioning channel order. This layout is the denoiser input
/// contract; do not reorder.
enum ConditioningChannel : int {
  kChPriorCt = 0,
  kChBackProjPa = 1,
  kChBackProjLat = 2,
  kChPeep = 3,
  kChTidalVolume = 4,
  kChPhase = 5,
  kChCoordZ = 6,
  kChCoordY = 7,
  kChCoordX = 8,
};

constexpr int kConditioningChannels = 9;

/// Multi-channel grid congruent with one target patch: prior CT,
/// back-projected PA/LAT radiographs, broadcast ventilation parameters,
/// and per-axis patch-coordinate ramps.
template <typename Scalar>
struct ConditioningStack {
  Dims3 dims{1, 1, 1};
  std::array<ArrayX<Scalar>, kConditioningChannels> channels;

  Index voxels() const { return dims[0] * dims[1] * dims[2]; }
};

/// Assembles the 9-channel conditioning stack for one patch. Parameter
/// channels are spatially constant at their normalized values; coordinate
/// channels are linear ramps of the global voxel index normalized by
/// parent_dims - 1 (zero when an axis has a single voxel).
template <typename Scalar>
ConditioningStack<Scalar> build_conditioning(
    const CTVolume<Scalar>& prior_patch, const Volume<Scalar>& bp_pa,
    const Volume<Scalar>& bp_lat, const VentilationParams& vent,
    const PatchSpec& spec, const NormalizationRanges& ranges) {
  spec.validate();
  if (prior_patch.dims() != spec.size)
    throw std::invalid_argument("build_conditioning: prior patch dims " +
                                dims_to_string(prior_patch.dims()) +
                                " do not match patch size " +
                                dims_to_string(spec.size));
  require_same_geometry(prior_patch, bp_pa, "build_conditioning[pa]");
  require_same_geometry(prior_patch, bp_lat, "build_conditioning[lat]");
  validate_ventilation(vent, ranges);

  const Index n = prior_patch.size();
  ConditioningStack<Scalar> stack;
  stack.dims = spec.size;
  stack.channels[kChPriorCt] = prior_patch.data();
  stack.channels[kChBackProjPa] = bp_pa.data();
  stack.channels[kChBackProjLat] = bp_lat.data();

  const Scalar peep_norm = normalize_param<Scalar>(
      static_cast<Scalar>(vent.peep), static_cast<Scalar>(ranges.peep_min),
      static_cast<Scalar>(ranges.peep_max));
  const Scalar tv_norm = normalize_param<Scalar>(
      static_cast<Scalar>(vent.tidal_volume),
      static_cast<Scalar>(ranges.tv_min), static_cast<Scalar>(ranges.tv_max));
  const Scalar phase_flag =
      vent.phase == RespiratoryPhase::EndInspiratory ? Scalar(1) : Scalar(0);
  stack.channels[kChPeep] = ArrayX<Scalar>::Constant(n, peep_norm);
  stack.channels[kChTidalVolume] = ArrayX<Scalar>::Constant(n, tv_norm);
  stack.channels[kChPhase] = ArrayX<Scalar>::Constant(n, phase_flag);

  for (int axis = 0; axis < 3; ++axis) {
    ArrayX<Scalar> ramp(n);
    const Index parent = spec.parent_dims[axis];
    Index i = 0;
    for (Index z = 0; z < spec.size[0]; ++z)
      for (Index y = 0; y < spec.size[1]; ++y)
        for (Index x = 0; x < spec.size[2]; ++x) {
          const Index local = axis == 0 ? z : (axis == 1 ? y : x);
          const Index global = spec.origin[axis] + local;
          ramp[i++] = parent > 1 ? static_cast<Scalar>(global) /
                                       static_cast<Scalar>(parent - 1)
                                 : Scalar(0);
        }
    stack.channels[kChCoordZ + axis] = std::move(ramp);
  }
  return stack;
}

}  // namespace resdiff
