#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include "resdiff/volume.hpp"

namespace resdiff {

// Axis-aligned parallel-beam geometry: PA integrates along y, LAT along x.
enum class View { PA, LAT };

inline const char* to_string(View v) { return v == View::PA ? "PA" : "LAT"; }

inline View view_from_string(const std::string& s) {
  if (s == "PA") return View::PA;
  if (s == "LAT") return View::LAT;
  throw std::invalid_argument("unknown view: " + s + " (expected PA or LAT)");
}

/// A 2D projection image. Pixel values are line integrals of attenuation
/// (attenuation * mm). Row-major with n_u rows and n_v columns; rows index
/// z, columns index the remaining in-plane axis (x for PA, y for LAT).
template <typename Scalar>
struct Radiograph {
  View view = View::PA;
  Index n_u = 0;
  Index n_v = 0;
  ArrayX<Scalar> data;

  Scalar at(Index u, Index v) const { return data[u * n_v + v]; }

  static Radiograph zeros(View view, Index n_u, Index n_v) {
    return Radiograph{view, n_u, n_v, ArrayX<Scalar>::Zero(n_u * n_v)};
  }
};

/// HU to linear attenuation: mu = mu_water * (HU/1000 + 1), floored at 0.
/// Water maps to mu_water, air (-1000 HU) to zero.
template <typename Scalar>
Volume<Scalar> hu_to_mu(const CTVolume<Scalar>& vol, Scalar mu_water) {
  if (!(mu_water > 0))
    throw std::invalid_argument("hu_to_mu: mu_water must be > 0");
  ArrayX<Scalar> mu =
      (mu_water * (vol.data() / Scalar(1000) + Scalar(1))).max(Scalar(0));
  return Volume<Scalar>(vol.dims(), vol.spacing(), std::move(mu));
}

/// Parallel-beam ray sum of an attenuation grid along the view axis,
/// scaled by the voxel spacing along that axis. The exactly linear
/// operator behind drr().
template <typename Scalar>
Radiograph<Scalar> project_attenuation(const Volume<Scalar>& mu, View view) {
  const auto [nz, ny, nx] = mu.dims();
  if (view == View::PA) {
    const Scalar sy = static_cast<Scalar>(mu.spacing()[1]);
    auto rad = Radiograph<Scalar>::zeros(View::PA, nz, nx);
    for (Index z = 0; z < nz; ++z)
      for (Index y = 0; y < ny; ++y)
        for (Index x = 0; x < nx; ++x)
          rad.data[z * nx + x] += mu.at(z, y, x) * sy;
    return rad;
  }
  const Scalar sx = static_cast<Scalar>(mu.spacing()[2]);
  auto rad = Radiograph<Scalar>::zeros(View::LAT, nz, ny);
  for (Index z = 0; z < nz; ++z)
    for (Index y = 0; y < ny; ++y)
      for (Index x = 0; x < nx; ++x)
        rad.data[z * ny + y] += mu.at(z, y, x) * sx;
  return rad;
}

/// Digitally reconstructed radiograph of a CT volume in HU.
template <typename Scalar>
Radiograph<Scalar> drr(const CTVolume<Scalar>& vol, View view,
                       Scalar mu_water = Scalar(0.02)) {
  return project_attenuation(hu_to_mu(vol, mu_water), view);
}

template <typename Scalar>
void require_radiograph_dims(const Radiograph<Scalar>& rad, const Dims3& dims,
                             const char* op) {
  const Index expect_v = rad.view == View::PA ? dims[2] : dims[1];
  if (rad.n_u != dims[0] || rad.n_v != expect_v)
    throw std::invalid_argument(
        std::string(op) + ": radiograph " + std::to_string(rad.n_u) + "x" +
        std::to_string(rad.n_v) + " inconsistent with volume dims " +
        dims_to_string(dims));
}

/// Smears a radiograph uniformly along its projection axis, dividing by
/// the ray path length (n * spacing along the axis). Re-projecting the
/// result with project_attenuation() reproduces the input exactly.
template <typename Scalar>
Volume<Scalar> back_project(const Radiograph<Scalar>& rad, const Dims3& dims,
                            const Spacing3& spacing) {
  require_radiograph_dims(rad, dims, "back_project");
  const auto [nz, ny, nx] = dims;
  ArrayX<Scalar> out(nz * ny * nx);
  if (rad.view == View::PA) {
    const Scalar norm = Scalar(1) / (Scalar(ny) * static_cast<Scalar>(spacing[1]));
    Index i = 0;
    for (Index z = 0; z < nz; ++z)
      for (Index y = 0; y < ny; ++y)
        for (Index x = 0; x < nx; ++x) out[i++] = rad.data[z * nx + x] * norm;
  } else {
    const Scalar norm = Scalar(1) / (Scalar(nx) * static_cast<Scalar>(spacing[2]));
    Index i = 0;
    for (Index z = 0; z < nz; ++z)
      for (Index y = 0; y < ny; ++y)
        for (Index x = 0; x < nx; ++x) out[i++] = rad.data[z * ny + y] * norm;
  }
  return Volume<Scalar>(dims, spacing, std::move(out));
}

/// Unnormalized smear scaled by the spacing along the projection axis:
/// the exact adjoint of project_attenuation() under the plain
/// sum-of-products inner product.
template <typename Scalar>
Volume<Scalar> back_project_unnormalized(const Radiograph<Scalar>& rad,
                                         const Dims3& dims,
                                         const Spacing3& spacing) {
  require_radiograph_dims(rad, dims, "back_project_unnormalized");
  const auto [nz, ny, nx] = dims;
  ArrayX<Scalar> out(nz * ny * nx);
  if (rad.view == View::PA) {
    const Scalar sy = static_cast<Scalar>(spacing[1]);
    Index i = 0;
    for (Index z = 0; z < nz; ++z)
      for (Index y = 0; y < ny; ++y)
        for (Index x = 0; x < nx; ++x) out[i++] = rad.data[z * nx + x] * sy;
  } else {
    const Scalar sx = static_cast<Scalar>(spacing[2]);
    Index i = 0;
    for (Index z = 0; z < nz; ++z)
      for (Index y = 0; y < ny; ++y)
        for (Index x = 0; x < nx; ++x) out[i++] = rad.data[z * ny + y] * sx;
  }
  return Volume<Scalar>(dims, spacing, std::move(out));
}

}  // namespace resdiff
