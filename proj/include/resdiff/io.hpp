#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resdiff/projection.hpp"
#include "resdiff/volume.hpp"

// On-disk formats use little-endian 32-bit float payloads.
static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace resdiff {

namespace detail {

inline void write_f32_block(std::ostream& os, const float* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p),
           static_cast<std::streamsize>(n * sizeof(float)));
}

inline std::vector<float> read_f32_block(std::istream& is, std::size_t n,
                                         const std::string& what) {
  std::vector<float> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float))
    throw std::runtime_error(what + ": short payload");
  return buf;
}

inline std::string read_header_line(std::istream& is,
                                    const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(what + ": truncated header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RVOL: "RVOL1\n" then "nz ny nx sz sy sx\n" as decimal text, then
// nz*ny*nx little-endian 32-bit floats in z-major order.

template <typename Scalar>
void write_rvol(const std::string& path, const Volume<Scalar>& vol) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_rvol: cannot open " + path);
  os << "RVOL1\n";
  os.precision(std::numeric_limits<double>::max_digits10);
  os << vol.dims()[0] << " " << vol.dims()[1] << " " << vol.dims()[2] << " "
     << vol.spacing()[0] << " " << vol.spacing()[1] << " " << vol.spacing()[2]
     << "\n";
  std::vector<float> buf(static_cast<std::size_t>(vol.size()));
  for (Index i = 0; i < vol.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(vol.data()[i]);
  detail::write_f32_block(os, buf.data(), buf.size());
  if (!os) throw std::runtime_error("write_rvol: write failed for " + path);
}

template <typename Scalar>
Volume<Scalar> read_rvol(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_rvol: cannot open " + path);
  const std::string magic = detail::read_header_line(is, "read_rvol");
  if (magic != "RVOL1")
    throw std::runtime_error("read_rvol: bad magic in " + path);
  std::istringstream hdr(detail::read_header_line(is, "read_rvol"));
  Dims3 dims;
  Spacing3 spacing;
  hdr >> dims[0] >> dims[1] >> dims[2] >> spacing[0] >> spacing[1] >>
      spacing[2];
  if (!hdr) throw std::runtime_error("read_rvol: malformed header in " + path);
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw std::runtime_error("read_rvol: invalid dims in " + path);
  const std::size_t n = static_cast<std::size_t>(dims[0]) *
                        static_cast<std::size_t>(dims[1]) *
                        static_cast<std::size_t>(dims[2]);
  const std::vector<float> buf = detail::read_f32_block(is, n, "read_rvol");
  ArrayX<Scalar> data(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    data[static_cast<Index>(i)] = static_cast<Scalar>(buf[i]);
  return Volume<Scalar>(dims, spacing, std::move(data));
}

// ---------------------------------------------------------------------------
// RIMG: "RIMG1\n" then "view n_u n_v\n", then n_u*n_v little-endian
// 32-bit floats row-major.

template <typename Scalar>
void write_rimg(const std::string& path, const Radiograph<Scalar>& rad) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_rimg: cannot open " + path);
  os << "RIMG1\n" << to_string(rad.view) << " " << rad.n_u << " " << rad.n_v
     << "\n";
  std::vector<float> buf(static_cast<std::size_t>(rad.data.size()));
  for (Index i = 0; i < rad.data.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(rad.data[i]);
  detail::write_f32_block(os, buf.data(), buf.size());
  if (!os) throw std::runtime_error("write_rimg: write failed for " + path);
}

template <typename Scalar>
Radiograph<Scalar> read_rimg(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_rimg: cannot open " + path);
  const std::string magic = detail::read_header_line(is, "read_rimg");
  if (magic != "RIMG1")
    throw std::runtime_error("read_rimg: bad magic in " + path);
  std::istringstream hdr(detail::read_header_line(is, "read_rimg"));
  std::string view;
  Index n_u = 0, n_v = 0;
  hdr >> view >> n_u >> n_v;
  if (!hdr) throw std::runtime_error("read_rimg: malformed header in " + path);
  if (n_u < 1 || n_v < 1)
    throw std::runtime_error("read_rimg: invalid dims in " + path);
  const std::size_t n =
      static_cast<std::size_t>(n_u) * static_cast<std::size_t>(n_v);
  const std::vector<float> buf = detail::read_f32_block(is, n, "read_rimg");
  Radiograph<Scalar> rad;
  rad.view = view_from_string(view);
  rad.n_u = n_u;
  rad.n_v = n_v;
  rad.data.resize(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    rad.data[static_cast<Index>(i)] = static_cast<Scalar>(buf[i]);
  if (!rad.data.allFinite())
    throw std::runtime_error("read_rimg: non-finite pixels in " + path);
  return rad;
}

}  // namespace resdiff
