#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "driftalign/types.hpp"

namespace driftalign {

struct PixelCoord {
  int32_t u = 0;
  int32_t v = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

/// Structure-of-arrays point container. `normals` and `pixels` may be empty;
/// when present every array has the same length. A zero normal marks a point
/// whose normal could not be estimated.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;  // RGB in [0,1]
  std::vector<Vec3> normals;
  std::vector<double> confidences;
  std::vector<int32_t> frame_ids;
  std::vector<PixelCoord> pixels;

  size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_pixels() const { return !pixels.empty(); }
  bool normal_valid(size_t i) const { return has_normals() && normals[i].squaredNorm() > 0.5; }

  void reserve(size_t n);
  /// Appends point i of `other`. Both clouds must carry the same optional arrays.
  void push_back_from(const PointCloud& other, size_t i);
  PointCloud subset(std::span<const size_t> indices) const;
  void append(const PointCloud& other);

  /// Throws Error("invariant") when array lengths disagree or a normal is
  /// neither unit length (within 1e-6) nor zero.
  void validate() const;
};

/// Luma used for all color-intensity terms.
inline double intensity(const Vec3& rgb) { return 0.299 * rgb.x() + 0.587 * rgb.y() + 0.114 * rgb.z(); }

/// Binary little-endian PLY: x,y,z float; red,green,blue uchar; nx,ny,nz float;
/// confidence float; frame_id int. Pixel provenance is written as two extra
/// int properties u,v when present.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

}  // namespace driftalign
