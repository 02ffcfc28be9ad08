#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace driftalign {

/// Row-major H x W raster.
template <typename T>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, const T& fill = T()) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

  T& operator()(int u, int v) { return data[static_cast<size_t>(v) * width + u]; }
  const T& operator()(int u, int v) const { return data[static_cast<size_t>(v) * width + u]; }
  bool contains(int u, int v) const { return u >= 0 && v >= 0 && u < width && v < height; }
  bool same_size(int w, int h) const { return width == w && height == h; }
};

using RgbImage = Raster<Eigen::Vector3f>;

/// Grayscale PFM ("Pf"), little-endian, rows stored bottom-to-top.
void write_pfm(const std::filesystem::path& path, const Raster<float>& image);
Raster<float> read_pfm(const std::filesystem::path& path);

/// 8-bit RGB PNG; values are quantized from / expanded to [0,1].
void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

}  // namespace driftalign
