#include "driftalign/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <png.h>

#include "driftalign/types.hpp"

namespace driftalign {

void write_pfm(const std::filesystem::path& path, const Raster<float>& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << "Pf\n" << image.width << " " << image.height << "\n-1.0\n";
  for (int v = image.height - 1; v >= 0; --v) {
    out.write(reinterpret_cast<const char*>(&image(0, v)), static_cast<std::streamsize>(sizeof(float) * image.width));
  }
  if (!out) throw Error("io", "write failed: " + path.string());
}

Raster<float> read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();  // single whitespace before the payload
  if (magic != "Pf") throw Error("io", path.string() + ": not a grayscale PFM");
  if (w <= 0 || h <= 0) throw Error("io", path.string() + ": bad PFM dimensions");
  if (scale > 0.0) throw Error("io", path.string() + ": big-endian PFM is not supported");
  Raster<float> img(w, h);
  for (int v = h - 1; v >= 0; --v) {
    if (!in.read(reinterpret_cast<char*>(&img(0, v)), static_cast<std::streamsize>(sizeof(float) * w))) {
      throw Error("io", path.string() + ": truncated PFM payload");
    }
  }
  return img;
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("io", "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("io", "PNG encode failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(image.width) * 3);
  for (int v = 0; v < image.height; ++v) {
    for (int u = 0; u < image.width; ++u) {
      for (int c = 0; c < 3; ++c) {
        const float x = std::clamp(image(u, v)[c], 0.0f, 1.0f);
        row[static_cast<size_t>(u) * 3 + c] = static_cast<png_byte>(std::lround(x * 255.0f));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RgbImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("io", "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("io", "PNG decode failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  RgbImage img(w, h);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int v = 0; v < h; ++v) {
    png_read_row(png, row.data(), nullptr);
    for (int u = 0; u < w; ++u) {
      img(u, v) = Eigen::Vector3f(row[u * 3], row[u * 3 + 1], row[u * 3 + 2]) / 255.0f;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace driftalign
