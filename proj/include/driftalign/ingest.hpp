#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "driftalign/image_io.hpp"
#include "driftalign/lie.hpp"
#include "driftalign/point_cloud.hpp"

namespace driftalign {

/// Pinhole camera; (R, t) maps camera to world: p_world = R p_cam + t.
struct CameraModel {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  int width = 0;
  int height = 0;

  RigidTransform pose() const { return {R, t}; }
  Vec3 center() const { return t; }
  /// K^-1 [u, v, 1]^T: camera-space point at unit depth for pixel coordinates (u, v).
  Vec3 ray(double u, double v) const;
  /// Pixel coordinates of a camera-space point with positive depth.
  std::optional<Vec2> project(const Vec3& p_cam) const;
  void validate() const;
};

struct FrameBundle {
  Raster<float> depth;       // meters, 0 = invalid
  Raster<float> confidence;  // >= 0
  RgbImage image;
  CameraModel camera;
  int frame_id = 0;
};

struct Correspondence {
  int src_frame = 0;
  int dst_frame = 0;
  Vec2 src = Vec2::Zero();  // pixel coordinates, may be fractional
  Vec2 dst = Vec2::Zero();
  double w = 1.0;
};

struct CorrespondenceSet {
  std::vector<Correspondence> records;
};

struct Scene {
  std::vector<FrameBundle> frames;  // sorted by frame_id
  CorrespondenceSet correspondences;

  const FrameBundle& frame(int frame_id) const;
};

std::filesystem::path frame_path(const std::filesystem::path& dir, int frame_id, const char* suffix);

/// Reads frame_%04d.{depth.pfm,conf.pfm,png,cam.json} and correspondences.csv.
Scene load_scene(const std::filesystem::path& dir);
void write_frame(const std::filesystem::path& dir, const FrameBundle& frame);
void write_correspondences(const std::filesystem::path& path, const CorrespondenceSet& set);
CorrespondenceSet read_correspondences(const std::filesystem::path& path);
void write_camera_json(const std::filesystem::path& path, const CameraModel& cam);
CameraModel read_camera_json(const std::filesystem::path& path);

/// One point per valid depth pixel on the stride grid, in world coordinates.
PointCloud unproject(const FrameBundle& frame, int stride);
/// Same points in camera coordinates (K^-1 [u,v,1] d), before the pose.
PointCloud unproject_camera(const FrameBundle& frame, int stride);

/// Inclusive percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double pct);

/// Indices of points kept by the voxelized confidence filter, in input order.
std::vector<size_t> voxel_confidence_filter_indices(const PointCloud& cloud, double voxel_size, double theta_loc,
                                                    double theta_cnt);
PointCloud voxel_confidence_filter(const PointCloud& cloud, double voxel_size, double theta_loc, double theta_cnt);

enum class FilterScope { Global, PerFrame };

/// Filters per-frame world clouds either with statistics over their union
/// (Global) or frame by frame. Returns kept indices per frame.
std::vector<std::vector<size_t>> filter_frames(const std::vector<PointCloud>& world_clouds, double voxel_size,
                                               double theta_loc, double theta_cnt, FilterScope scope);

}  // namespace driftalign
