#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "driftalign/icp.hpp"
#include "driftalign/image_io.hpp"
#include "driftalign/ingest.hpp"

namespace driftalign {

struct Texture {
  std::string kind = "noise";  // "noise" | "checker"
  Vec3 base = Vec3::Constant(0.6);
  double contrast = 0.5;
  double frequency = 6.0;  // noise: lattice cells per meter; checker: squares per meter
  int octaves = 3;
};

struct Primitive {
  std::string type = "sphere";  // "plane" | "sphere" | "box"
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitY();  // plane: surface normal
  Vec2 half_size = Vec2(0.5, 0.5);  // plane: half extents of the patch
  double radius = 0.1;              // sphere
  Vec3 half_extents = Vec3::Constant(0.1);  // box (axis-aligned)
  Texture texture;
};

struct OrbitSpec {
  int count = 12;
  double radius = 1.0;
  double height = 0.75;
  double arc_deg = 120.0;
  Vec3 target = Vec3(0.0, 0.08, 0.0);
};

struct WarpSpec {
  int kernels = 4;
  double bandwidth = 0.25;     // kernel sigma, meters
  double max_magnitude = 0.03;  // largest displacement on the surface, meters
  double rotation_share = 0.5;  // relative scale of the rotational twist part
};

struct OutlierSpec {
  std::vector<int> frames;
  double fraction = 0.1;
  double offset = 0.5;  // meters along the viewing ray
};

struct CorrespondenceSpec {
  int per_pair = 150;
  int max_gap = 0;  // only pairs with dst - src <= max_gap; 0 = all pairs
  double corruption = 0.0;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::vector<CameraModel> cameras;  // explicit trajectory; empty -> orbit
  OrbitSpec orbit;
  int width = 160;
  int height = 120;
  double fov_deg = 60.0;  // horizontal
  WarpSpec warp;
  double depth_noise = 0.002;
  double conf_alpha = 0.7;
  double conf_beta = 0.2;
  int edge_radius = 4;
  double camera_noise_rot = 0.0;    // radians, per axis, frames >= 1
  double camera_noise_trans = 0.0;  // meters, per axis, frames >= 1
  OutlierSpec outliers;
  CorrespondenceSpec correspondences;
  int surface_samples = 200000;
  uint64_t seed = 1;

  /// Desk-scale default: ground patch, sphere and box under a 12-view orbit.
  static SceneSpec desk();
  void validate() const;
  /// The explicit camera list (orbit expanded when `cameras` is empty).
  std::vector<CameraModel> trajectory() const;
};

SceneSpec read_scene_spec(const std::filesystem::path& path);
void write_scene_spec(const std::filesystem::path& path, const SceneSpec& spec);

struct WarpKernel {
  Vec3 center = Vec3::Zero();
  double sigma = 0.25;
  Twist xi;
};

/// W(x) = x + sum_j phi_j(x) (exp(xi_j)(x - c_j) + c_j - x), phi_j Gaussian.
class Warp {
 public:
  Warp() = default;
  explicit Warp(std::vector<WarpKernel> kernels);

  const std::vector<WarpKernel>& kernels() const { return kernels_; }
  bool identity() const { return kernels_.empty(); }
  Vec3 displacement(const Vec3& x) const;
  Vec3 apply(const Vec3& x) const { return x + displacement(x); }
  /// Fixed-point inverse, optionally warm-started.
  Vec3 inverse(const Vec3& y, const Vec3* guess = nullptr) const;

 private:
  std::vector<WarpKernel> kernels_;
  std::vector<RigidTransform> exp_;
};

/// Canonical (unwarped) scene: signed distance, color and normals.
class SceneGeometry {
 public:
  explicit SceneGeometry(std::vector<Primitive> primitives);
  double sdf(const Vec3& x, int* id = nullptr) const;
  Vec3 normal(const Vec3& x) const;
  Vec3 color(const Vec3& x, int id) const;
  const std::vector<Primitive>& primitives() const { return prims_; }

  struct Hit {
    double t = 0.0;     // distance along the unit ray
    Vec3 canonical;     // pre-image of the hit under the warp
    int primitive = -1;
  };
  /// First intersection of the ray with the warped surface W(S).
  std::optional<Hit> raycast(const Vec3& origin, const Vec3& dir, const Warp& warp, double t_max = 10.0) const;

 private:
  std::vector<Primitive> prims_;
};

struct GroundTruth {
  std::vector<int> frame_ids;
  std::vector<Warp> warps;
  std::vector<CameraModel> true_cameras;
  std::vector<CameraModel> ingested_cameras;
  std::vector<Raster<float>> exact_depth;
  std::vector<Raster<float>> outlier_mask;
  PointCloud surface_samples;

  size_t slot(int frame_id) const;
  /// <dir>/gt as written by generate().
  static GroundTruth load(const std::filesystem::path& scene_dir);
};

/// Renders the scene into `out_dir` (ingest layout plus gt/).
GroundTruth generate(const SceneSpec& spec, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// metrics

struct ChamferReport {
  double mean_cloud_to_gt = 0.0, mean_gt_to_cloud = 0.0;
  double median_cloud_to_gt = 0.0, median_gt_to_cloud = 0.0;
  double mean() const { return 0.5 * (mean_cloud_to_gt + mean_gt_to_cloud); }
  double median() const { return 0.5 * (median_cloud_to_gt + median_gt_to_cloud); }
};

/// Symmetric nearest-neighbor distances; `samples` > 0 subsamples the GT set.
ChamferReport metric_chamfer(const PointCloud& cloud, const PointCloud& gt_samples, size_t samples = 0,
                             uint64_t seed = 0);

/// Mean over points of the RMS distance of the point's k nearest neighbors
/// (itself included) to their best-fit plane.
double metric_thickness(const PointCloud& cloud, int k = 16);

/// Median over GT surface points visible in each non-reference frame of
/// |forward(p_cam) - W^-1(true camera(p_cam))|, with p_cam from exact depth.
double metric_deformation_error(const std::vector<FrameState>& states, const GroundTruth& gt, int stride = 2);

}  // namespace driftalign
