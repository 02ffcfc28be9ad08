#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Geometry>

#include "driftalign/icp.hpp"

namespace driftalign {

struct InverseParams {
  int m_per_frame = 4096;
  int holdout_per_frame = 512;
  int iters = 2000;
  int batch = 2048;
  double lambda_tv = 10.0;
  double tv_offset = 0.02;
  int tv_samples = 256;
  double lr = 1e-3;
  FieldConfig field;  // embedding_dim / num_views filled in by make_inverse_field
  int embedding_dim = 8;
  double padding = 0.1;
  uint64_t seed = 0;
};

/// (view, p_cam, p0): view indexes the frame state list.
struct TrainingPair {
  int view = 0;
  Vec3 p_cam = Vec3::Zero();
  Vec3 p0 = Vec3::Zero();
};

struct TrainingPairSet {
  std::vector<TrainingPair> records;
};

/// Uniform sample of up to m_per_frame points per frame, pushed through the
/// frame's forward deformation. When `holdout` is given, up to
/// `holdout_per_frame` points per frame (at most a quarter of the frame) are
/// set aside first and never used for training.
TrainingPairSet sample_pairs(const std::vector<FrameState>& states, const std::vector<std::vector<Vec3>>& frame_points,
                             int m_per_frame, uint64_t seed, std::vector<std::vector<Vec3>>* holdout = nullptr,
                             int holdout_per_frame = 0);

/// Largest |forward(p_cam) - p0| over the set (0 for a consistent set).
double verify_pairs(const TrainingPairSet& pairs, const std::vector<FrameState>& states);

/// The inverse field's input for a pair: the canonical point pulled back by
/// the frame's rigid camera, R^T (p0 - t).
Vec3 inverse_input(const FrameState& state, const Vec3& p0);

DeformationField make_inverse_field(const InverseParams& params, const TrainingPairSet& pairs,
                                    const std::vector<FrameState>& states);

/// mean_i |exp(F(x_i, v_i)) x_i - target_i|^2; adds weight * gradient to `grad` when non-empty.
double inverse_loss(const DeformationField& field, std::span<const Vec3> inputs, std::span<const int> views,
                    std::span<const Vec3> targets, std::span<double> grad, double weight = 1.0);

struct InverseReport {
  double final_loss = 0.0;  // L_inverse over all pairs
  std::vector<double> history;
};

InverseReport train_inverse(const TrainingPairSet& pairs, const std::vector<FrameState>& states,
                            DeformationField& field, const InverseParams& params, const ProgressFn& progress = {});

/// Camera-space estimate of a canonical point seen from view `view`.
Vec3 apply_inverse(const DeformationField& field, const FrameState& state, int view, const Vec3& p0);

/// |F^-1(F(p)) - p| for camera-space points of one frame.
std::vector<double> roundtrip_errors(const DeformationField& field, const FrameState& state, int view,
                                     std::span<const Vec3> cam_points);

// ---------------------------------------------------------------------------
// splats

inline constexpr double kY00 = 0.2820947917738781;

inline Vec3 color_from_sh0(const Vec3& sh) { return (sh * kY00).array() + 0.5; }
/// (rgb - 0.5) / Y00, nudged by a few ulps where needed so that
/// color_from_sh0 reproduces rgb bit-exactly.
Vec3 sh0_from_color(const Vec3& rgb);

struct Splat {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();  // columns (t1, t2, n)
  double scale[2] = {0.0, 0.0};
  double opacity = 0.1;
  Vec3 sh0 = Vec3::Zero();
};

struct SplatSet {
  std::vector<Splat> splats;
};

struct SplatParams {
  size_t target_count = 0;  // 0: export every point
  int k = 10;
  double opacity = 0.1;
  uint64_t seed = 0;
};

/// Uniform subsample of the canonical cloud converted to 2D Gaussian disks.
SplatSet export_splats(const PointCloud& canonical, const SplatParams& params);

/// Linear: scales and opacity stored as-is. Activated: log scales and logit
/// opacity, the encoding most splat viewers expect.
enum class SplatEncoding { Linear, Activated };

void write_splat_ply(const std::filesystem::path& path, const SplatSet& set,
                     SplatEncoding encoding = SplatEncoding::Linear);
SplatSet read_splat_ply(const std::filesystem::path& path, SplatEncoding encoding = SplatEncoding::Linear);

}  // namespace driftalign
