#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "driftalign/deform_field.hpp"
#include "driftalign/ingest.hpp"
#include "driftalign/lie.hpp"
#include "driftalign/point_cloud.hpp"
#include "driftalign/spatial.hpp"

namespace driftalign {

/// Per-frame unknowns: a camera correction applied on top of the ingested
/// pose (effective camera = exp(xi_g) * pose0) and a deformation field acting
/// in camera space before the camera transform.
struct FrameState {
  int frame_id = 0;
  RigidTransform pose0;
  Twist xi_g;
  DeformationField field;
  bool field_enabled = true;  // false: field treated as zero

  RigidTransform camera() const { return twist_exp(xi_g) * pose0; }
};

/// Deformed positions of a batch of camera-space points plus what backprop needs.
struct DeformBatch {
  RigidTransform camera;
  std::vector<Vec3> world;
  std::vector<Mat3> local_rotation;  // rotation part of exp(F(p)); identity when the field is off
  Matrix6X twists;
  DeformationField::Tape tape;
  bool field_used = false;
};

/// world = camera * exp(F(p_cam)) p_cam. `use_field` = false skips the field.
void deform_points(const FrameState& state, std::span<const Vec3> cam, bool use_field, DeformBatch& out);

/// Gradient of a scalar w.r.t. one frame's unknowns.
struct FrameGrad {
  Vec6 xi_g = Vec6::Zero();
  std::vector<double> field;

  void reset(size_t field_size) {
    xi_g.setZero();
    field.assign(field_size, 0.0);
  }
};

/// Camera-space vectors carried along by the deformation (normals, color
/// gradients): world vector = R_camera R_local v_cam.
struct VectorTerm {
  std::span<const Vec3> cam;
  std::span<const Vec3> grad;  // d(loss)/d(world vector)
};

/// Chains d(loss)/d(world position) (and optional rotated-vector gradients)
/// back to xi_g and the field parameters of the frame.
void backprop_points(const FrameState& state, std::span<const Vec3> cam, const DeformBatch& batch,
                     std::span<const Vec3> grad_world, std::span<const VectorTerm> vectors, FrameGrad& grad);

/// Forward deformation of a camera-space cloud to world; normals are rotated
/// when present.
PointCloud apply_forward(const PointCloud& cam_cloud, const FrameState& state);

/// Nearest-model-point associations of deformed frame points.
struct Association {
  uint32_t point;  // index into the frame's points
  uint32_t model;  // index into the model
};

/// Pairs (i, nn(i)) with |p_i - q|^2 < d_max^2, restricted to `subset` when it is non-empty.
std::vector<Association> associate(std::span<const Vec3> deformed, const NeighborIndex& model_index, double d_max,
                                   std::span<const uint32_t> subset = {});

/// Model-side data used by the stage-1 losses.
struct ModelView {
  const PointCloud* cloud = nullptr;        // world positions + unit normals
  const ColorGradient* gradients = nullptr;  // d_q and I(q)
};

struct LossValue {
  double value = 0.0;
  size_t count = 0;
  bool empty() const { return count == 0; }
};

/// Point-to-plane term: mean over associations of ((p' - q) . n_q)^2. Adds
/// weight * d/dp' into grad_world (sized like `deformed`).
LossValue loss_data(std::span<const Vec3> deformed, std::span<const Association> assoc, const ModelView& model,
                    std::span<Vec3> grad_world, double weight = 1.0);

/// Colored-ICP term: mean of (I(q) + d_q . (proj_q(p') - q) - I(p'))^2 with
/// point intensities fixed.
LossValue loss_color(std::span<const Vec3> deformed, std::span<const double> intensities,
                     std::span<const Association> assoc, const ModelView& model, std::span<Vec3> grad_world,
                     double weight = 1.0);

/// A correspondence resolved against the current frame: the destination is a
/// bilinear blend of up to four frame points, the source a fixed world point.
struct CorrTerm {
  Vec3 source = Vec3::Zero();
  uint32_t corner[4] = {0, 0, 0, 0};
  double beta[4] = {0, 0, 0, 0};
  double w = 1.0;
};

/// sum_i w_i |src_i - dst_i|^2 / sum_i w_i.
LossValue loss_corr(std::span<const Vec3> deformed, std::span<const CorrTerm> terms, std::span<Vec3> grad_world,
                    double weight = 1.0);

/// Lookup from pixel coordinates to point indices on a frame's stride grid.
class PixelGrid {
 public:
  PixelGrid() = default;
  /// Point i of `pixels` gets index offset + i.
  PixelGrid(std::span<const PixelCoord> pixels, int stride, int width, int height, int64_t offset = 0);
  /// Bilinear corners and weights of a sub-pixel location; false when any
  /// corner with non-zero weight has no point.
  bool bilinear(const Vec2& px, uint32_t corner[4], double beta[4]) const;
  int64_t at(int u, int v) const;

 private:
  int stride_ = 1, cols_ = 0, rows_ = 0;
  std::vector<int64_t> cell_;
};

// ---------------------------------------------------------------------------

struct AlignParams {
  std::vector<double> s_vox = {0.04, 0.02};
  std::vector<double> d_max = {0.05, 0.03};
  std::vector<int> iters = {50, 150};
  double lr_camera = 1e-3;
  double lr_field = 1e-3;
  double lambda_color = 0.05;
  double lambda_corr = 1.0;
  double lambda_tv = 10.0;
  double theta_d = 75.0;
  double theta_c = 75.0;
  double sigma_d = 2.5;
  double sigma_c = 1.5;
  int max_correspondences = 5000;
  int max_pairs = 20;
  int tv_samples = 1024;
  int normal_k = 16;
  double color_radius_factor = 2.0;  // color-gradient radius = factor * s_vox of the scale
  int unalignable_patience = 10;
  bool freeze_field = false;
  FieldConfig field;  // finest_cell and seed are filled per frame
  double field_padding = 0.1;
  uint64_t seed = 0;
};

/// Adaptive MAD thresholds over per-frame residual percentiles.
struct MergeStats {
  std::vector<double> g_d, g_c;
  double tau_d = std::numeric_limits<double>::infinity();
  double tau_c = std::numeric_limits<double>::infinity();

  bool bootstrapping() const { return g_d.size() < 2; }
  /// Appends the frame's percentiles and recomputes both thresholds.
  void append(double gd, double gc, double sigma_d, double sigma_c);
};

double median(std::vector<double> values);
/// Median absolute deviation (unscaled).
double mad(const std::vector<double>& values);

/// Per-point residuals of a frame against the model at its final state.
struct FrameResiduals {
  std::vector<double> data;   // ((p' - q).n_q)^2 to the nearest model point
  std::vector<double> color;  // squared color residual to the same point
  std::vector<uint8_t> inlier;  // nearest model point within d_max
};

struct MergeDecision {
  std::vector<size_t> accepted;
  double g_d = 0.0, g_c = 0.0;
  double tau_d = 0.0, tau_c = 0.0;
  bool bootstrap = false;
};

/// Gates the frame's points with the thresholds accumulated so far, then
/// appends its percentiles to the history. Bootstrap frames keep every inlier.
MergeDecision merge_frame(const FrameResiduals& residuals, MergeStats& stats, const AlignParams& params);

FrameResiduals compute_residuals(std::span<const Vec3> deformed, std::span<const double> intensities,
                                 const NeighborIndex& model_index, const ModelView& model, double d_max);

/// Input of one frame: camera-space points with colors, confidences and pixel provenance.
struct FrameInput {
  int frame_id = 0;
  CameraModel camera;
  PointCloud cam_cloud;
  int stride = 1;
};

enum class FrameStatus { Reference, Merged, Unalignable };
std::string to_string(FrameStatus s);
FrameStatus frame_status_from(const std::string& s);

struct FrameReport {
  int frame_id = 0;
  FrameStatus status = FrameStatus::Merged;
  size_t points = 0;
  size_t accepted = 0;
  size_t correspondences = 0;
  double final_energy = 0.0;
  double inlier_fraction = 0.0;
  double g_d = 0.0, g_c = 0.0, tau_d = 0.0, tau_c = 0.0;
  bool bootstrap = false;
};

/// Progress of one alignment iteration; returned by align_frame for diagnostics.
struct IterationLog {
  int scale = 0;
  double energy = 0.0, data = 0.0, color = 0.0, corr = 0.0, tv = 0.0;
  size_t inliers = 0;
};

/// Everything align_frame needs about the current model.
struct ModelContext {
  const PointCloud* model = nullptr;
  const NeighborIndex* index = nullptr;
  std::vector<ColorGradient> gradients;  // one per scale
};

struct AlignResult {
  FrameState state;
  bool unalignable = false;
  std::vector<IterationLog> log;
};

/// Coarse-to-fine optimization of one frame against a fixed model. The field
/// is only optimized on the finest scale.
AlignResult align_frame(const ModelContext& model, FrameState state, const FrameInput& frame,
                        std::span<const CorrTerm> corr, const AlignParams& params);

/// Builds the per-scale color gradients of a model.
ModelContext make_model_context(const PointCloud& model, const NeighborIndex& index, const AlignParams& params);

/// Correspondences of frame `dst` against already-merged frames, resolved to
/// CorrTerms. Sources are ranked by frustum overlap.
struct MergedFrame {
  int frame_id = 0;
  CameraModel camera;  // ingested camera (for overlap ranking)
  PixelGrid grid;      // pixel -> model index
};

std::vector<CorrTerm> resolve_correspondences(const CorrespondenceSet& set, const FrameInput& dst,
                                              const std::vector<MergedFrame>& merged, const PointCloud& model,
                                              const AlignParams& params);

struct Stage1Result {
  PointCloud model;  // world positions, normals, pixels
  std::vector<FrameState> states;
  MergeStats stats;
  std::vector<FrameReport> reports;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Sequential frame-to-model alignment; frames[0] is the reference.
Stage1Result run_stage1(const std::vector<FrameInput>& frames, const CorrespondenceSet& corr,
                        const AlignParams& params, const ProgressFn& progress = {});

/// Field for frame `frame_id` with bounds around its camera-space points.
DeformationField make_frame_field(const AlignParams& params, std::span<const Vec3> cam_points, int frame_id);

/// Normals of a world cloud oriented toward each point's camera center.
void update_model_normals(PointCloud& model, const std::vector<FrameState>& states, int k);

}  // namespace driftalign
