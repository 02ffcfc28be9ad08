#pragma once

#include <vector>

#include "driftalign/icp.hpp"

namespace driftalign {

struct GlobalParams {
  int iters = 100;
  double lambda_anchor = 50.0;
  double lambda_color = 0.05;
  double d_max = 0.03;
  int neighbors = 5;
  int anchor_samples = 2048;
  double lr_camera = 1e-3;
  double lr_field = 1e-3;
  double color_radius = 0.04;
  int divergence_patience = 20;
  bool freeze_field = false;
  uint64_t seed = 0;
};

/// The merged model split by frame, with every point in its frame's camera
/// space. Normals and color gradients are carried in camera space too and
/// rotate with the deformation.
struct GlobalProblem {
  std::vector<std::vector<Vec3>> cam;
  std::vector<std::vector<Vec3>> normal_cam;
  std::vector<std::vector<Vec3>> gradient_cam;
  std::vector<std::vector<double>> intensity;
  std::vector<std::vector<size_t>> model_index;  // back-reference into the model
  std::vector<uint8_t> fixed;                    // frames that only act as targets
};

/// `cam_positions[i]` is model point i in its frame's camera space; `states`
/// are ordered like the frames, and model frame_ids refer to them.
GlobalProblem build_global_problem(const PointCloud& model, std::span<const Vec3> cam_positions,
                                   const std::vector<FrameState>& states, double color_radius);

/// Anchor samples and the twists/camera corrections at stage entry.
struct GlobalSnapshot {
  std::vector<std::vector<uint32_t>> anchors;  // indices into problem.cam[f]
  std::vector<Matrix6X> twists;
  std::vector<Twist> xi_g;
};

GlobalSnapshot take_snapshot(const GlobalProblem& problem, const std::vector<FrameState>& states, int samples,
                             uint64_t seed);

/// A point p of frame a paired with a point q of another frame b.
struct CrossPair {
  uint32_t frame_a, point_a, frame_b, point_b;
};

/// Current world geometry of every frame.
struct GlobalGeometry {
  std::vector<DeformBatch> batches;
};

void deform_all(const GlobalProblem& problem, const std::vector<FrameState>& states, bool use_field,
                GlobalGeometry& geometry);

/// Up to k nearest points of other frames within d_max, for every point.
std::vector<CrossPair> find_cross_pairs(const GlobalProblem& problem, const GlobalGeometry& geometry, int k,
                                        double d_max);

struct GlobalLossValue {
  double data = 0.0;
  double color = 0.0;
  size_t pairs = 0;
};

/// Point-to-plane and color terms averaged over pairs; gradients flow to
/// both endpoints. `grads` (one per frame) may be empty to skip gradients.
GlobalLossValue global_losses(const GlobalProblem& problem, const std::vector<FrameState>& states,
                              const GlobalGeometry& geometry, std::span<const CrossPair> pairs, double lambda_color,
                              std::vector<FrameGrad>* grads);

/// (1/N) sum_i [ mean_k |F_i(a_k) - xi0_k|^2 + |xi_g,i - xi0_g,i|^2 ] over the
/// N non-fixed frames. Adds `weight` times its gradient to `grads` when given.
double anchor_loss(const GlobalProblem& problem, const std::vector<FrameState>& states,
                   const GlobalSnapshot& snapshot, std::vector<FrameGrad>* grads, double weight = 1.0);

struct GlobalResult {
  std::vector<FrameState> states;
  PointCloud model;  // re-deformed canonical cloud
  std::vector<double> energy;
  bool halted = false;
};

GlobalResult run_global(const PointCloud& model, std::span<const Vec3> cam_positions, std::vector<FrameState> states,
                        const GlobalParams& params, const ProgressFn& progress = {});

}  // namespace driftalign
