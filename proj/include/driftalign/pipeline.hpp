#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "driftalign/checkpoint.hpp"
#include "driftalign/config.hpp"
#include "driftalign/synth.hpp"

namespace driftalign {

/// Switches that remove one ingredient of the full method.
struct Ablation {
  bool only_rigid = false;  // deformation fields frozen at zero
  bool no_corr = false;     // lambda_corr = 0
  bool no_filt = false;     // skip the voxel confidence filter
  bool no_global = false;   // skip stage 2
  bool no_inv = false;      // skip the inverse field

  /// Names: only-rigid, no-corr, no-filt, no-global, no-inv.
  static Ablation parse(const std::vector<std::string>& names);
  /// Comma-separated active switches, "full" when none.
  std::string name() const;
  Config apply(Config config) const;
};

/// Ingested frames converted to stage-1 input (optionally filtered).
struct PreparedScene {
  Scene scene;
  std::vector<FrameInput> frames;
  PointCloud unaligned;  // world points of all frames under the ingested cameras
};

PreparedScene prepare_scene(const std::filesystem::path& scene_dir, const Config& config, bool filter);

/// Camera-space position of every model point, read back from the depth maps
/// through the point's pixel provenance.
std::vector<Vec3> model_camera_positions(const Scene& scene, const PointCloud& model);

/// Identity states under the ingested cameras (the "unaligned" baseline).
std::vector<FrameState> ingested_states(const Scene& scene);

Checkpoint run_align(const std::filesystem::path& scene_dir, const Config& config, bool filter,
                     const ProgressFn& progress = {});
/// Requires a stage-1 (or later) checkpoint.
Checkpoint run_refine(const Checkpoint& ckpt, const Config& config, const ProgressFn& progress = {});

struct InverseOutcome {
  DeformationField field;
  InverseReport report;
  double roundtrip_median = 0.0;
  double roundtrip_p90 = 0.0;
  size_t holdout = 0;
};

InverseOutcome run_invert(const Checkpoint& ckpt, const Config& config, const ProgressFn& progress = {});
SplatSet run_export(const Checkpoint& ckpt, const Config& config);

/// stage -> metric -> value; std::map keeps keys sorted for stable output.
using StageMetrics = std::map<std::string, double>;
using MetricReport = std::map<std::string, StageMetrics>;

/// Cloud metrics, plus GT metrics when `gt` is given (deformation error also
/// needs `states`).
StageMetrics cloud_metrics(const PointCloud& cloud, const std::vector<FrameState>* states, const GroundTruth* gt,
                           const MetricParams& params);

/// Ground truth for a scene directory (or its gt/ subdirectory), if present.
std::optional<GroundTruth> find_ground_truth(const std::filesystem::path& dir);

std::string metrics_json(const MetricReport& report, const std::string& config_hash, const std::string& ablation);

struct PipelineResult {
  MetricReport metrics;
  std::map<std::string, double> wall_seconds;
};

/// All stages into `out_dir`: align/, refine/, inverse_field.bin, splats.ply,
/// metrics.json and report.json.
PipelineResult run_pipeline(const std::filesystem::path& scene_dir, const std::filesystem::path& out_dir,
                            const Config& config, const Ablation& ablation, const ProgressFn& progress = {});

}  // namespace driftalign
