#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "driftalign/icp.hpp"

namespace driftalign {

/// Alignment state after stage 1 ("align") or stage 2 ("refine").
///
/// On disk: <dir>/checkpoint.json, <dir>/model.ply (world positions with
/// pixel provenance) and <dir>/field_%04d.bin per frame.
struct Checkpoint {
  std::string stage = "align";
  std::filesystem::path scene_dir;
  std::string config_json;
  PointCloud model;
  std::vector<FrameState> states;
  MergeStats stats;
  std::vector<FrameReport> reports;
  std::vector<double> global_energy;
  bool global_halted = false;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace driftalign
