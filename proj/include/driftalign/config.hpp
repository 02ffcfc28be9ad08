#pragma once

#include <filesystem>
#include <string>

#include "driftalign/global_refine.hpp"
#include "driftalign/icp.hpp"
#include "driftalign/ingest.hpp"
#include "driftalign/inverse.hpp"

namespace driftalign {

inline constexpr int kDefaultsVersion = 1;

struct FilterParams {
  double voxel = 0.04;
  double theta_loc = 15.0;
  double theta_cnt = 50.0;
  FilterScope scope = FilterScope::Global;
};

struct MetricParams {
  size_t chamfer_samples = 0;  // 0: all GT samples
  int thickness_k = 16;
  int deformation_stride = 2;
};

/// Every pipeline knob. Seeds of the individual stages derive from `seed`.
struct Config {
  int defaults_version = kDefaultsVersion;
  int stride = 1;
  uint64_t seed = 0;
  FilterParams filter;
  AlignParams align;
  GlobalParams global;
  InverseParams inverse;
  SplatParams splat;
  MetricParams metrics;

  /// Throws Error("config") naming the first violated constraint.
  void validate() const;

  AlignParams align_params() const;
  GlobalParams global_params() const;
  InverseParams inverse_params() const;
  SplatParams splat_params() const;

  /// Stable 16-hex-digit FNV-1a digest of the canonical JSON dump.
  std::string hash() const;
};

/// Canonical JSON (fixed key order) of the full configuration.
std::string config_to_json(const Config& config, int indent = 2);
/// Unknown keys and type mismatches are errors; absent keys keep defaults.
Config config_from_json(const std::string& text);
Config load_config(const std::filesystem::path& path);

}  // namespace driftalign
