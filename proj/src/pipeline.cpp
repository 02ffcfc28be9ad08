#include "driftalign/pipeline.hpp"

#include <chrono>
#include <fstream>

#include <json.hpp>

namespace driftalign {

using json = nlohmann::ordered_json;

Ablation Ablation::parse(const std::vector<std::string>& names) {
  Ablation a;
  for (const auto& n : names) {
    if (n == "only-rigid") {
      a.only_rigid = true;
    } else if (n == "no-corr") {
      a.no_corr = true;
    } else if (n == "no-filt") {
      a.no_filt = true;
    } else if (n == "no-global") {
      a.no_global = true;
    } else if (n == "no-inv") {
      a.no_inv = true;
    } else if (n != "none" && n != "full") {
      throw Error("config", "unknown ablation '" + n + "'");
    }
  }
  return a;
}

std::string Ablation::name() const {
  std::string s;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += n;
  };
  add(only_rigid, "only-rigid");
  add(no_corr, "no-corr");
  add(no_filt, "no-filt");
  add(no_global, "no-global");
  add(no_inv, "no-inv");
  return s.empty() ? "full" : s;
}

Config Ablation::apply(Config c) const {
  if (only_rigid) {
    c.align.freeze_field = true;
    c.global.freeze_field = true;
  }
  if (no_corr) c.align.lambda_corr = 0.0;
  return c;
}

PreparedScene prepare_scene(const std::filesystem::path& scene_dir, const Config& config, bool filter) {
  PreparedScene p;
  p.scene = load_scene(scene_dir);
  std::vector<PointCloud> world;
  std::vector<PointCloud> cam;
  for (const auto& f : p.scene.frames) {
    world.push_back(unproject(f, config.stride));
    cam.push_back(unproject_camera(f, config.stride));
  }
  std::vector<std::vector<size_t>> kept(world.size());
  if (filter) {
    kept = filter_frames(world, config.filter.voxel, config.filter.theta_loc, config.filter.theta_cnt,
                         config.filter.scope);
  } else {
    for (size_t f = 0; f < world.size(); ++f) {
      kept[f].resize(world[f].size());
      for (size_t i = 0; i < kept[f].size(); ++i) kept[f][i] = i;
    }
  }
  for (size_t f = 0; f < world.size(); ++f) {
    const auto& fb = p.scene.frames[f];
    p.frames.push_back({fb.frame_id, fb.camera, cam[f].subset(kept[f]), config.stride});
    p.unaligned.append(world[f].subset(kept[f]));
  }
  return p;
}

std::vector<Vec3> model_camera_positions(const Scene& scene, const PointCloud& model) {
  if (!model.has_pixels()) throw Error("invariant", "model lacks pixel provenance");
  std::vector<Vec3> out(model.size());
  for (size_t i = 0; i < model.size(); ++i) {
    const FrameBundle& f = scene.frame(model.frame_ids[i]);
    const auto [u, v] = model.pixels[i];
    if (!f.depth.contains(u, v)) throw Error("invariant", "model pixel outside its frame");
    out[i] = f.camera.ray(u, v) * static_cast<double>(f.depth(u, v));
  }
  return out;
}

std::vector<FrameState> ingested_states(const Scene& scene) {
  std::vector<FrameState> states;
  for (const auto& f : scene.frames) {
    FrameState s;
    s.frame_id = f.frame_id;
    s.pose0 = f.camera.pose();
    s.field_enabled = false;
    states.push_back(std::move(s));
  }
  return states;
}

namespace {

Checkpoint align_prepared(const PreparedScene& prep, const std::filesystem::path& scene_dir, const Config& config,
                          const ProgressFn& progress) {
  Stage1Result r = run_stage1(prep.frames, prep.scene.correspondences, config.align_params(), progress);
  Checkpoint ck;
  ck.stage = "align";
  ck.scene_dir = std::filesystem::absolute(scene_dir);
  ck.config_json = config_to_json(config, -1);
  ck.model = std::move(r.model);
  ck.states = std::move(r.states);
  ck.stats = std::move(r.stats);
  ck.reports = std::move(r.reports);
  return ck;
}

std::vector<std::vector<Vec3>> per_frame_points(const Checkpoint& ck, const std::vector<Vec3>& cam) {
  std::vector<std::vector<Vec3>> out(ck.states.size());
  for (size_t i = 0; i < ck.model.size(); ++i) {
    const int id = ck.model.frame_ids[i];
    for (size_t f = 0; f < ck.states.size(); ++f) {
      if (ck.states[f].frame_id == id) {
        out[f].push_back(cam[i]);
        break;
      }
    }
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Checkpoint run_align(const std::filesystem::path& scene_dir, const Config& config, bool filter,
                     const ProgressFn& progress) {
  return align_prepared(prepare_scene(scene_dir, config, filter), scene_dir, config, progress);
}

Checkpoint run_refine(const Checkpoint& ckpt, const Config& config, const ProgressFn& progress) {
  if (ckpt.stage != "align" && ckpt.stage != "refine") {
    throw Error("stage", "refine needs an aligned checkpoint (found stage '" + ckpt.stage + "')");
  }
  const Scene scene = load_scene(ckpt.scene_dir);
  const auto cam = model_camera_positions(scene, ckpt.model);
  GlobalResult g = run_global(ckpt.model, cam, ckpt.states, config.global_params(), progress);
  Checkpoint out = ckpt;
  out.stage = "refine";
  out.config_json = config_to_json(config, -1);
  out.model = std::move(g.model);
  out.states = std::move(g.states);
  out.global_energy = std::move(g.energy);
  out.global_halted = g.halted;
  return out;
}

InverseOutcome run_invert(const Checkpoint& ckpt, const Config& config, const ProgressFn& progress) {
  const Scene scene = load_scene(ckpt.scene_dir);
  const auto cam = model_camera_positions(scene, ckpt.model);
  const auto points = per_frame_points(ckpt, cam);
  const InverseParams params = config.inverse_params();
  std::vector<std::vector<Vec3>> holdout;
  const TrainingPairSet pairs =
      sample_pairs(ckpt.states, points, params.m_per_frame, params.seed, &holdout, params.holdout_per_frame);
  if (pairs.records.empty()) throw Error("domain", "inverse: no training pairs");
  InverseOutcome out;
  out.field = make_inverse_field(params, pairs, ckpt.states);
  out.report = train_inverse(pairs, ckpt.states, out.field, params, progress);
  std::vector<double> errors;
  for (size_t f = 0; f < ckpt.states.size(); ++f) {
    if (holdout[f].empty()) continue;
    const auto e = roundtrip_errors(out.field, ckpt.states[f], static_cast<int>(f), holdout[f]);
    errors.insert(errors.end(), e.begin(), e.end());
  }
  out.holdout = errors.size();
  if (!errors.empty()) {
    out.roundtrip_median = percentile(errors, 50.0);
    out.roundtrip_p90 = percentile(std::move(errors), 90.0);
  }
  return out;
}

SplatSet run_export(const Checkpoint& ckpt, const Config& config) {
  if (!ckpt.model.has_normals()) throw Error("invariant", "export needs model normals");
  return export_splats(ckpt.model, config.splat_params());
}

StageMetrics cloud_metrics(const PointCloud& cloud, const std::vector<FrameState>* states, const GroundTruth* gt,
                           const MetricParams& params) {
  StageMetrics m;
  m["points"] = static_cast<double>(cloud.size());
  m["thickness"] = metric_thickness(cloud, params.thickness_k);
  if (gt) {
    const ChamferReport c = metric_chamfer(cloud, gt->surface_samples, params.chamfer_samples, 0);
    m["chamfer_mean"] = c.mean();
    m["chamfer_median"] = c.median();
    m["chamfer_median_cloud_to_gt"] = c.median_cloud_to_gt;
    m["chamfer_median_gt_to_cloud"] = c.median_gt_to_cloud;
    if (states) m["deformation_error"] = metric_deformation_error(*states, *gt, params.deformation_stride);
  }
  return m;
}

std::optional<GroundTruth> find_ground_truth(const std::filesystem::path& dir) {
  if (std::filesystem::is_directory(dir / "gt")) return GroundTruth::load(dir);
  if (dir.filename() == "gt" && std::filesystem::is_directory(dir)) return GroundTruth::load(dir.parent_path());
  return std::nullopt;
}

std::string metrics_json(const MetricReport& report, const std::string& config_hash, const std::string& ablation) {
  json j;
  j["ablation"] = ablation;
  j["config_hash"] = config_hash;
  json stages = json::object();
  for (const auto& [stage, metrics] : report) {
    json s = json::object();
    for (const auto& [k, v] : metrics) s[k] = v;
    stages[stage] = s;
  }
  j["stages"] = stages;
  return j.dump(2) + "\n";
}

PipelineResult run_pipeline(const std::filesystem::path& scene_dir, const std::filesystem::path& out_dir,
                            const Config& base, const Ablation& ablation, const ProgressFn& progress) {
  const Config config = ablation.apply(base);
  config.validate();
  std::filesystem::create_directories(out_dir);
  PipelineResult res;
  const auto gt = find_ground_truth(scene_dir);
  const GroundTruth* gtp = gt ? &*gt : nullptr;
  auto t0 = std::chrono::steady_clock::now();

  const PreparedScene prep = prepare_scene(scene_dir, config, !ablation.no_filt);
  res.wall_seconds["filter"] = seconds_since(t0);
  {
    const auto states = ingested_states(prep.scene);
    res.metrics["unaligned"] = cloud_metrics(prep.unaligned, &states, gtp, config.metrics);
  }
  write_ply(out_dir / "filtered.ply", prep.unaligned);

  t0 = std::chrono::steady_clock::now();
  Checkpoint ck = align_prepared(prep, scene_dir, config, progress);
  res.wall_seconds["align"] = seconds_since(t0);
  save_checkpoint(out_dir / "align", ck);
  {
    StageMetrics m = cloud_metrics(ck.model, &ck.states, gtp, config.metrics);
    double inl = 0.0;
    size_t merged = 0, unalignable = 0;
    for (const auto& r : ck.reports) {
      if (r.status == FrameStatus::Merged) {
        inl += r.inlier_fraction;
        ++merged;
      }
      if (r.status == FrameStatus::Unalignable) ++unalignable;
    }
    m["inlier_fraction"] = merged ? inl / static_cast<double>(merged) : 0.0;
    m["merged_frames"] = static_cast<double>(merged);
    m["unalignable_frames"] = static_cast<double>(unalignable);
    res.metrics["align"] = m;
  }

  if (!ablation.no_global) {
    t0 = std::chrono::steady_clock::now();
    ck = run_refine(ck, config, progress);
    res.wall_seconds["refine"] = seconds_since(t0);
    save_checkpoint(out_dir / "refine", ck);
    StageMetrics m = cloud_metrics(ck.model, &ck.states, gtp, config.metrics);
    m["halted"] = ck.global_halted ? 1.0 : 0.0;
    res.metrics["refine"] = m;
  }
  res.metrics["final"] = res.metrics[ablation.no_global ? "align" : "refine"];

  if (!ablation.no_inv) {
    t0 = std::chrono::steady_clock::now();
    const InverseOutcome inv = run_invert(ck, config, progress);
    res.wall_seconds["invert"] = seconds_since(t0);
    inv.field.save(out_dir / "inverse_field.bin");
    res.metrics["invert"] = {{"final_loss", inv.report.final_loss},
                             {"holdout", static_cast<double>(inv.holdout)},
                             {"roundtrip_median", inv.roundtrip_median},
                             {"roundtrip_p90", inv.roundtrip_p90}};
  }

  t0 = std::chrono::steady_clock::now();
  const SplatSet splats = run_export(ck, config);
  write_splat_ply(out_dir / "splats.ply", splats);
  res.wall_seconds["export"] = seconds_since(t0);
  res.metrics["export"] = {{"splats", static_cast<double>(splats.splats.size())}};

  const std::string hash = config.hash();
  {
    std::ofstream out(out_dir / "metrics.json");
    if (!out) throw Error("io", "cannot write metrics.json");
    out << metrics_json(res.metrics, hash, ablation.name());
  }
  {
    json r;
    r["ablation"] = ablation.name();
    r["config_hash"] = hash;
    json w = json::object();
    double total = 0.0;
    for (const auto& [k, v] : res.wall_seconds) {
      w[k] = v;
      total += v;
    }
    w["total"] = total;
    r["wall_seconds"] = w;
    r["metrics"] = json::parse(metrics_json(res.metrics, hash, ablation.name()))["stages"];
    std::ofstream out(out_dir / "report.json");
    if (!out) throw Error("io", "cannot write report.json");
    out << r.dump(2) << "\n";
  }
  return res;
}

}  // namespace driftalign
