// driftalign command-line driver.
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "driftalign/parallel.hpp"
#include "driftalign/pipeline.hpp"

using namespace driftalign;
using json = nlohmann::ordered_json;

namespace {

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level() {
  const char* env = std::getenv("DRIFTALIGN_LOG");
  const std::string v = env ? env : "info";
  if (v == "quiet" || v == "error" || v == "warn" || v == "off") return LogLevel::Quiet;
  if (v == "debug" || v == "trace") return LogLevel::Debug;
  return LogLevel::Info;
}

ProgressFn make_logger() {
  if (log_level() == LogLevel::Quiet) return {};
  return [](const std::string& msg) { std::cerr << "[driftalign] " << msg << "\n"; };
}

void log(const std::string& msg) {
  if (log_level() != LogLevel::Quiet) std::cerr << "[driftalign] " << msg << "\n";
}

struct Common {
  std::string config_path;
  int64_t seed = -1;
  int threads = 0;
  int stride = 0;
  std::vector<std::string> ablate;
};

/// --config if given, else the checkpoint's embedded config, else defaults.
Config resolve_config(const Common& c, const std::string& embedded = {}) {
  Config cfg;
  if (!c.config_path.empty()) {
    cfg = load_config(c.config_path);
  } else if (!embedded.empty() && embedded != "{}") {
    cfg = config_from_json(embedded);
  }
  if (c.seed >= 0) cfg.seed = static_cast<uint64_t>(c.seed);
  if (c.stride > 0) cfg.stride = c.stride;
  cfg = Ablation::parse(c.ablate).apply(cfg);
  cfg.validate();
  return cfg;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

json stage_json(const StageMetrics& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-rigid alignment of drifting multi-view depth into one canonical point cloud"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Random seed (overrides the config)");
  app.add_option("--threads", common.threads, "Worker threads (default: available parallelism)");
  app.add_option("--stride", common.stride, "Unprojection stride in pixels (overrides the config)");
  app.add_option("--ablate", common.ablate, "only-rigid | no-corr | no-filt | no-global | no-inv")
      ->delimiter(',')
      ->check(CLI::IsMember({"only-rigid", "no-corr", "no-filt", "no-global", "no-inv"}));

  std::string spec_file, scene_dir, out, ckpt_dir, input, gt_dir, encoding = "linear";

  auto* synth = app.add_subcommand("synth", "Generate a synthetic drifting scene");
  synth->add_option("out_dir", out, "Output scene directory")->required();
  synth->add_option("--spec", spec_file, "Scene spec JSON (default: desk scene)")->check(CLI::ExistingFile);

  auto* filter = app.add_subcommand("filter", "Ingest a scene and apply the voxel confidence filter");
  filter->add_option("scene_dir", scene_dir)->required()->check(CLI::ExistingDirectory);
  filter->add_option("out_ply", out)->required();

  auto* align = app.add_subcommand("align", "Stage 1: sequential non-rigid frame-to-model alignment");
  align->add_option("scene_dir", scene_dir)->required()->check(CLI::ExistingDirectory);
  align->add_option("out_ckpt", out)->required();

  auto* refine = app.add_subcommand("refine", "Stage 2: global non-rigid refinement");
  refine->add_option("ckpt", ckpt_dir)->required()->check(CLI::ExistingDirectory);
  refine->add_option("out_ckpt", out)->required();

  auto* invert = app.add_subcommand("invert", "Learn the inverse deformation field");
  invert->add_option("ckpt", ckpt_dir)->required()->check(CLI::ExistingDirectory);
  invert->add_option("out_field", out)->required();

  auto* exp = app.add_subcommand("export", "Export 2D Gaussian splats from the canonical cloud");
  exp->add_option("ckpt", ckpt_dir)->required()->check(CLI::ExistingDirectory);
  exp->add_option("out_splat_ply", out)->required();
  exp->add_option("--encoding", encoding, "linear | activated")->check(CLI::IsMember({"linear", "activated"}));

  auto* metrics = app.add_subcommand("metrics", "Metric report for a checkpoint or point cloud");
  metrics->add_option("input", input, "Checkpoint directory or PLY file")->required()->check(CLI::ExistingPath);
  metrics->add_option("gt_dir", gt_dir, "Scene directory holding gt/")->check(CLI::ExistingDirectory);
  metrics->add_option("report_json", out, "Where to write the report (default: stdout)");

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage and write metrics");
  pipeline->add_option("scene_dir", scene_dir)->required()->check(CLI::ExistingDirectory);
  pipeline->add_option("out_dir", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    if (common.threads > 0) set_thread_count(common.threads);
    const ProgressFn progress = make_logger();

    if (synth->parsed()) {
      SceneSpec spec = spec_file.empty() ? SceneSpec::desk() : read_scene_spec(spec_file);
      if (common.seed >= 0) spec.seed = static_cast<uint64_t>(common.seed);
      const GroundTruth gt = generate(spec, out);
      print_json({{"scene_dir", out}, {"frames", gt.frame_ids.size()}});
    } else if (filter->parsed()) {
      const Config cfg = resolve_config(common);
      const PreparedScene p = prepare_scene(scene_dir, cfg, true);
      write_ply(out, p.unaligned);
      print_json({{"points", p.unaligned.size()}, {"out", out}});
    } else if (align->parsed()) {
      const Config cfg = resolve_config(common);
      const Ablation ab = Ablation::parse(common.ablate);
      const Checkpoint ck = run_align(scene_dir, cfg, !ab.no_filt, progress);
      save_checkpoint(out, ck);
      size_t merged = 0;
      for (const auto& r : ck.reports) merged += r.status == FrameStatus::Merged;
      print_json({{"checkpoint", out}, {"model_points", ck.model.size()}, {"merged_frames", merged}});
    } else if (refine->parsed()) {
      const Checkpoint ck = load_checkpoint(ckpt_dir);
      const Config cfg = resolve_config(common, ck.config_json);
      const Checkpoint r = run_refine(ck, cfg, progress);
      save_checkpoint(out, r);
      print_json({{"checkpoint", out}, {"halted", r.global_halted},
                  {"energy_final", r.global_energy.empty() ? 0.0 : r.global_energy.back()}});
    } else if (invert->parsed()) {
      const Checkpoint ck = load_checkpoint(ckpt_dir);
      const Config cfg = resolve_config(common, ck.config_json);
      const InverseOutcome inv = run_invert(ck, cfg, progress);
      inv.field.save(out);
      print_json({{"field", out},
                  {"final_loss", inv.report.final_loss},
                  {"roundtrip_median", inv.roundtrip_median},
                  {"roundtrip_p90", inv.roundtrip_p90},
                  {"holdout", inv.holdout}});
    } else if (exp->parsed()) {
      const Checkpoint ck = load_checkpoint(ckpt_dir);
      const Config cfg = resolve_config(common, ck.config_json);
      const SplatSet s = run_export(ck, cfg);
      write_splat_ply(out, s, encoding == "activated" ? SplatEncoding::Activated : SplatEncoding::Linear);
      print_json({{"splats", s.splats.size()}, {"out", out}});
    } else if (metrics->parsed()) {
      const Config cfg = resolve_config(common);
      std::optional<GroundTruth> gt;
      if (!gt_dir.empty()) {
        gt = find_ground_truth(gt_dir);
        if (!gt) throw Error("io", "no ground truth under " + gt_dir);
      }
      json report;
      if (std::filesystem::is_directory(input)) {
        const Checkpoint ck = load_checkpoint(input);
        StageMetrics m = cloud_metrics(ck.model, &ck.states, gt ? &*gt : nullptr, cfg.metrics);
        double inl = 0.0;
        size_t merged = 0;
        for (const auto& r : ck.reports) {
          if (r.status != FrameStatus::Merged) continue;
          inl += r.inlier_fraction;
          ++merged;
        }
        m["inlier_fraction"] = merged ? inl / static_cast<double>(merged) : 0.0;
        report[ck.stage] = stage_json(m);
      } else {
        const PointCloud cloud = read_ply(input);
        report["cloud"] = stage_json(cloud_metrics(cloud, nullptr, gt ? &*gt : nullptr, cfg.metrics));
      }
      if (out.empty()) {
        print_json(report);
      } else {
        std::ofstream f(out);
        if (!f) throw Error("io", "cannot write " + out);
        f << report.dump(2) << "\n";
      }
    } else if (pipeline->parsed()) {
      Common plain = common;
      plain.ablate.clear();  // run_pipeline applies the ablation itself
      Config cfg = resolve_config(plain);
      const Ablation ab = Ablation::parse(common.ablate);
      log("pipeline (" + ab.name() + ") config " + cfg.hash());
      const PipelineResult r = run_pipeline(scene_dir, out, cfg, ab, progress);
      json j;
      for (const auto& [stage, m] : r.metrics) j[stage] = stage_json(m);
      print_json(j);
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  }
  return 0;
}
