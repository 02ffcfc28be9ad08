#include "driftalign/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace driftalign {

using json = nlohmann::ordered_json;

namespace {

std::string field_file(int frame_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "field_%04d.bin", frame_id);
  return name;
}

json vec(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json transform_json(const RigidTransform& T) {
  json R = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) R.push_back(T.R(r, c));
  }
  return {{"R", R}, {"t", vec(T.t)}};
}

RigidTransform transform_from(const json& j) {
  RigidTransform T;
  for (int i = 0; i < 9; ++i) T.R(i / 3, i % 3) = j.at("R").at(static_cast<size_t>(i)).get<double>();
  for (int i = 0; i < 3; ++i) T.t[i] = j.at("t").at(static_cast<size_t>(i)).get<double>();
  return T;
}

// Infinite thresholds serialize as null.
double number_or_inf(const json& j) {
  return j.is_number() ? j.get<double>() : std::numeric_limits<double>::infinity();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  json j;
  j["stage"] = ck.stage;
  j["scene_dir"] = ck.scene_dir.string();
  j["config"] = ck.config_json.empty() ? json::object() : json::parse(ck.config_json);
  json frames = json::array();
  for (const auto& s : ck.states) {
    frames.push_back({{"frame_id", s.frame_id},
                      {"pose0", transform_json(s.pose0)},
                      {"xi_g", vec(s.xi_g.vector())},
                      {"field_enabled", s.field_enabled},
                      {"field", field_file(s.frame_id)}});
    s.field.save(dir / field_file(s.frame_id));
  }
  j["frames"] = frames;
  j["merge"] = {{"g_d", ck.stats.g_d}, {"g_c", ck.stats.g_c}, {"tau_d", ck.stats.tau_d}, {"tau_c", ck.stats.tau_c}};
  json reports = json::array();
  for (const auto& r : ck.reports) {
    reports.push_back({{"frame_id", r.frame_id},
                       {"status", to_string(r.status)},
                       {"points", r.points},
                       {"accepted", r.accepted},
                       {"correspondences", r.correspondences},
                       {"final_energy", r.final_energy},
                       {"inlier_fraction", r.inlier_fraction},
                       {"g_d", r.g_d},
                       {"g_c", r.g_c},
                       {"tau_d", r.tau_d},
                       {"tau_c", r.tau_c},
                       {"bootstrap", r.bootstrap}});
  }
  j["reports"] = reports;
  j["global_energy"] = ck.global_energy;
  j["global_halted"] = ck.global_halted;
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw Error("io", "cannot write checkpoint to " + dir.string());
  out << j.dump(2) << "\n";
  write_ply(dir / "model.ply", ck.model);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  std::ifstream in(path);
  if (!in) throw Error("io", "no checkpoint at " + dir.string());
  Checkpoint ck;
  try {
    const json j = json::parse(in);
    ck.stage = j.at("stage").get<std::string>();
    ck.scene_dir = j.at("scene_dir").get<std::string>();
    ck.config_json = j.at("config").dump();
    for (const auto& f : j.at("frames")) {
      FrameState s;
      s.frame_id = f.at("frame_id").get<int>();
      s.pose0 = transform_from(f.at("pose0"));
      Vec6 xi;
      for (int i = 0; i < 6; ++i) xi[i] = f.at("xi_g").at(static_cast<size_t>(i)).get<double>();
      s.xi_g = Twist::from_vector(xi);
      s.field_enabled = f.at("field_enabled").get<bool>();
      s.field = DeformationField::load(dir / f.at("field").get<std::string>());
      ck.states.push_back(std::move(s));
    }
    ck.stats.g_d = j.at("merge").at("g_d").get<std::vector<double>>();
    ck.stats.g_c = j.at("merge").at("g_c").get<std::vector<double>>();
    ck.stats.tau_d = number_or_inf(j.at("merge").at("tau_d"));
    ck.stats.tau_c = number_or_inf(j.at("merge").at("tau_c"));
    for (const auto& r : j.at("reports")) {
      FrameReport fr;
      fr.frame_id = r.at("frame_id").get<int>();
      fr.status = frame_status_from(r.at("status").get<std::string>());
      fr.points = r.at("points").get<size_t>();
      fr.accepted = r.at("accepted").get<size_t>();
      fr.correspondences = r.at("correspondences").get<size_t>();
      fr.final_energy = r.at("final_energy").get<double>();
      fr.inlier_fraction = r.at("inlier_fraction").get<double>();
      fr.g_d = r.at("g_d").get<double>();
      fr.g_c = r.at("g_c").get<double>();
      fr.tau_d = number_or_inf(r.at("tau_d"));
      fr.tau_c = number_or_inf(r.at("tau_c"));
      fr.bootstrap = r.at("bootstrap").get<bool>();
      ck.reports.push_back(fr);
    }
    ck.global_energy = j.at("global_energy").get<std::vector<double>>();
    ck.global_halted = j.at("global_halted").get<bool>();
  } catch (const json::exception& e) {
    throw Error("io", path.string() + ": " + e.what());
  }
  ck.model = read_ply(dir / "model.ply");
  return ck;
}

}  // namespace driftalign
