#include "driftalign/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include <Eigen/LU>
#include <json.hpp>

#include "driftalign/spatial.hpp"

namespace driftalign {

using nlohmann::json;

Vec3 CameraModel::ray(double u, double v) const {
  // K is upper triangular: solve by back substitution.
  const double y = (v - K(1, 2)) / K(1, 1);
  const double x = (u - K(0, 2) - K(0, 1) * y) / K(0, 0);
  return {x, y, 1.0};
}

std::optional<Vec2> CameraModel::project(const Vec3& p) const {
  if (!(p.z() > 0.0)) return std::nullopt;
  const Vec3 h = K * p;
  return Vec2(h.x() / h.z(), h.y() / h.z());
}

void CameraModel::validate() const {
  if (!(K(0, 0) > 0.0 && K(1, 1) > 0.0) || K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(2, 2) != 1.0) {
    throw Error("invariant", "camera intrinsics must be upper triangular with positive focal lengths");
  }
  if (!is_rotation(R, 1e-6)) throw Error("invariant", "camera rotation is not orthonormal");
  if (width <= 0 || height <= 0) throw Error("invariant", "camera image size must be positive");
}

const FrameBundle& Scene::frame(int frame_id) const {
  for (const auto& f : frames) {
    if (f.frame_id == frame_id) return f;
  }
  throw Error("domain", "scene has no frame " + std::to_string(frame_id));
}

std::filesystem::path frame_path(const std::filesystem::path& dir, int frame_id, const char* suffix) {
  char name[64];
  std::snprintf(name, sizeof(name), "frame_%04d%s", frame_id, suffix);
  return dir / name;
}

// ---------------------------------------------------------------------------
// camera json

void write_camera_json(const std::filesystem::path& path, const CameraModel& cam) {
  json j;
  std::vector<double> K, R;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      K.push_back(cam.K(r, c));
      R.push_back(cam.R(r, c));
    }
  }
  j["K"] = K;
  j["R"] = R;
  j["t"] = {cam.t.x(), cam.t.y(), cam.t.z()};
  j["convention"] = "cam2world";
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

namespace {

Mat3 mat3_from(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != 9) {
    throw Error("io", where + ": '" + key + "' must be 9 numbers");
  }
  Mat3 m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = j[key][static_cast<size_t>(i)].get<double>();
  return m;
}

}  // namespace

CameraModel read_camera_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "missing camera file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("io", path.string() + ": " + e.what());
  }
  const std::string where = path.filename().string();
  CameraModel cam;
  cam.K = mat3_from(j, "K", where);
  cam.R = mat3_from(j, "R", where);
  if (!j.contains("t") || j["t"].size() != 3) throw Error("io", where + ": 't' must be 3 numbers");
  for (int i = 0; i < 3; ++i) cam.t[i] = j["t"][static_cast<size_t>(i)].get<double>();
  if (j.value("convention", "cam2world") != "cam2world") {
    throw Error("io", where + ": only the cam2world convention is supported");
  }
  return cam;
}

// ---------------------------------------------------------------------------
// correspondences

void write_correspondences(const std::filesystem::path& path, const CorrespondenceSet& set) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << "src_frame,dst_frame,su,sv,tu,tv,w\n";
  char line[256];
  for (const auto& c : set.records) {
    std::snprintf(line, sizeof(line), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", c.src_frame, c.dst_frame, c.src.x(),
                  c.src.y(), c.dst.x(), c.dst.y(), c.w);
    out << line;
  }
}

CorrespondenceSet read_correspondences(const std::filesystem::path& path) {
  CorrespondenceSet set;
  std::ifstream in(path);
  if (!in) return set;
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "src_frame,dst_frame,su,sv,tu,tv,w") {
    throw Error("io", path.string() + ": unexpected header '" + line + "'");
  }
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 7) {
      throw Error("io", path.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    }
    Correspondence c;
    try {
      c.src_frame = std::stoi(fields[0]);
      c.dst_frame = std::stoi(fields[1]);
      c.src = Vec2(std::stod(fields[2]), std::stod(fields[3]));
      c.dst = Vec2(std::stod(fields[4]), std::stod(fields[5]));
      c.w = std::stod(fields[6]);
    } catch (const std::exception&) {
      throw Error("io", path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
    if (!(c.w >= 0.0 && c.w <= 1.0)) {
      throw Error("io", path.string() + ":" + std::to_string(lineno) + ": certainty outside [0,1]");
    }
    set.records.push_back(c);
  }
  return set;
}

// ---------------------------------------------------------------------------
// scene directory

void write_frame(const std::filesystem::path& dir, const FrameBundle& f) {
  write_pfm(frame_path(dir, f.frame_id, ".depth.pfm"), f.depth);
  write_pfm(frame_path(dir, f.frame_id, ".conf.pfm"), f.confidence);
  write_png(frame_path(dir, f.frame_id, ".png"), f.image);
  write_camera_json(frame_path(dir, f.frame_id, ".cam.json"), f.camera);
}

Scene load_scene(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("io", "scene directory not found: " + dir.string());
  static const std::regex pattern(R"(frame_(\d{4,})\.cam\.json)");
  std::vector<int> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) ids.push_back(std::stoi(m[1].str()));
  }
  // A depth map without a camera is a missing camera, not an absent frame.
  static const std::regex depth_pattern(R"(frame_(\d{4,})\.depth\.pfm)");
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, depth_pattern)) {
      const int id = std::stoi(m[1].str());
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
        throw Error("io", "frame " + std::to_string(id) + ": missing camera file");
      }
    }
  }
  if (ids.empty()) throw Error("io", "no frames found in " + dir.string());
  std::sort(ids.begin(), ids.end());

  Scene scene;
  for (int id : ids) {
    FrameBundle f;
    f.frame_id = id;
    const std::string tag = "frame " + std::to_string(id);
    f.camera = read_camera_json(frame_path(dir, id, ".cam.json"));
    f.depth = read_pfm(frame_path(dir, id, ".depth.pfm"));
    f.confidence = read_pfm(frame_path(dir, id, ".conf.pfm"));
    f.image = read_png(frame_path(dir, id, ".png"));
    if (!f.confidence.same_size(f.depth.width, f.depth.height) || !f.image.same_size(f.depth.width, f.depth.height)) {
      throw Error("io", tag + ": raster dimensions disagree (depth " + std::to_string(f.depth.width) + "x" +
                            std::to_string(f.depth.height) + ", confidence " + std::to_string(f.confidence.width) +
                            "x" + std::to_string(f.confidence.height) + ", image " + std::to_string(f.image.width) +
                            "x" + std::to_string(f.image.height) + ")");
    }
    f.camera.width = f.depth.width;
    f.camera.height = f.depth.height;
    try {
      f.camera.validate();
    } catch (const Error& e) {
      throw Error("io", tag + ": " + e.what());
    }
    scene.frames.push_back(std::move(f));
  }
  scene.correspondences = read_correspondences(dir / "correspondences.csv");
  for (const auto& c : scene.correspondences.records) {
    for (auto [id, px] : {std::pair{c.src_frame, c.src}, std::pair{c.dst_frame, c.dst}}) {
      if (!std::binary_search(ids.begin(), ids.end(), id)) {
        throw Error("io", "correspondence references unknown frame " + std::to_string(id));
      }
      const auto& cam = scene.frame(id).camera;
      if (px.x() < 0.0 || px.y() < 0.0 || px.x() > cam.width - 1 || px.y() > cam.height - 1) {
        throw Error("io", "correspondence pixel outside frame " + std::to_string(id));
      }
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------

namespace {

PointCloud unproject_impl(const FrameBundle& frame, int stride, bool world) {
  if (stride < 1) throw Error("domain", "unproject: stride must be >= 1");
  PointCloud cloud;
  const auto& cam = frame.camera;
  for (int v = 0; v < frame.depth.height; v += stride) {
    for (int u = 0; u < frame.depth.width; u += stride) {
      const float d = frame.depth(u, v);
      if (!(d > 0.0f) || !std::isfinite(d)) continue;
      const Vec3 p_cam = cam.ray(u, v) * static_cast<double>(d);
      cloud.positions.push_back(world ? Vec3(cam.R * p_cam + cam.t) : p_cam);
      cloud.colors.push_back(frame.image(u, v).cast<double>());
      cloud.confidences.push_back(std::max(0.0f, frame.confidence(u, v)));
      cloud.frame_ids.push_back(frame.frame_id);
      cloud.pixels.push_back({u, v});
    }
  }
  return cloud;
}

}  // namespace

PointCloud unproject(const FrameBundle& frame, int stride) { return unproject_impl(frame, stride, true); }
PointCloud unproject_camera(const FrameBundle& frame, int stride) { return unproject_impl(frame, stride, false); }

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw Error("domain", "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double w = pos - static_cast<double>(lo);
  const double a = values[lo], b = values[hi];
  // clamped so the result is monotone in pct despite rounding
  return std::clamp(a + w * (b - a), a, b);
}

std::vector<size_t> voxel_confidence_filter_indices(const PointCloud& cloud, double voxel_size, double theta_loc,
                                                    double theta_cnt) {
  if (cloud.empty()) throw Error("domain", "voxel_confidence_filter: empty cloud");
  const VoxelGrid grid(cloud.positions, voxel_size);
  std::unordered_map<VoxelKey, double, VoxelKeyHash> tau_loc;
  std::vector<double> counts;
  counts.reserve(grid.voxels().size());
  for (const auto& [key, members] : grid.voxels()) {
    std::vector<double> conf;
    conf.reserve(members.size());
    for (size_t i : members) conf.push_back(cloud.confidences[i]);
    tau_loc[key] = percentile(std::move(conf), theta_loc);
    counts.push_back(static_cast<double>(members.size()));
  }
  const double tau_cnt = percentile(std::move(counts), theta_cnt);
  std::vector<size_t> kept;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const VoxelKey& k = grid.key(i);
    if (cloud.confidences[i] >= tau_loc[k] && static_cast<double>(grid.count(k)) >= tau_cnt) kept.push_back(i);
  }
  return kept;
}

PointCloud voxel_confidence_filter(const PointCloud& cloud, double voxel_size, double theta_loc, double theta_cnt) {
  const auto kept = voxel_confidence_filter_indices(cloud, voxel_size, theta_loc, theta_cnt);
  return cloud.subset(kept);
}

std::vector<std::vector<size_t>> filter_frames(const std::vector<PointCloud>& clouds, double voxel_size,
                                               double theta_loc, double theta_cnt, FilterScope scope) {
  std::vector<std::vector<size_t>> kept(clouds.size());
  if (scope == FilterScope::PerFrame) {
    for (size_t f = 0; f < clouds.size(); ++f) {
      if (!clouds[f].empty()) kept[f] = voxel_confidence_filter_indices(clouds[f], voxel_size, theta_loc, theta_cnt);
    }
    return kept;
  }
  PointCloud all;
  std::vector<std::pair<size_t, size_t>> origin;
  for (size_t f = 0; f < clouds.size(); ++f) {
    all.append(clouds[f]);
    for (size_t i = 0; i < clouds[f].size(); ++i) origin.emplace_back(f, i);
  }
  if (all.empty()) return kept;
  for (size_t g : voxel_confidence_filter_indices(all, voxel_size, theta_loc, theta_cnt)) {
    kept[origin[g].first].push_back(origin[g].second);
  }
  return kept;
}

}  // namespace driftalign
