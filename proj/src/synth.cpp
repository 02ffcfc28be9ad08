#include "driftalign/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <regex>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <json.hpp>

#include "driftalign/parallel.hpp"
#include "driftalign/spatial.hpp"

namespace driftalign {

using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// json helpers

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw Error("config", what + " must be 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json camera_json(const CameraModel& cam) {
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
  j["t"] = vec_json(cam.t);
  j["width"] = cam.width;
  j["height"] = cam.height;
  return j;
}

CameraModel camera_from(const json& j) {
  CameraModel cam;
  if (!j.contains("K") || !j.contains("R") || !j.contains("t")) throw Error("config", "camera needs K, R and t");
  if (j["K"].size() != 9 || j["R"].size() != 9) throw Error("config", "camera K and R must be 9 numbers");
  for (int i = 0; i < 9; ++i) {
    cam.K(i / 3, i % 3) = j["K"][static_cast<size_t>(i)].get<double>();
    cam.R(i / 3, i % 3) = j["R"][static_cast<size_t>(i)].get<double>();
  }
  cam.t = vec_from(j["t"], "camera t");
  cam.width = j.value("width", 0);
  cam.height = j.value("height", 0);
  return cam;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error("config", where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw Error("config", where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j[key].get<T>();
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("io", path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// procedural texture

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(int64_t x, int64_t y, int64_t z, uint64_t salt) {
  uint64_t h = mix64(salt);
  h = mix64(h ^ static_cast<uint64_t>(x));
  h = mix64(h ^ static_cast<uint64_t>(y));
  h = mix64(h ^ static_cast<uint64_t>(z));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double value_noise(const Vec3& p, uint64_t salt) {
  const Vec3 f = p.array().floor();
  const Vec3 r = p - f;
  const Vec3 s = r.array() * r.array() * (3.0 - 2.0 * r.array());
  const auto x0 = static_cast<int64_t>(f.x()), y0 = static_cast<int64_t>(f.y()), z0 = static_cast<int64_t>(f.z());
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? s.x() : 1.0 - s.x()) * (dy ? s.y() : 1.0 - s.y()) * (dz ? s.z() : 1.0 - s.z());
    acc += w * lattice(x0 + dx, y0 + dy, z0 + dz, salt);
  }
  return acc;
}

double texture_value(const Texture& tex, const Vec3& x, uint64_t salt) {
  if (tex.kind == "checker") {
    const Vec3 c = (x * tex.frequency).array().floor();
    const auto parity = static_cast<int64_t>(c.x() + c.y() + c.z());
    return (parity & 1) ? 1.0 : 0.0;
  }
  double v = 0.0, amp = 1.0, norm = 0.0, freq = tex.frequency;
  for (int o = 0; o < std::max(1, tex.octaves); ++o) {
    v += amp * value_noise(x * freq, salt + static_cast<uint64_t>(o));
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return v / norm;
}

// ---------------------------------------------------------------------------
// primitives

double box_sdf(const Vec3& q, const Vec3& half) {
  const Vec3 d = q.cwiseAbs() - half;
  return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
}

constexpr double kPlaneThickness = 0.01;

double primitive_sdf(const Primitive& p, const Vec3& x) {
  if (p.type == "sphere") return (x - p.center).norm() - p.radius;
  if (p.type == "box") return box_sdf(x - p.center, p.half_extents);
  // plane: thin slab whose top face passes through the center
  Vec3 t1, t2;
  const Vec3 n = p.normal.normalized();
  tangent_basis(n, t1, t2);
  const Vec3 d = x - p.center;
  const Vec3 local(d.dot(t1), d.dot(t2), d.dot(n) + 0.5 * kPlaneThickness);
  return box_sdf(local, Vec3(p.half_size.x(), p.half_size.y(), 0.5 * kPlaneThickness));
}

/// Uniform area samples on the visible surface of a primitive.
std::vector<Vec3> sample_primitive(const Primitive& p, size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    if (p.type == "sphere") {
      Vec3 d(N(rng), N(rng), N(rng));
      out.push_back(p.center + p.radius * d.normalized());
    } else if (p.type == "box") {
      const Vec3& h = p.half_extents;
      const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
      const double total = areas[0] + areas[1] + areas[2];
      const double pick = 0.5 * (U(rng) + 1.0) * total;
      const int axis = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
      Vec3 q(U(rng) * h.x(), U(rng) * h.y(), U(rng) * h.z());
      q[axis] = (U(rng) < 0.0 ? -1.0 : 1.0) * h[axis];
      out.push_back(p.center + q);
    } else {
      Vec3 t1, t2;
      tangent_basis(p.normal.normalized(), t1, t2);
      out.push_back(p.center + U(rng) * p.half_size.x() * t1 + U(rng) * p.half_size.y() * t2);
    }
  }
  return out;
}

Mat3 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(Vec3::UnitY());
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitZ());
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 R;
  R.col(0) = x;
  R.col(1) = y;
  R.col(2) = z;
  return R;
}

Mat3 intrinsics(int w, int h, double fov_deg) {
  const double f = 0.5 * w / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  Mat3 K = Mat3::Identity();
  K(0, 0) = f;
  K(1, 1) = f;
  K(0, 2) = 0.5 * (w - 1);
  K(1, 2) = 0.5 * (h - 1);
  return K;
}

std::filesystem::path gt_path(const std::filesystem::path& dir, const char* stem, int id, const char* ext) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%04d%s", stem, id, ext);
  return dir / "gt" / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// SceneSpec

SceneSpec SceneSpec::desk() {
  SceneSpec s;
  Primitive ground;
  ground.type = "plane";
  ground.center = Vec3(0.0, 0.0, 0.0);
  ground.normal = Vec3::UnitY();
  ground.half_size = Vec2(0.6, 0.6);
  ground.texture = {"noise", Vec3(0.55, 0.5, 0.42), 0.7, 8.0, 3};
  Primitive ball;
  ball.type = "sphere";
  ball.center = Vec3(-0.17, 0.15, 0.05);
  ball.radius = 0.15;
  ball.texture = {"noise", Vec3(0.75, 0.35, 0.3), 0.6, 10.0, 3};
  Primitive crate;
  crate.type = "box";
  crate.center = Vec3(0.2, 0.1, -0.08);
  crate.half_extents = Vec3(0.1, 0.1, 0.12);
  crate.texture = {"noise", Vec3(0.3, 0.45, 0.7), 0.6, 10.0, 3};
  s.primitives = {ground, ball, crate};
  return s;
}

void SceneSpec::validate() const {
  if (primitives.empty()) throw Error("config", "scene needs at least one primitive");
  if (trajectory().size() < 2) throw Error("config", "scene needs at least two cameras");
  if (width < 2 || height < 2) throw Error("config", "image size must be at least 2x2");
  const std::pair<const char*, double> nonneg[] = {
      {"warp.max_magnitude", warp.max_magnitude}, {"warp.bandwidth", warp.bandwidth},
      {"warp.rotation_share", warp.rotation_share}, {"depth_noise", depth_noise},
      {"conf_alpha", conf_alpha}, {"conf_beta", conf_beta},
      {"camera_noise_rot", camera_noise_rot}, {"camera_noise_trans", camera_noise_trans},
      {"outliers.fraction", outliers.fraction}, {"outliers.offset", outliers.offset},
      {"correspondences.corruption", correspondences.corruption}};
  for (const auto& [name, value] : nonneg) {
    if (!(value >= 0.0)) throw Error("config", std::string(name) + " must be nonnegative");
  }
  if (warp.kernels < 0 || correspondences.per_pair < 0 || edge_radius < 1 || surface_samples < 1) {
    throw Error("config", "counts must be positive");
  }
  if (warp.kernels > 0 && warp.max_magnitude > 0.0 && warp.bandwidth <= 0.0) {
    throw Error("config", "warp.bandwidth must be positive");
  }
  if (outliers.fraction > 1.0 || correspondences.corruption > 1.0) throw Error("config", "rates must be <= 1");
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw Error("config", "fov_deg must be in (0, 180)");
  for (const auto& p : primitives) {
    if (p.type != "plane" && p.type != "sphere" && p.type != "box") {
      throw Error("config", "unknown primitive type '" + p.type + "'");
    }
    if (p.radius < 0.0 || (p.half_extents.array() < 0.0).any() || (p.half_size.array() < 0.0).any()) {
      throw Error("config", "primitive extents must be nonnegative");
    }
  }
}

std::vector<CameraModel> SceneSpec::trajectory() const {
  if (!cameras.empty()) {
    std::vector<CameraModel> out = cameras;
    for (auto& c : out) {
      if (c.width == 0) c.width = width;
      if (c.height == 0) c.height = height;
    }
    return out;
  }
  std::vector<CameraModel> out;
  const Mat3 K = intrinsics(width, height, fov_deg);
  for (int i = 0; i < orbit.count; ++i) {
    const double s = orbit.count > 1 ? static_cast<double>(i) / (orbit.count - 1) - 0.5 : 0.0;
    const double a = s * orbit.arc_deg * std::numbers::pi / 180.0;
    const Vec3 eye = orbit.target + Vec3(orbit.radius * std::sin(a), orbit.height, orbit.radius * std::cos(a));
    CameraModel cam;
    cam.K = K;
    cam.R = look_at(eye, orbit.target);
    cam.t = eye;
    cam.width = width;
    cam.height = height;
    out.push_back(cam);
  }
  return out;
}

void write_scene_spec(const std::filesystem::path& path, const SceneSpec& s) {
  json j;
  json prims = json::array();
  for (const auto& p : s.primitives) {
    json q;
    q["type"] = p.type;
    q["center"] = vec_json(p.center);
    if (p.type == "plane") {
      q["normal"] = vec_json(p.normal);
      q["half_size"] = json::array({p.half_size.x(), p.half_size.y()});
    } else if (p.type == "sphere") {
      q["radius"] = p.radius;
    } else {
      q["half_extents"] = vec_json(p.half_extents);
    }
    q["texture"] = {{"kind", p.texture.kind},         {"base", vec_json(p.texture.base)},
                    {"contrast", p.texture.contrast}, {"frequency", p.texture.frequency},
                    {"octaves", p.texture.octaves}};
    prims.push_back(q);
  }
  j["primitives"] = prims;
  if (!s.cameras.empty()) {
    json cams = json::array();
    for (const auto& c : s.cameras) cams.push_back(camera_json(c));
    j["cameras"] = cams;
  }
  j["orbit"] = {{"count", s.orbit.count},
                {"radius", s.orbit.radius},
                {"height", s.orbit.height},
                {"arc_deg", s.orbit.arc_deg},
                {"target", vec_json(s.orbit.target)}};
  j["width"] = s.width;
  j["height"] = s.height;
  j["fov_deg"] = s.fov_deg;
  j["warp"] = {{"kernels", s.warp.kernels},
               {"bandwidth", s.warp.bandwidth},
               {"max_magnitude", s.warp.max_magnitude},
               {"rotation_share", s.warp.rotation_share}};
  j["depth_noise"] = s.depth_noise;
  j["conf_alpha"] = s.conf_alpha;
  j["conf_beta"] = s.conf_beta;
  j["edge_radius"] = s.edge_radius;
  j["camera_noise_rot"] = s.camera_noise_rot;
  j["camera_noise_trans"] = s.camera_noise_trans;
  j["outliers"] = {{"frames", s.outliers.frames}, {"fraction", s.outliers.fraction}, {"offset", s.outliers.offset}};
  j["correspondences"] = {{"per_pair", s.correspondences.per_pair},
                          {"max_gap", s.correspondences.max_gap},
                          {"corruption", s.correspondences.corruption}};
  j["surface_samples"] = s.surface_samples;
  j["seed"] = s.seed;
  write_json(path, j);
}

SceneSpec read_scene_spec(const std::filesystem::path& path) {
  const json j = read_json(path);
  SceneSpec s = SceneSpec::desk();
  try {
    check_keys(j,
               {"primitives", "cameras", "orbit", "width", "height", "fov_deg", "warp", "depth_noise", "conf_alpha",
                "conf_beta", "edge_radius", "camera_noise_rot", "camera_noise_trans", "outliers", "correspondences",
                "surface_samples", "seed"},
               "scene spec");
    if (j.contains("primitives")) {
      s.primitives.clear();
      for (const auto& q : j["primitives"]) {
        check_keys(q, {"type", "center", "normal", "half_size", "radius", "half_extents", "texture"}, "primitive");
        Primitive p;
        read_opt(q, "type", p.type);
        if (q.contains("center")) p.center = vec_from(q["center"], "center");
        if (q.contains("normal")) p.normal = vec_from(q["normal"], "normal").normalized();
        if (q.contains("half_size")) p.half_size = Vec2(q["half_size"][0].get<double>(), q["half_size"][1].get<double>());
        read_opt(q, "radius", p.radius);
        if (q.contains("half_extents")) p.half_extents = vec_from(q["half_extents"], "half_extents");
        if (q.contains("texture")) {
          const json& t = q["texture"];
          check_keys(t, {"kind", "base", "contrast", "frequency", "octaves"}, "texture");
          read_opt(t, "kind", p.texture.kind);
          if (t.contains("base")) p.texture.base = vec_from(t["base"], "texture base");
          read_opt(t, "contrast", p.texture.contrast);
          read_opt(t, "frequency", p.texture.frequency);
          read_opt(t, "octaves", p.texture.octaves);
        }
        s.primitives.push_back(p);
      }
    }
    if (j.contains("cameras")) {
      for (const auto& c : j["cameras"]) s.cameras.push_back(camera_from(c));
    }
    if (j.contains("orbit")) {
      const json& o = j["orbit"];
      check_keys(o, {"count", "radius", "height", "arc_deg", "target"}, "orbit");
      read_opt(o, "count", s.orbit.count);
      read_opt(o, "radius", s.orbit.radius);
      read_opt(o, "height", s.orbit.height);
      read_opt(o, "arc_deg", s.orbit.arc_deg);
      if (o.contains("target")) s.orbit.target = vec_from(o["target"], "orbit target");
    }
    read_opt(j, "width", s.width);
    read_opt(j, "height", s.height);
    read_opt(j, "fov_deg", s.fov_deg);
    if (j.contains("warp")) {
      const json& w = j["warp"];
      check_keys(w, {"kernels", "bandwidth", "max_magnitude", "rotation_share"}, "warp");
      read_opt(w, "kernels", s.warp.kernels);
      read_opt(w, "bandwidth", s.warp.bandwidth);
      read_opt(w, "max_magnitude", s.warp.max_magnitude);
      read_opt(w, "rotation_share", s.warp.rotation_share);
    }
    read_opt(j, "depth_noise", s.depth_noise);
    read_opt(j, "conf_alpha", s.conf_alpha);
    read_opt(j, "conf_beta", s.conf_beta);
    read_opt(j, "edge_radius", s.edge_radius);
    read_opt(j, "camera_noise_rot", s.camera_noise_rot);
    read_opt(j, "camera_noise_trans", s.camera_noise_trans);
    if (j.contains("outliers")) {
      const json& o = j["outliers"];
      check_keys(o, {"frames", "fraction", "offset"}, "outliers");
      read_opt(o, "frames", s.outliers.frames);
      read_opt(o, "fraction", s.outliers.fraction);
      read_opt(o, "offset", s.outliers.offset);
    }
    if (j.contains("correspondences")) {
      const json& c = j["correspondences"];
      check_keys(c, {"per_pair", "max_gap", "corruption"}, "correspondences");
      read_opt(c, "per_pair", s.correspondences.per_pair);
      read_opt(c, "max_gap", s.correspondences.max_gap);
      read_opt(c, "corruption", s.correspondences.corruption);
    }
    read_opt(j, "surface_samples", s.surface_samples);
    read_opt(j, "seed", s.seed);
  } catch (const json::exception& e) {
    throw Error("config", path.string() + ": " + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Warp

Warp::Warp(std::vector<WarpKernel> kernels) : kernels_(std::move(kernels)) {
  exp_.reserve(kernels_.size());
  for (const auto& k : kernels_) exp_.push_back(twist_exp(k.xi));
}

Vec3 Warp::displacement(const Vec3& x) const {
  Vec3 d = Vec3::Zero();
  for (size_t j = 0; j < kernels_.size(); ++j) {
    const Vec3 r = x - kernels_[j].center;
    const double s = kernels_[j].sigma;
    const double phi = std::exp(-0.5 * r.squaredNorm() / (s * s));
    d += phi * (exp_[j].R * r + exp_[j].t - r);
  }
  return d;
}

Vec3 Warp::inverse(const Vec3& y, const Vec3* guess) const {
  if (identity()) return y;
  Vec3 x = guess ? *guess : y;
  for (int it = 0; it < 200; ++it) {
    const Vec3 next = y - displacement(x);
    const double step = (next - x).norm();
    x = next;
    if (step < 1e-14) break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// SceneGeometry

SceneGeometry::SceneGeometry(std::vector<Primitive> primitives) : prims_(std::move(primitives)) {}

double SceneGeometry::sdf(const Vec3& x, int* id) const {
  double best = std::numeric_limits<double>::infinity();
  int arg = -1;
  for (size_t i = 0; i < prims_.size(); ++i) {
    const double d = primitive_sdf(prims_[i], x);
    if (d < best) {
      best = d;
      arg = static_cast<int>(i);
    }
  }
  if (id) *id = arg;
  return best;
}

Vec3 SceneGeometry::normal(const Vec3& x) const {
  constexpr double h = 1e-6;
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    g[a] = sdf(x + e) - sdf(x - e);
  }
  const double n = g.norm();
  return n > 0.0 ? Vec3(g / n) : Vec3::UnitZ();
}

Vec3 SceneGeometry::color(const Vec3& x, int id) const {
  if (id < 0 || static_cast<size_t>(id) >= prims_.size()) return Vec3::Zero();
  const Texture& tex = prims_[static_cast<size_t>(id)].texture;
  const double v = texture_value(tex, x, 1000003ULL * static_cast<uint64_t>(id + 1));
  return (tex.base.array() * (1.0 - tex.contrast) + tex.contrast * v * (0.5 + 0.5 * tex.base.array()))
      .cwiseMax(0.0)
      .cwiseMin(1.0);
}

std::optional<SceneGeometry::Hit> SceneGeometry::raycast(const Vec3& origin, const Vec3& dir, const Warp& warp,
                                                        double t_max) const {
  constexpr double kMinStep = 1e-4;
  Vec3 guess = origin;
  auto eval = [&](double t, Vec3& canonical) {
    canonical = warp.inverse(origin + t * dir, &guess);
    guess = canonical;
    return sdf(canonical);
  };
  double t = 0.05;
  Vec3 x;
  double f = eval(t, x);
  if (f <= 0.0) return std::nullopt;  // starts inside geometry
  for (int it = 0; it < 4000 && t < t_max; ++it) {
    const double t_prev = t;
    const Vec3 x_prev = x;
    t += std::max(0.7 * f, kMinStep);
    f = eval(t, x);
    if (f > 0.0) continue;
    // bracketed: bisect [t_prev, t]
    double a = t_prev, b = t;
    guess = x_prev;
    Vec3 xa = x_prev;
    for (int k = 0; k < 80 && b - a > 1e-15; ++k) {
      const double m = 0.5 * (a + b);
      Vec3 xm;
      const double fm = eval(m, xm);
      if (fm > 0.0) {
        a = m;
        xa = xm;
      } else {
        b = m;
      }
    }
    Hit hit;
    hit.t = a;
    hit.canonical = warp.inverse(origin + a * dir, &xa);
    sdf(hit.canonical, &hit.primitive);
    return hit;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// GroundTruth

size_t GroundTruth::slot(int frame_id) const {
  const auto it = std::find(frame_ids.begin(), frame_ids.end(), frame_id);
  if (it == frame_ids.end()) throw Error("domain", "ground truth has no frame " + std::to_string(frame_id));
  return static_cast<size_t>(it - frame_ids.begin());
}

GroundTruth GroundTruth::load(const std::filesystem::path& scene_dir) {
  const auto dir = scene_dir / "gt";
  if (!std::filesystem::is_directory(dir)) throw Error("io", "ground truth directory not found: " + dir.string());
  static const std::regex pattern(R"(warp_(\d{4,})\.json)");
  std::vector<int> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) ids.push_back(std::stoi(m[1].str()));
  }
  if (ids.empty()) throw Error("io", "no warp files in " + dir.string());
  std::sort(ids.begin(), ids.end());
  GroundTruth gt;
  for (int id : ids) {
    const json j = read_json(gt_path(scene_dir, "warp", id, ".json"));
    std::vector<WarpKernel> kernels;
    for (const auto& k : j.at("kernels")) {
      WarpKernel w;
      w.center = vec_from(k.at("center"), "kernel center");
      w.sigma = k.at("sigma").get<double>();
      w.xi = Twist(vec_from(k.at("omega"), "kernel omega"), vec_from(k.at("v"), "kernel v"));
      kernels.push_back(w);
    }
    gt.frame_ids.push_back(id);
    gt.warps.emplace_back(std::move(kernels));
    gt.true_cameras.push_back(camera_from(j.at("camera")));
    gt.ingested_cameras.push_back(camera_from(j.at("ingested_camera")));
    gt.exact_depth.push_back(read_pfm(gt_path(scene_dir, "depth", id, ".pfm")));
    gt.outlier_mask.push_back(read_pfm(gt_path(scene_dir, "outliers", id, ".pfm")));
  }
  gt.surface_samples = read_ply(dir / "surface_samples.ply");
  return gt;
}

// ---------------------------------------------------------------------------
// generate

namespace {

struct Render {
  Raster<float> depth;             // exact z-depth, 0 = miss
  Raster<float> primitive;         // -1 = miss
  std::vector<Vec3> canonical;     // per pixel, valid where depth > 0
};

Render render_frame(const SceneGeometry& geo, const CameraModel& cam, const Warp& warp, int stride = 1) {
  const int w = cam.width, h = cam.height;
  Render r{Raster<float>(w, h, 0.0f), Raster<float>(w, h, -1.0f),
           std::vector<Vec3>(static_cast<size_t>(w) * h, Vec3::Zero())};
  parallel_for(static_cast<size_t>(h), [&](size_t row) {
    const int v = static_cast<int>(row);
    if (v % stride) return;
    for (int u = 0; u < w; u += stride) {
      const Vec3 ray = cam.ray(u, v);
      const double len = ray.norm();
      const auto hit = geo.raycast(cam.t, cam.R * ray / len, warp);
      if (!hit) continue;
      r.depth(u, v) = static_cast<float>(hit->t / len);
      r.primitive(u, v) = static_cast<float>(hit->primitive);
      r.canonical[static_cast<size_t>(v) * w + u] = hit->canonical;
    }
  }, 1);
  return r;
}

uint64_t frame_seed(uint64_t seed, int frame, uint64_t stream) {
  return mix64(mix64(seed ^ (stream * 0x632be59bd9b4e019ULL)) + static_cast<uint64_t>(frame));
}

/// Random kernels scaled so the largest sampled surface displacement is 98% of `max_mag`; the headroom
/// covers surface points between the samples.
Warp make_warp(const SceneSpec& spec, const std::vector<Vec3>& surface, const Vec3& lo, const Vec3& hi,
               std::mt19937_64& rng) {
  if (spec.warp.kernels == 0 || spec.warp.max_magnitude == 0.0) return Warp();
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  std::vector<WarpKernel> base;
  for (int k = 0; k < spec.warp.kernels; ++k) {
    WarpKernel w;
    for (int a = 0; a < 3; ++a) w.center[a] = lo[a] + U(rng) * (hi[a] - lo[a]);
    w.sigma = spec.warp.bandwidth;
    w.xi = Twist(spec.warp.rotation_share * Vec3(N(rng), N(rng), N(rng)), Vec3(N(rng), N(rng), N(rng)));
    base.push_back(w);
  }
  auto scaled = [&](double s) {
    std::vector<WarpKernel> ks = base;
    for (auto& k : ks) k.xi = Twist(k.xi.omega * s, k.xi.v * s);
    return Warp(std::move(ks));
  };
  auto max_disp = [&](const Warp& w) {
    double m = 0.0;
    for (const auto& x : surface) m = std::max(m, w.displacement(x).norm());
    return m;
  };
  const double target = 0.98 * spec.warp.max_magnitude;
  double s = 0.01;
  for (int it = 0; it < 30; ++it) {
    const double m = max_disp(scaled(s));
    if (m <= 0.0) return Warp();
    const double ratio = target / m;
    s *= ratio;
    if (std::abs(ratio - 1.0) < 1e-12) break;
  }
  // never exceed the bound on the sampled surface
  while (max_disp(scaled(s)) > target) s *= 1.0 - 1e-9;
  return scaled(s);
}

Raster<float> confidence_map(const SceneSpec& spec, const Raster<float>& depth, std::mt19937_64& rng) {
  const int w = depth.width, h = depth.height;
  Raster<uint8_t> edge(w, h, 0);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const float d = depth(u, v);
      bool e = d <= 0.0f;
      const int du[4] = {1, -1, 0, 0}, dv[4] = {0, 0, 1, -1};
      for (int n = 0; n < 4 && !e; ++n) {
        const int uu = u + du[n], vv = v + dv[n];
        if (!depth.contains(uu, vv)) continue;
        const float dn = depth(uu, vv);
        e = dn <= 0.0f || std::abs(dn - d) > 0.05f * d;
      }
      edge(u, v) = e;
    }
  }
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Raster<float> conf(w, h, 0.0f);
  const int R = spec.edge_radius;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double noise = U(rng);
      if (depth(u, v) <= 0.0f) continue;
      double dist = R;
      for (int dv = -R; dv <= R; ++dv) {
        for (int du = -R; du <= R; ++du) {
          if (edge.contains(u + du, v + dv) && edge(u + du, v + dv)) dist = std::min(dist, std::hypot(du, dv));
        }
      }
      const double prox = 1.0 - dist / R;
      conf(u, v) = static_cast<float>(std::clamp(1.0 - spec.conf_alpha * prox - spec.conf_beta * noise, 0.0, 1.0));
    }
  }
  return conf;
}

}  // namespace

GroundTruth generate(const SceneSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const std::vector<CameraModel> cams = spec.trajectory();
  for (const auto& c : cams) c.validate();
  const SceneGeometry geo(spec.primitives);
  std::filesystem::create_directories(out_dir / "gt");

  // Surface samples bounding the warp magnitude, and the kernel-center box.
  std::vector<Vec3> surface;
  {
    std::mt19937_64 rng(frame_seed(spec.seed, -1, 1));
    for (const auto& p : spec.primitives) {
      const auto pts = sample_primitive(p, 20000, rng);
      surface.insert(surface.end(), pts.begin(), pts.end());
    }
  }
  Vec3 lo = surface.front(), hi = surface.front();
  for (const auto& x : surface) {
    lo = lo.cwiseMin(x);
    hi = hi.cwiseMax(x);
  }

  const size_t n = cams.size();
  GroundTruth gt;
  Scene scene;
  std::vector<Render> renders;
  for (size_t f = 0; f < n; ++f) {
    const int id = static_cast<int>(f);
    std::mt19937_64 warp_rng(frame_seed(spec.seed, id, 2));
    Warp warp = f == 0 ? Warp() : make_warp(spec, surface, lo, hi, warp_rng);

    std::mt19937_64 cam_rng(frame_seed(spec.seed, id, 3));
    std::normal_distribution<double> N(0.0, 1.0);
    CameraModel ingested = cams[f];
    if (f > 0 && (spec.camera_noise_rot > 0.0 || spec.camera_noise_trans > 0.0)) {
      const Twist d(spec.camera_noise_rot * Vec3(N(cam_rng), N(cam_rng), N(cam_rng)),
                    spec.camera_noise_trans * Vec3(N(cam_rng), N(cam_rng), N(cam_rng)));
      const RigidTransform T = twist_exp(d) * cams[f].pose();
      ingested.R = T.R;
      ingested.t = T.t;
    }

    Render r = render_frame(geo, cams[f], warp);
    if (std::none_of(r.depth.data.begin(), r.depth.data.end(), [](float d) { return d > 0.0f; })) {
      throw Error("domain", "frame " + std::to_string(id) + ": camera sees no geometry");
    }

    FrameBundle fb;
    fb.frame_id = id;
    fb.camera = ingested;
    fb.image = RgbImage(cams[f].width, cams[f].height, Eigen::Vector3f::Zero());
    for (int v = 0; v < cams[f].height; ++v) {
      for (int u = 0; u < cams[f].width; ++u) {
        if (r.depth(u, v) <= 0.0f) continue;
        const Vec3& x = r.canonical[static_cast<size_t>(v) * cams[f].width + u];
        fb.image(u, v) = geo.color(x, static_cast<int>(r.primitive(u, v))).cast<float>();
      }
    }
    std::mt19937_64 noise_rng(frame_seed(spec.seed, id, 4));
    fb.confidence = confidence_map(spec, r.depth, noise_rng);
    fb.depth = r.depth;
    Raster<float> mask(cams[f].width, cams[f].height, 0.0f);
    const bool outlier_frame =
        std::find(spec.outliers.frames.begin(), spec.outliers.frames.end(), id) != spec.outliers.frames.end();
    std::normal_distribution<double> G(0.0, 1.0);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int v = 0; v < cams[f].height; ++v) {
      for (int u = 0; u < cams[f].width; ++u) {
        const double d = r.depth(u, v);
        const double g = G(noise_rng), pick = U(noise_rng), sign = U(noise_rng);
        if (d <= 0.0) continue;
        double noisy = d + spec.depth_noise * g;
        if (outlier_frame && pick < spec.outliers.fraction) {
          const double step = spec.outliers.offset / cams[f].ray(u, v).norm();
          noisy = (sign < 0.5 && noisy - step > 0.1) ? noisy - step : noisy + step;
          mask(u, v) = 1.0f;
        }
        fb.depth(u, v) = static_cast<float>(std::max(noisy, 1e-3));
      }
    }
    write_frame(out_dir, fb);
    write_pfm(gt_path(out_dir, "depth", id, ".pfm"), r.depth);
    write_pfm(gt_path(out_dir, "outliers", id, ".pfm"), mask);
    write_pfm(gt_path(out_dir, "primitive", id, ".pfm"), r.primitive);

    json wj;
    wj["frame_id"] = id;
    json ks = json::array();
    for (const auto& k : warp.kernels()) {
      ks.push_back({{"center", vec_json(k.center)},
                    {"sigma", k.sigma},
                    {"omega", vec_json(k.xi.omega)},
                    {"v", vec_json(k.xi.v)}});
    }
    wj["kernels"] = ks;
    wj["camera"] = camera_json(cams[f]);
    wj["ingested_camera"] = camera_json(ingested);
    write_json(gt_path(out_dir, "warp", id, ".json"), wj);

    gt.frame_ids.push_back(id);
    gt.warps.push_back(std::move(warp));
    gt.true_cameras.push_back(cams[f]);
    gt.ingested_cameras.push_back(ingested);
    gt.exact_depth.push_back(r.depth);
    gt.outlier_mask.push_back(std::move(mask));
    renders.push_back(std::move(r));
  }

  // Correspondences: the same canonical surface point seen in two frames.
  CorrespondenceSet corr;
  for (size_t k = 1; k < n; ++k) {
    const CameraModel& dst_cam = cams[k];
    std::vector<size_t> valid;
    for (size_t p = 0; p < renders[k].canonical.size(); ++p) {
      if (renders[k].depth.data[p] > 0.0f && gt.outlier_mask[k].data[p] == 0.0f) valid.push_back(p);
    }
    for (size_t j = 0; j < k; ++j) {
      if (spec.correspondences.max_gap > 0 && k - j > static_cast<size_t>(spec.correspondences.max_gap)) continue;
      std::mt19937_64 rng(frame_seed(spec.seed, static_cast<int>(k * 1000 + j), 5));
      std::uniform_int_distribution<size_t> pick(0, valid.size() - 1);
      std::uniform_real_distribution<double> U(0.0, 1.0);
      const CameraModel& src_cam = cams[j];
      const RigidTransform src_inv = src_cam.pose().inverse();
      int found = 0;
      for (int attempt = 0; attempt < 6 * spec.correspondences.per_pair && found < spec.correspondences.per_pair;
           ++attempt) {
        const size_t p = valid[pick(rng)];
        const double corrupt = U(rng), cu = U(rng), cv = U(rng);
        const Vec3& x = renders[k].canonical[p];
        const auto uv = src_cam.project(src_inv(gt.warps[j].apply(x)));
        if (!uv || uv->x() < 0.0 || uv->y() < 0.0 || uv->x() > src_cam.width - 1 || uv->y() > src_cam.height - 1) {
          continue;
        }
        const Vec3 ray = src_cam.ray(uv->x(), uv->y());
        const auto hit = geo.raycast(src_cam.t, src_cam.R * ray / ray.norm(), gt.warps[j]);
        if (!hit || (hit->canonical - x).norm() > 1e-7) continue;  // occluded
        Correspondence c;
        c.src_frame = static_cast<int>(j);
        c.dst_frame = static_cast<int>(k);
        c.src = *uv;
        c.dst = Vec2(static_cast<double>(p % dst_cam.width), static_cast<double>(p / dst_cam.width));
        c.w = 1.0 - spec.correspondences.corruption;
        if (corrupt < spec.correspondences.corruption) c.src = Vec2(cu * (src_cam.width - 1), cv * (src_cam.height - 1));
        corr.records.push_back(c);
        ++found;
      }
    }
  }
  write_correspondences(out_dir / "correspondences.csv", corr);

  // Canonical surface samples from every rendered pixel.
  {
    std::vector<std::pair<size_t, size_t>> all;
    for (size_t f = 0; f < n; ++f) {
      for (size_t p = 0; p < renders[f].canonical.size(); ++p) {
        if (renders[f].depth.data[p] > 0.0f) all.emplace_back(f, p);
      }
    }
    std::mt19937_64 rng(frame_seed(spec.seed, -1, 6));
    const size_t m = std::min(all.size(), static_cast<size_t>(spec.surface_samples));
    for (size_t i = 0; i < m; ++i) {
      std::uniform_int_distribution<size_t> pick(i, all.size() - 1);
      std::swap(all[i], all[pick(rng)]);
    }
    all.resize(m);
    PointCloud& s = gt.surface_samples;
    s.reserve(m);
    s.normals.reserve(m);
    s.pixels.reserve(m);
    for (const auto& [f, p] : all) {
      const Vec3& x = renders[f].canonical[p];
      const int id = static_cast<int>(renders[f].primitive.data[p]);
      const int w = cams[f].width;
      s.positions.push_back(x);
      s.colors.push_back(geo.color(x, id));
      s.normals.push_back(geo.normal(x));
      s.confidences.push_back(1.0);
      s.frame_ids.push_back(static_cast<int32_t>(f));
      s.pixels.push_back({static_cast<int32_t>(p % w), static_cast<int32_t>(p / w)});
    }
    write_ply(out_dir / "gt" / "surface_samples.ply", s);
  }
  write_scene_spec(out_dir / "gt" / "spec.json", spec);
  return gt;
}

// ---------------------------------------------------------------------------
// metrics

ChamferReport metric_chamfer(const PointCloud& cloud, const PointCloud& gt_samples, size_t samples, uint64_t seed) {
  ChamferReport rep;
  if (cloud.empty() || gt_samples.empty()) throw Error("domain", "chamfer needs two nonempty clouds");
  std::vector<Vec3> gt = gt_samples.positions;
  if (samples > 0 && samples < gt.size()) {
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < samples; ++i) {
      std::uniform_int_distribution<size_t> pick(i, gt.size() - 1);
      std::swap(gt[i], gt[pick(rng)]);
    }
    gt.resize(samples);
  }
  auto one_sided = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to, double& mean, double& median) {
    const NeighborIndex index(to);
    std::vector<double> d(from.size());
    parallel_for(from.size(), [&](size_t i) { d[i] = std::sqrt(index.nearest(from[i]).dist2); });
    double sum = 0.0;
    for (double x : d) sum += x;
    mean = sum / static_cast<double>(d.size());
    median = percentile(std::move(d), 50.0);
  };
  one_sided(cloud.positions, gt, rep.mean_cloud_to_gt, rep.median_cloud_to_gt);
  one_sided(gt, cloud.positions, rep.mean_gt_to_cloud, rep.median_gt_to_cloud);
  return rep;
}

double metric_thickness(const PointCloud& cloud, int k) {
  if (k < 3) throw Error("domain", "thickness needs k >= 3");
  if (cloud.size() < static_cast<size_t>(k)) throw Error("domain", "thickness needs at least k points");
  const NeighborIndex index(cloud.positions);
  std::vector<double> rms(cloud.size());
  parallel_for(cloud.size(), [&](size_t i) {
    const auto nb = index.k_nearest(cloud.positions[i], static_cast<size_t>(k));
    Vec3 mean = Vec3::Zero();
    for (const auto& q : nb) mean += index.point(q.index);
    mean /= static_cast<double>(nb.size());
    Mat3 C = Mat3::Zero();
    for (const auto& q : nb) {
      const Vec3 d = index.point(q.index) - mean;
      C += d * d.transpose();
    }
    C /= static_cast<double>(nb.size());
    const Eigen::SelfAdjointEigenSolver<Mat3> es(C, Eigen::EigenvaluesOnly);
    rms[i] = std::sqrt(std::max(0.0, es.eigenvalues()(0)));
  });
  double sum = 0.0;
  for (double r : rms) sum += r;
  return sum / static_cast<double>(rms.size());
}

double metric_deformation_error(const std::vector<FrameState>& states, const GroundTruth& gt, int stride) {
  if (stride < 1) throw Error("domain", "stride must be positive");
  std::vector<double> errors;
  for (const auto& st : states) {
    const size_t s = gt.slot(st.frame_id);
    if (s == 0) continue;  // the reference frame is exact by construction
    const CameraModel& cam = gt.true_cameras[s];
    const Raster<float>& depth = gt.exact_depth[s];
    std::vector<Vec3> cam_pts;
    for (int v = 0; v < depth.height; v += stride) {
      for (int u = 0; u < depth.width; u += stride) {
        if (depth(u, v) > 0.0f) cam_pts.push_back(cam.ray(u, v) * static_cast<double>(depth(u, v)));
      }
    }
    if (cam_pts.empty()) continue;
    DeformBatch batch;
    deform_points(st, cam_pts, st.field_enabled, batch);
    const RigidTransform pose = cam.pose();
    const size_t base = errors.size();
    errors.resize(base + cam_pts.size());
    parallel_for(cam_pts.size(), [&](size_t i) {
      const Vec3 truth = gt.warps[s].inverse(pose(cam_pts[i]));
      errors[base + i] = (batch.world[i] - truth).norm();
    });
  }
  if (errors.empty()) return 0.0;
  return percentile(std::move(errors), 50.0);
}

}  // namespace driftalign
