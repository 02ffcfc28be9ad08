#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "driftalign/synth.hpp"
#include "test_util.hpp"

using namespace driftalign;

namespace {

SceneSpec small_spec() {
  SceneSpec s = SceneSpec::desk();
  s.width = 80;
  s.height = 60;
  s.orbit.count = 4;
  s.surface_samples = 20000;
  s.correspondences.per_pair = 40;
  return s;
}

SceneSpec consistent_spec() {
  SceneSpec s = small_spec();
  s.warp.max_magnitude = 0.0;
  s.depth_noise = 0.0;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

PointCloud grid_plane(double z, int n = 41, double step = 0.01) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      c.positions.push_back(Vec3(i * step, j * step, z));
      c.colors.push_back(Vec3::Constant(0.5));
      c.confidences.push_back(1.0);
      c.frame_ids.push_back(0);
    }
  }
  return c;
}

std::vector<FrameState> ingested_identity_states(const Scene& scene) {
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

// RMS distance of every frame's points to the nearest point of the previous frame.
double adjacent_nn_rms(const Scene& scene, int stride) {
  double sum = 0.0;
  size_t n = 0;
  for (size_t f = 1; f < scene.frames.size(); ++f) {
    const PointCloud prev = unproject(scene.frames[f - 1], stride);
    const NeighborIndex index(prev.positions);
    for (const auto& p : unproject(scene.frames[f], stride).positions) {
      sum += index.nearest(p).dist2;
      ++n;
    }
  }
  return std::sqrt(sum / static_cast<double>(n));
}

}  // namespace

TEST(Warp, InverseUndoesApply) {
  std::vector<WarpKernel> k = {{Vec3(0, 0, 0), 0.25, Twist(Vec3(0.05, 0.0, 0.02), Vec3(0.01, 0.02, 0.0))},
                               {Vec3(0.2, 0.1, 0), 0.2, Twist(Vec3(0.0, -0.04, 0.0), Vec3(0.0, 0.0, -0.015))}};
  const Warp w(k);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-0.5, 0.5);
  for (int i = 0; i < 200; ++i) {
    const Vec3 x(U(rng), U(rng), U(rng));
    EXPECT_LT((w.inverse(w.apply(x)) - x).norm(), 1e-10);
  }
  // one kernel of pure translation: W(x) = x + phi(x) v
  const Warp t({{Vec3::Zero(), 0.3, Twist(Vec3::Zero(), Vec3(0.01, 0, 0))}});
  const Vec3 x(0.1, 0.2, 0.0);
  EXPECT_LT((t.displacement(x) - std::exp(-x.squaredNorm() / (2 * 0.09)) * Vec3(0.01, 0, 0)).norm(), 1e-15);
}

TEST(Synth, ConsistentWorldLiesOnPrimitives) {
  testutil::TempDir dir("synth0");
  const SceneSpec spec = consistent_spec();
  generate(spec, dir.path());
  const Scene scene = load_scene(dir.path());
  ASSERT_EQ(scene.frames.size(), 4u);
  const SceneGeometry geo(spec.primitives);
  double worst = 0.0;
  size_t n = 0;
  for (const auto& f : scene.frames) {
    for (const auto& p : unproject(f, 1).positions) {
      worst = std::max(worst, std::abs(geo.sdf(p)));
      ++n;
    }
  }
  EXPECT_GT(n, 4000u);
  EXPECT_LT(worst, 1e-6);
}

TEST(Synth, DriftIsVisible) {
  testutil::TempDir a("drift"), b("nodrift");
  SceneSpec spec = SceneSpec::desk();
  spec.surface_samples = 1000;
  generate(spec, a.path());
  spec.warp.max_magnitude = 0.0;
  generate(spec, b.path());
  const double drift = adjacent_nn_rms(load_scene(a.path()), 1);
  const double control = adjacent_nn_rms(load_scene(b.path()), 1);
  EXPECT_GE(drift, 0.01);
  EXPECT_LT(control, 0.01);  // sampling and noise alone stay below the bar
}

TEST(Synth, WarpMagnitudeWithinSceneBound) {
  testutil::TempDir dir("warpmax");
  const SceneSpec spec = small_spec();
  const GroundTruth gt = generate(spec, dir.path());
  EXPECT_TRUE(gt.warps[0].identity());
  for (size_t f = 1; f < gt.warps.size(); ++f) {
    double worst = 0.0;
    for (const auto& p : gt.surface_samples.positions) worst = std::max(worst, gt.warps[f].displacement(p).norm());
    EXPECT_LE(worst, spec.warp.max_magnitude);
    EXPECT_GT(worst, 0.5 * spec.warp.max_magnitude);
  }
}

TEST(Synth, CorrespondencesAreConsistent) {
  testutil::TempDir dir("corr");
  SceneSpec spec = small_spec();
  spec.depth_noise = 0.0;
  const GroundTruth gt = generate(spec, dir.path());
  const Scene scene = load_scene(dir.path());
  const SceneGeometry geo(spec.primitives);
  ASSERT_GT(scene.correspondences.records.size(), 50u);
  for (const auto& r : scene.correspondences.records) {
    EXPECT_EQ(r.w, 1.0);
    // destination: integer pixel, exact depth, true camera, inverse warp
    const size_t k = gt.slot(r.dst_frame), j = gt.slot(r.src_frame);
    const int u = static_cast<int>(r.dst.x()), v = static_cast<int>(r.dst.y());
    ASSERT_EQ(static_cast<double>(u), r.dst.x());
    const CameraModel& ck = gt.true_cameras[k];
    const Vec3 world_k = ck.pose()(ck.ray(u, v) * static_cast<double>(gt.exact_depth[k](u, v)));
    const Vec3 canon_k = gt.warps[k].inverse(world_k);
    // source: cast the sub-pixel ray into frame j's warped world
    const CameraModel& cj = gt.true_cameras[j];
    const Vec3 dir = (cj.R * cj.ray(r.src.x(), r.src.y())).normalized();
    const auto hit = geo.raycast(cj.t, dir, gt.warps[j]);
    ASSERT_TRUE(hit.has_value());
    EXPECT_LT((hit->canonical - canon_k).norm(), 1e-6);
  }
}

TEST(Synth, DeterministicOutput) {
  testutil::TempDir a("det_a"), b("det_b");
  SceneSpec spec = small_spec();
  spec.outliers.frames = {2};
  spec.camera_noise_rot = 0.002;
  spec.camera_noise_trans = 0.003;
  generate(spec, a.path());
  generate(spec, b.path());
  size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 4u * 4u);
  spec.seed = 2;
  testutil::TempDir c("det_c");
  generate(spec, c.path());
  EXPECT_NE(slurp(a / "frame_0001.depth.pfm"), slurp(c / "frame_0001.depth.pfm"));
}

TEST(Synth, OutlierMaskMatchesInjectedFraction) {
  testutil::TempDir dir("outl");
  SceneSpec spec = small_spec();
  spec.outliers.frames = {1};
  const GroundTruth gt = generate(spec, dir.path());
  const Scene scene = load_scene(dir.path());
  const auto& mask = gt.outlier_mask[1];
  const auto& depth = scene.frames[1].depth;
  size_t valid = 0, out = 0;
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      if (depth(u, v) <= 0.0f) continue;
      ++valid;
      if (mask(u, v) > 0.5f) {
        ++out;
        // offset is along the viewing ray, so compare range rather than z
        const double range = gt.true_cameras[1].ray(u, v).norm();
        EXPECT_NEAR(std::abs(depth(u, v) - gt.exact_depth[1](u, v)) * range, 0.5, 0.02);
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(out) / static_cast<double>(valid), 0.1, 0.02);
  for (float m : gt.outlier_mask[0].data) EXPECT_EQ(m, 0.0f);
}

TEST(Synth, CameraSeeingNothingIsNamed) {
  testutil::TempDir dir("blind");
  SceneSpec spec = small_spec();
  auto cams = spec.trajectory();
  cams[2].R = cams[2].R * Eigen::AngleAxisd(M_PI, Vec3::UnitY()).toRotationMatrix();  // look away
  cams[2].t = Vec3(0, 5, 0);
  spec.cameras = cams;
  try {
    generate(spec, dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "domain");
    EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos);
  }
}

TEST(Synth, SpecRoundtripAndUnknownKeys) {
  testutil::TempDir dir("spec");
  SceneSpec spec = small_spec();
  spec.outliers.frames = {1, 3};
  write_scene_spec(dir / "s.json", spec);
  const SceneSpec r = read_scene_spec(dir / "s.json");
  EXPECT_EQ(r.width, 80);
  EXPECT_EQ(r.outliers.frames, spec.outliers.frames);
  EXPECT_EQ(r.primitives.size(), 3u);
  std::ofstream(dir / "bad.json") << R"({"widht": 10})";
  EXPECT_THROW(read_scene_spec(dir / "bad.json"), Error);
  std::ofstream(dir / "neg.json") << R"({"depth_noise": -1})";
  EXPECT_THROW(read_scene_spec(dir / "neg.json"), Error);
}

TEST(Metrics, ChamferClosedForms) {
  const PointCloud plane = grid_plane(0.0);
  const ChamferReport self = metric_chamfer(plane, plane);
  EXPECT_EQ(self.mean(), 0.0);
  EXPECT_EQ(self.median(), 0.0);
  const ChamferReport off = metric_chamfer(grid_plane(0.01), plane);
  EXPECT_NEAR(off.mean_cloud_to_gt, 0.01, 1e-12);
  EXPECT_NEAR(off.median_cloud_to_gt, 0.01, 1e-12);
  // monotone under growing noise
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0.0, 1.0);
  double prev = 0.0;
  for (double sigma : {0.001, 0.002, 0.004, 0.008}) {
    PointCloud noisy = plane;
    std::mt19937_64 r2(5);
    for (auto& p : noisy.positions) p.z() += sigma * N(r2);
    const double m = metric_chamfer(noisy, plane).mean();
    EXPECT_GT(m, prev);
    prev = m;
  }
}

// Mean over points of the RMS spread along the least-variance axis of the k nearest
// neighbours, found by exhaustive search.
double brute_thickness(const PointCloud& c, int k) {
  double sum = 0.0;
  for (const auto& p : c.positions) {
    std::vector<std::pair<double, size_t>> d;
    for (size_t j = 0; j < c.size(); ++j) d.emplace_back((c.positions[j] - p).squaredNorm(), j);
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    Vec3 mean = Vec3::Zero();
    for (int i = 0; i < k; ++i) mean += c.positions[d[i].second];
    mean /= k;
    Mat3 C = Mat3::Zero();
    for (int i = 0; i < k; ++i) {
      const Vec3 q = c.positions[d[i].second] - mean;
      C += q * q.transpose() / k;
    }
    sum += std::sqrt(std::max(0.0, Eigen::SelfAdjointEigenSolver<Mat3>(C).eigenvalues()(0)));
  }
  return sum / static_cast<double>(c.size());
}

TEST(Metrics, ThicknessClosedForms) {
  const PointCloud plane = grid_plane(0.0);
  EXPECT_LT(metric_thickness(plane, 16), 1e-12);
  // two layers 2 mm apart on a 1 cm grid: an interior point's 10 nearest are
  // itself, its twin, and the 4+4 axis neighbours on both layers -> spread g/2
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> J(-1e-4, 1e-4);
  PointCloud two = grid_plane(0.0, 21);
  two.append(grid_plane(0.002, 21));
  for (auto& p : two.positions) p += Vec3(J(rng), J(rng), 0.0);  // break neighbour ties
  const double t = metric_thickness(two, 10);
  EXPECT_NEAR(t, brute_thickness(two, 10), 1e-9);
  EXPECT_NEAR(t, 0.001, 2e-4);  // border points skew the mean slightly
  // invariance under rigid motion
  PointCloud moved = two;
  const RigidTransform T = twist_exp({Vec3(0.3, -0.5, 0.2), Vec3(1.0, 2.0, -3.0)});
  for (auto& p : moved.positions) p = T(p);
  EXPECT_NEAR(metric_thickness(moved, 10), t, 1e-9);
}

TEST(Metrics, DeformationErrorZeroAndConstantTranslation) {
  testutil::TempDir dir("deferr");
  const SceneSpec spec = consistent_spec();
  GroundTruth gt = generate(spec, dir.path());
  const Scene scene = load_scene(dir.path());
  std::vector<FrameState> states = ingested_identity_states(scene);
  EXPECT_LT(metric_deformation_error(states, gt, 2), 1e-12);

  // a warp that is a constant translation d (one very wide kernel)
  const Vec3 d(0.012, -0.004, 0.003);
  for (size_t f = 1; f < gt.warps.size(); ++f) gt.warps[f] = Warp({{Vec3::Zero(), 1e9, Twist(Vec3::Zero(), d)}});
  EXPECT_NEAR(metric_deformation_error(states, gt, 2), d.norm(), 1e-9);
  for (size_t f = 1; f < states.size(); ++f) states[f].xi_g = Twist(Vec3::Zero(), -d);
  EXPECT_LT(metric_deformation_error(states, gt, 2), 1e-9);
}
