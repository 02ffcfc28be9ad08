#include <algorithm>
#include <random>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "driftalign/inverse.hpp"
#include "driftalign/ply.hpp"
#include "test_util.hpp"

using namespace driftalign;

namespace {

std::vector<Vec3> random_points(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-0.3, 0.3);
  std::vector<Vec3> p(n);
  for (auto& x : p) x = Vec3(U(rng), U(rng), 1.0 + U(rng));
  return p;
}

// Frames whose forward field is a constant translation c_f (through the head bias).
std::vector<FrameState> translated_frames(const std::vector<std::vector<Vec3>>& pts, const std::vector<Vec3>& shifts) {
  AlignParams ap;
  std::vector<FrameState> states;
  for (size_t f = 0; f < pts.size(); ++f) {
    FrameState s;
    s.frame_id = static_cast<int>(f);
    s.pose0 = twist_exp({Vec3(0.0, 0.2 * static_cast<double>(f), 0.0), Vec3(0.1 * static_cast<double>(f), 0.0, 0.0)});
    s.field = make_frame_field(ap, pts[f], s.frame_id);
    const size_t n = s.field.param_count();
    std::fill(s.field.params().begin(), s.field.params().end(), 0.0f);  // only the bias remains
    for (int a = 0; a < 3; ++a) {
      s.field.params()[n - 3 + static_cast<size_t>(a)] = static_cast<float>(shifts[f][a] / s.field.config().output_scale);
    }
    s.field_enabled = true;
    states.push_back(std::move(s));
  }
  return states;
}

}  // namespace

TEST(Pairs, IdentityDeformationIsTheCamera) {
  const std::vector<std::vector<Vec3>> pts = {random_points(300, 1), random_points(200, 2)};
  const auto states = translated_frames(pts, {Vec3::Zero(), Vec3::Zero()});
  const TrainingPairSet set = sample_pairs(states, pts, 100, 7);
  ASSERT_EQ(set.records.size(), 200u);
  for (const auto& r : set.records) {
    const RigidTransform cam = states[static_cast<size_t>(r.view)].camera();
    EXPECT_LT((r.p0 - (cam.R * r.p_cam + cam.t)).norm(), 1e-15);
  }
}

TEST(Pairs, DeterministicConsistentAndHoldoutDisjoint) {
  const std::vector<std::vector<Vec3>> pts = {random_points(500, 3), random_points(40, 4)};
  const auto states = translated_frames(pts, {Vec3(0.01, 0, 0), Vec3(0, -0.02, 0.005)});
  std::vector<std::vector<Vec3>> held_a, held_b;
  const TrainingPairSet a = sample_pairs(states, pts, 300, 9, &held_a, 64);
  const TrainingPairSet b = sample_pairs(states, pts, 300, 9, &held_b, 64);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].p_cam, b.records[i].p_cam);
    EXPECT_EQ(a.records[i].p0, b.records[i].p0);
  }
  EXPECT_EQ(held_a, held_b);
  EXPECT_LT(verify_pairs(a, states), 1e-9);
  EXPECT_EQ(held_a[0].size(), 64u);
  EXPECT_EQ(held_a[1].size(), 10u);  // a quarter of a 40-point frame
  size_t train1 = 0;
  for (const auto& r : a.records) {
    train1 += r.view == 1;
    for (const auto& h : held_a[static_cast<size_t>(r.view)]) EXPECT_NE(h, r.p_cam);
  }
  EXPECT_EQ(train1, 30u);  // small frame: everything that is not held out
}

TEST(InverseLoss, MatchesFiniteDifferences) {
  InverseParams ip;
  ip.field.levels = 3;
  ip.field.hidden = 8;
  ip.field.log2_table = 8;
  ip.embedding_dim = 3;
  const std::vector<std::vector<Vec3>> pts = {random_points(60, 5), random_points(60, 6)};
  const auto states = translated_frames(pts, {Vec3::Zero(), Vec3(0.01, 0, 0)});
  const TrainingPairSet set = sample_pairs(states, pts, 50, 1);
  DeformationField f = make_inverse_field(ip, set, states);
  EXPECT_TRUE(f.has_views());
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> U(-0.5f, 0.5f);
  for (float& p : f.params()) p = U(rng);

  std::vector<Vec3> x, y;
  std::vector<int> v;
  for (const auto& r : set.records) {
    x.push_back(inverse_input(states[static_cast<size_t>(r.view)], r.p0));
    y.push_back(r.p_cam);
    v.push_back(r.view);
  }
  double want = 0.0;
  for (size_t i = 0; i < x.size(); ++i) want += (twist_exp(f.eval(x[i], v[i]))(x[i]) - y[i]).squaredNorm();
  std::vector<double> grad(f.param_count(), 0.0);
  EXPECT_NEAR(inverse_loss(f, x, v, y, grad), want / static_cast<double>(x.size()), 1e-14);

  std::uniform_int_distribution<size_t> pick(0, f.param_count() - 1);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t i = pick(rng);
    const float x0 = f.params()[i];
    const float hi = x0 + 1e-3f, lo = x0 - 1e-3f;
    f.params()[i] = hi;
    const double a = inverse_loss(f, x, v, y, {});
    f.params()[i] = lo;
    const double b = inverse_loss(f, x, v, y, {});
    f.params()[i] = x0;
    const double fd = (a - b) / (static_cast<double>(hi) - static_cast<double>(lo));
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "param " << i;
  }
}

TEST(TrainInverse, IdentityForwardGivesZeroLoss) {
  const std::vector<std::vector<Vec3>> pts = {random_points(300, 7), random_points(300, 8)};
  const auto states = translated_frames(pts, {Vec3::Zero(), Vec3::Zero()});
  InverseParams ip;
  ip.iters = 50;
  const TrainingPairSet set = sample_pairs(states, pts, 300, 1);
  DeformationField f = make_inverse_field(ip, set, states);
  const InverseReport r = train_inverse(set, states, f, ip);
  EXPECT_LT(r.final_loss, 1e-8);
}

TEST(TrainInverse, RecoversConstantTranslations) {
  const std::vector<std::vector<Vec3>> pts = {random_points(800, 9), random_points(800, 10), random_points(800, 11)};
  const std::vector<Vec3> shifts = {Vec3::Zero(), Vec3(0.02, -0.01, 0.0), Vec3(-0.015, 0.0, 0.025)};
  const auto states = translated_frames(pts, shifts);
  InverseParams ip;
  ip.iters = 800;
  ip.batch = 512;
  const TrainingPairSet set = sample_pairs(states, pts, 800, 1);
  DeformationField f = make_inverse_field(ip, set, states);
  train_inverse(set, states, f, ip);
  for (size_t v = 0; v < states.size(); ++v) {
    const RigidTransform cam = states[v].camera();
    std::vector<double> err;
    for (size_t i = 0; i < pts[v].size(); i += 8) {
      const Vec3 p0 = cam(pts[v][i] + shifts[v]);
      const Vec3 x = inverse_input(states[v], p0);
      const Twist xi = f.eval(x, static_cast<int>(v));
      err.push_back((twist_exp(xi)(x) - x + shifts[v]).norm());  // displacement should equal -shift
      EXPECT_LT((apply_inverse(f, states[v], static_cast<int>(v), p0) - pts[v][i]).norm(), 2e-3);
    }
    std::sort(err.begin(), err.end());
    EXPECT_LT(err[err.size() / 2], 1e-3) << "view " << v;
  }
  const auto rt = roundtrip_errors(f, states[1], 1, pts[1]);
  EXPECT_EQ(rt.size(), pts[1].size());
  EXPECT_LT(*std::max_element(rt.begin(), rt.end()), 3e-3);
}

TEST(Splats, LatticeScaleOpacityAndShZero) {
  // 21 x 21 grid in the z = 0 plane with spacing h
  const double h = 0.25;
  PointCloud c;
  for (int i = 0; i < 21; ++i) {
    for (int j = 0; j < 21; ++j) {
      c.positions.push_back(Vec3(i * h, j * h, 0.0));
      c.normals.push_back(Vec3::UnitZ());
      c.colors.push_back(Vec3(i / 20.0, j / 20.0, 0.5));
      c.confidences.push_back(1.0);
      c.frame_ids.push_back(0);
    }
  }
  // 10 lattice neighbors: 4 at h, 4 at h*sqrt(2), 2 of the 4 at 2h
  const double lattice = h * (4.0 + 4.0 * std::sqrt(2.0) + 2.0 * 2.0) / 10.0;
  const SplatSet s = export_splats(c, {});
  ASSERT_EQ(s.splats.size(), c.size());
  for (size_t n = 0; n < s.splats.size(); ++n) {
    const auto& sp = s.splats[n];
    const int i = static_cast<int>(n) / 21, j = static_cast<int>(n) % 21;
    EXPECT_EQ(sp.position, c.positions[n]);
    EXPECT_EQ(sp.opacity, 0.1);
    EXPECT_EQ(sp.scale[0], sp.scale[1]);
    if (i >= 2 && i <= 18 && j >= 2 && j <= 18) {
      EXPECT_DOUBLE_EQ(sp.scale[0], lattice);
    }
    const Mat3 R = sp.rotation.toRotationMatrix();
    EXPECT_LT((R.col(2) - Vec3::UnitZ()).norm(), 1e-12);
    EXPECT_LT((R.transpose() * R - Mat3::Identity()).norm(), 1e-12);
    EXPECT_LT((color_from_sh0(sp.sh0) - c.colors[n]).norm(), 1e-15);
  }
  EXPECT_EQ(sh0_from_color(Vec3::Constant(0.5)), Vec3::Zero());

  SplatParams sub;
  sub.target_count = 100;
  sub.seed = 4;
  const SplatSet a = export_splats(c, sub), b = export_splats(c, sub);
  ASSERT_EQ(a.splats.size(), 100u);
  for (size_t n = 0; n < a.splats.size(); ++n) EXPECT_EQ(a.splats[n].position, b.splats[n].position);
  sub.target_count = 10000;
  EXPECT_EQ(export_splats(c, sub).splats.size(), c.size());
}

TEST(Splats, ShZeroRoundtripIsBitExact) {
  // Every color that some coefficient decodes to exactly (found by a wide
  // brute-force search) must come back bit-exactly.
  auto decodable = [](double c) {
    double x = (c - 0.5) / kY00;
    for (int k = 0; k < 64; ++k) x = std::nextafter(x, -HUGE_VAL);
    for (int k = 0; k < 128; ++k, x = std::nextafter(x, HUGE_VAL)) {
      if (color_from_sh0(Vec3::Constant(x)).x() == c) return true;
    }
    return false;
  };
  int exact = 0;
  for (int k = 0; k <= 1024; ++k) {
    const double c = k / 1024.0;
    if (!decodable(c)) continue;
    ++exact;
    EXPECT_EQ(color_from_sh0(sh0_from_color(Vec3::Constant(c))).x(), c) << k;
  }
  EXPECT_GT(exact, 512);
  // 8-bit colors come back as the same byte, also through float32 storage
  for (int k = 0; k < 256; ++k) {
    const Vec3 rgb = Vec3::Constant(k / 255.0);
    const Vec3 sh = sh0_from_color(rgb);
    const Vec3 sh32 = sh.cast<float>().cast<double>();
    EXPECT_EQ(std::lround(color_from_sh0(sh).x() * 255.0), k);
    EXPECT_EQ(std::lround(color_from_sh0(sh32).x() * 255.0), k);
  }
}

TEST(Splats, PlyRoundtripBothEncodings) {
  testutil::TempDir dir("splat");
  PointCloud c;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    c.positions.push_back(Vec3(U(rng), U(rng), U(rng)));
    c.normals.push_back(Vec3(U(rng) - 0.5, U(rng) - 0.5, 1.0).normalized());
    c.colors.push_back(Vec3(U(rng), U(rng), U(rng)));
    c.confidences.push_back(1.0);
    c.frame_ids.push_back(0);
  }
  const SplatSet s = export_splats(c, {});
  for (SplatEncoding e : {SplatEncoding::Linear, SplatEncoding::Activated}) {
    write_splat_ply(dir / "s.ply", s, e);
    const SplatSet r = read_splat_ply(dir / "s.ply", e);
    const PlyTable t = read_ply_table(dir / "s.ply");
    for (const char* name : {"x", "y", "z", "nx", "ny", "nz", "scale_0", "scale_1", "rot_0", "rot_1", "rot_2",
                             "rot_3", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"}) {
      EXPECT_TRUE(t.has(name)) << name;
    }
    ASSERT_EQ(r.splats.size(), s.splats.size());
    for (size_t i = 0; i < s.splats.size(); ++i) {
      EXPECT_LT((r.splats[i].position - s.splats[i].position).norm(), 1e-6);
      EXPECT_NEAR(r.splats[i].scale[0], s.splats[i].scale[0], 1e-6 * s.splats[i].scale[0]);
      EXPECT_NEAR(r.splats[i].opacity, 0.1, 1e-6);
      EXPECT_LT((r.splats[i].sh0 - s.splats[i].sh0).norm(), 1e-6);
    }
    if (e == SplatEncoding::Linear) {
      for (double o : t.column("opacity")) EXPECT_EQ(o, static_cast<double>(0.1f));
    }
  }
}
