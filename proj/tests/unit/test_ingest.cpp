#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <tuple>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "driftalign/ingest.hpp"
#include "driftalign/ply.hpp"
#include "test_util.hpp"

using namespace driftalign;

namespace {

FrameBundle tiny_frame(int id, int w = 8, int h = 6) {
  FrameBundle f;
  f.frame_id = id;
  f.depth = Raster<float>(w, h, 1.5f);
  f.confidence = Raster<float>(w, h, 0.8f);
  f.image = RgbImage(w, h, Eigen::Vector3f(0.2f, 0.4f, 0.6f));
  f.camera.K << 10, 0, 3.5, 0, 10, 2.5, 0, 0, 1;
  f.camera.width = w;
  f.camera.height = h;
  return f;
}

PointCloud random_cloud(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 0.3), C(0.0, 1.0);
  PointCloud c;
  for (size_t i = 0; i < n; ++i) {
    c.positions.push_back(Vec3(U(rng), U(rng), U(rng)));
    c.colors.push_back(Vec3(C(rng), C(rng), C(rng)));
    c.confidences.push_back(C(rng));
    c.frame_ids.push_back(static_cast<int32_t>(i % 3));
  }
  return c;
}

// Brute-force filter written from the definition.
std::vector<size_t> reference_filter(const PointCloud& c, double s, double tl, double tc) {
  std::map<std::tuple<long, long, long>, std::vector<size_t>> vox;
  for (size_t i = 0; i < c.size(); ++i) {
    const Vec3 q = (c.positions[i] / s).array().floor();
    vox[{static_cast<long>(q.x()), static_cast<long>(q.y()), static_cast<long>(q.z())}].push_back(i);
  }
  auto perc = [](std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos), hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  std::vector<double> counts;
  for (const auto& [k, m] : vox) counts.push_back(static_cast<double>(m.size()));
  const double tau_cnt = perc(counts, tc);
  std::vector<size_t> keep;
  for (const auto& [k, m] : vox) {
    std::vector<double> conf;
    for (size_t i : m) conf.push_back(c.confidences[i]);
    const double tau = perc(conf, tl);
    for (size_t i : m) {
      if (c.confidences[i] >= tau && static_cast<double>(m.size()) >= tau_cnt) keep.push_back(i);
    }
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace

TEST(Ply, CloudRoundtrip) {
  testutil::TempDir dir("ply");
  PointCloud c = random_cloud(50, 1);
  for (size_t i = 0; i < c.size(); ++i) {
    c.normals.push_back(i % 7 == 0 ? Vec3(Vec3::Zero()) : Vec3(Vec3(1, 2, 2) / 3.0));
    c.pixels.push_back({static_cast<int32_t>(i), static_cast<int32_t>(2 * i)});
  }
  write_ply(dir / "c.ply", c);
  const PointCloud r = read_ply(dir / "c.ply");
  ASSERT_EQ(r.size(), c.size());
  for (size_t i = 0; i < c.size(); ++i) {
    EXPECT_LT((r.positions[i] - c.positions[i]).norm(), 1e-6);
    EXPECT_LT((r.colors[i] - c.colors[i]).cwiseAbs().maxCoeff(), 0.5 / 255 + 1e-9);
    EXPECT_EQ(r.frame_ids[i], c.frame_ids[i]);
    EXPECT_EQ(r.pixels[i], c.pixels[i]);
  }
}

TEST(Ply, TableTypesRoundtripExactly) {
  testutil::TempDir dir("plytab");
  PlyTable t;
  t.add("a", PlyType::Float64, {0.1, -2.5e300, 3.0});
  t.add("b", PlyType::Int16, {-32768, 0, 32767});
  t.add("c", PlyType::UInt8, {0, 128, 255});
  write_ply_table(dir / "t.ply", t);
  const PlyTable r = read_ply_table(dir / "t.ply");
  EXPECT_EQ(r.column("a"), t.column("a"));
  EXPECT_EQ(r.column("b"), t.column("b"));
  EXPECT_EQ(r.column("c"), t.column("c"));
}

TEST(Rasters, PfmAndPngRoundtrip) {
  testutil::TempDir dir("raster");
  Raster<float> d(5, 3);
  for (size_t i = 0; i < d.data.size(); ++i) d.data[i] = 0.25f * static_cast<float>(i);
  write_pfm(dir / "d.pfm", d);
  EXPECT_EQ(read_pfm(dir / "d.pfm").data, d.data);
  RgbImage im(4, 2, Eigen::Vector3f(0.0f, 0.5f, 1.0f));
  im(3, 1) = Eigen::Vector3f(1.0f, 0.0f, 0.2f);
  write_png(dir / "i.png", im);
  const RgbImage r = read_png(dir / "i.png");
  for (size_t i = 0; i < im.data.size(); ++i) {
    EXPECT_LT((r.data[i] - im.data[i]).cwiseAbs().maxCoeff(), 0.5f / 255.0f + 1e-6f);
  }
}

TEST(Unproject, IdentityFocalCamera) {
  FrameBundle f = tiny_frame(0, 2, 2);
  f.camera.K = Mat3::Identity();
  f.depth = Raster<float>(2, 2, 0.0f);
  f.depth(0, 0) = 2.0f;
  const PointCloud c = unproject(f, 1);
  ASSERT_EQ(c.size(), 1u);  // depth 0 pixels produce no points
  EXPECT_LT((c.positions[0] - Vec3(0, 0, 2)).norm(), 1e-15);
}

TEST(Unproject, PoseAndStride) {
  FrameBundle f = tiny_frame(3);
  f.camera.R = Eigen::AngleAxisd(0.3, Vec3::UnitY()).toRotationMatrix();
  f.camera.t = Vec3(1, 2, 3);
  const PointCloud w = unproject(f, 2), c = unproject_camera(f, 2);
  ASSERT_EQ(w.size(), 4u * 3u);
  for (size_t i = 0; i < w.size(); ++i) {
    const auto [u, v] = c.pixels[i];
    EXPECT_EQ(u % 2, 0);
    EXPECT_EQ(v % 2, 0);
    const Vec3 pc = f.camera.K.inverse() * Vec3(u, v, 1) * 1.5;
    EXPECT_LT((c.positions[i] - pc).norm(), 1e-12);
    EXPECT_LT((w.positions[i] - (f.camera.R * pc + f.camera.t)).norm(), 1e-12);
    EXPECT_EQ(w.frame_ids[i], 3);
  }
}

TEST(Scene, LoadWriteAndErrors) {
  testutil::TempDir dir("scene");
  write_frame(dir.path(), tiny_frame(0));
  Scene one = load_scene(dir.path());
  EXPECT_EQ(one.frames.size(), 1u);
  EXPECT_TRUE(one.correspondences.records.empty());

  write_frame(dir.path(), tiny_frame(1));
  CorrespondenceSet cs;
  cs.records.push_back({0, 1, Vec2(1.5, 2.25), Vec2(3, 4), 0.9});
  write_correspondences(dir / "correspondences.csv", cs);
  const Scene two = load_scene(dir.path());
  ASSERT_EQ(two.frames.size(), 2u);
  ASSERT_EQ(two.correspondences.records.size(), 1u);
  EXPECT_EQ(two.correspondences.records[0].src, Vec2(1.5, 2.25));

  // depth raster mismatch names the frame
  FrameBundle bad = tiny_frame(2);
  bad.depth = Raster<float>(7, 6, 1.0f);
  write_frame(dir.path(), bad);
  try {
    load_scene(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos);
  }
  std::filesystem::remove(dir / "frame_0002.depth.pfm");
  std::filesystem::remove(dir / "frame_0001.cam.json");
  EXPECT_THROW(load_scene(dir.path()), Error);  // missing camera
}

TEST(Percentile, InclusiveLinear) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 0), 1);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 100), 4);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({10, 1}, 50), 5.5);
}

TEST(Filter, EqualConfidencesSingleVoxelKeepAll) {
  PointCloud c = random_cloud(20, 2);
  for (auto& p : c.positions) p *= 0.01;
  std::fill(c.confidences.begin(), c.confidences.end(), 0.5);
  EXPECT_EQ(voxel_confidence_filter(c, 1.0, 75, 50).size(), 20u);
}

TEST(Filter, LowCountVoxelRemoved) {
  PointCloud c;
  for (int i = 0; i < 11; ++i) {
    c.positions.push_back(i < 10 ? Vec3(0.1, 0.1, 0.1) : Vec3(1.5, 0.1, 0.1));
    c.colors.push_back(Vec3::Zero());
    c.confidences.push_back(1.0);
    c.frame_ids.push_back(0);
  }
  const auto kept = voxel_confidence_filter_indices(c, 1.0, 0, 50);
  EXPECT_EQ(kept.size(), 10u);
  EXPECT_EQ(std::count(kept.begin(), kept.end(), 10u), 0);
}

TEST(Filter, MatchesBruteForce) {
  const PointCloud c = random_cloud(3000, 3);
  for (double tl : {0.0, 15.0, 60.0}) {
    for (double tc : {0.0, 50.0, 90.0}) {
      EXPECT_EQ(voxel_confidence_filter_indices(c, 0.04, tl, tc), reference_filter(c, 0.04, tl, tc));
    }
  }
}

TEST(Filter, MonotoneAndIdentity) {
  const PointCloud c = random_cloud(4000, 4);
  const auto all = voxel_confidence_filter_indices(c, 0.04, 0, 0);
  EXPECT_EQ(all.size(), c.size());
  std::vector<size_t> prev = all;
  for (int s = 1; s <= 20; ++s) {
    const auto cur = voxel_confidence_filter_indices(c, 0.04, 5.0 * s, 0);
    EXPECT_TRUE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
    prev = cur;
  }
  prev = all;
  for (int s = 1; s <= 20; ++s) {
    const auto cur = voxel_confidence_filter_indices(c, 0.04, 0, 5.0 * s);
    EXPECT_TRUE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
    prev = cur;
  }
}

TEST(Filter, ScopesAgreeOnSingleFrame) {
  const PointCloud c = random_cloud(1000, 5);
  const auto g = filter_frames({c}, 0.04, 15, 50, FilterScope::Global);
  const auto p = filter_frames({c}, 0.04, 15, 50, FilterScope::PerFrame);
  EXPECT_EQ(g, p);
}
