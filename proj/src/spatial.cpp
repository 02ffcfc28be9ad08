#include "driftalign/spatial.hpp"

#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "driftalign/parallel.hpp"

namespace driftalign {

NeighborIndex::NeighborIndex(std::span<const Vec3> points, size_t leaf_size)
    : points_(points.begin(), points.end()) {
  if (points_.empty()) throw Error("domain", "NeighborIndex: empty point set");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  nodes_.reserve(2 * points_.size() / std::max<size_t>(1, leaf_size) + 1);
  build(0, static_cast<uint32_t>(points_.size()), std::max<size_t>(1, leaf_size));
}

int32_t NeighborIndex::build(uint32_t begin, uint32_t end, size_t leaf_size) {
  const auto id = static_cast<int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= leaf_size) return id;

  Vec3 lo = points_[order_[begin]], hi = lo;
  for (uint32_t i = begin + 1; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis;
  if ((hi - lo).maxCoeff(&axis) <= 0.0) return id;  // all points coincide

  const uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](uint32_t a, uint32_t b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[order_[mid]][axis];
  const int32_t left = build(begin, mid, leaf_size);
  const int32_t right = build(mid, end, leaf_size);
  Node& n = nodes_[static_cast<size_t>(id)];
  n.axis = axis;
  n.split = split;
  n.left = left;
  n.right = right;
  return id;
}

Neighbor NeighborIndex::nearest(const Vec3& q) const { return k_nearest(q, 1).front(); }

std::vector<Neighbor> NeighborIndex::within_radius(const Vec3& q, double r) const {
  std::vector<Neighbor> out;
  double bound = r * r;
  descend(0, q, bound, [&](uint32_t idx, double d2, double&) { out.push_back({idx, d2}); });
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

VoxelKey VoxelGrid::key_of(const Vec3& p, double s) {
  return {static_cast<int64_t>(std::floor(p.x() / s)), static_cast<int64_t>(std::floor(p.y() / s)),
          static_cast<int64_t>(std::floor(p.z() / s))};
}

VoxelGrid::VoxelGrid(std::span<const Vec3> points, double voxel_size) : voxel_size_(voxel_size) {
  if (!(voxel_size > 0.0)) throw Error("domain", "VoxelGrid: voxel size must be positive");
  keys_.reserve(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    keys_.push_back(key_of(points[i], voxel_size));
    voxels_[keys_.back()].push_back(i);
  }
}

size_t VoxelGrid::count(const VoxelKey& k) const {
  auto it = voxels_.find(k);
  return it == voxels_.end() ? 0 : it->second.size();
}

// ---------------------------------------------------------------------------

void tangent_basis(const Vec3& n, Vec3& t1, Vec3& t2) {
  const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  t1 = n.cross(helper).normalized();
  t2 = n.cross(t1);
}

PointCloud estimate_normals(const PointCloud& cloud, size_t k, const CameraCenterFn& camera_center) {
  if (k + 1 > cloud.size()) {
    throw Error("domain", "estimate_normals: k = " + std::to_string(k) + " needs at least " +
                              std::to_string(k + 1) + " points, cloud has " + std::to_string(cloud.size()));
  }
  const NeighborIndex index(cloud.positions);
  PointCloud out = cloud;
  out.normals.assign(cloud.size(), Vec3::Zero());
  parallel_for(cloud.size(), [&](size_t i) {
    const auto nn = index.k_nearest(cloud.positions[i], k + 1);
    Vec3 mean = Vec3::Zero();
    for (const auto& n : nn) mean += cloud.positions[n.index];
    mean /= static_cast<double>(nn.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& n : nn) {
      const Vec3 d = cloud.positions[n.index] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();
    if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) return;  // rank < 2
    Vec3 normal = eig.eigenvectors().col(0).normalized();
    if (normal.dot(camera_center(cloud.frame_ids[i]) - cloud.positions[i]) < 0.0) normal = -normal;
    out.normals[i] = normal;
  });
  return out;
}

ColorGradient estimate_color_gradients(const PointCloud& cloud, const NeighborIndex& index, double radius) {
  const size_t n = cloud.size();
  ColorGradient g;
  g.gradient.assign(n, Vec3::Zero());
  g.intensity.resize(n);
  for (size_t i = 0; i < n; ++i) g.intensity[i] = intensity(cloud.colors[i]);
  if (!cloud.has_normals()) return g;

  parallel_for(n, [&](size_t i) {
    if (!cloud.normal_valid(i)) return;
    const Vec3& q = cloud.positions[i];
    const Vec3& nq = cloud.normals[i];
    const auto nb = index.within_radius(q, radius);
    Vec3 t1, t2;
    tangent_basis(nq, t1, t2);
    Eigen::Matrix2d AtA = Eigen::Matrix2d::Zero();
    Eigen::Vector2d Atb = Eigen::Vector2d::Zero();
    size_t used = 0;
    for (const auto& nbr : nb) {
      if (nbr.index == i) continue;
      const Vec3 d = cloud.positions[nbr.index] - q;
      const Vec3 proj = d - d.dot(nq) * nq;
      const Eigen::Vector2d a(proj.dot(t1), proj.dot(t2));
      const double b = g.intensity[nbr.index] - g.intensity[i];
      AtA += a * a.transpose();
      Atb += a * b;
      ++used;
    }
    if (used < 3) return;
    const double det = AtA.determinant();
    if (!(std::abs(det) > 1e-12 * AtA.squaredNorm())) return;
    const Eigen::Vector2d x = AtA.ldlt().solve(Atb);
    g.gradient[i] = x[0] * t1 + x[1] * t2;
  });
  return g;
}

}  // namespace driftalign
