#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "driftalign/point_cloud.hpp"
#include "driftalign/types.hpp"

namespace driftalign {

struct Neighbor {
  size_t index;
  double dist2;
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
  }
};

/// Static k-d tree over a copy of the input positions. Queries are const and
/// may be issued concurrently. Results are exact; ties break by index.
class NeighborIndex {
 public:
  explicit NeighborIndex(std::span<const Vec3> points, size_t leaf_size = 12);

  size_t size() const { return points_.size(); }
  const Vec3& point(size_t i) const { return points_[i]; }

  Neighbor nearest(const Vec3& q) const;
  /// Sorted by distance.
  std::vector<Neighbor> k_nearest(const Vec3& q, size_t k) const {
    return k_nearest_if(q, k, [](size_t) { return true; });
  }
  /// k nearest among points accepted by `keep(index)` with squared distance
  /// <= max_dist2, sorted by distance.
  template <typename Pred>
  std::vector<Neighbor> k_nearest_if(const Vec3& q, size_t k, Pred&& keep,
                                     double max_dist2 = std::numeric_limits<double>::infinity()) const;
  /// All points with distance <= r, sorted by distance.
  std::vector<Neighbor> within_radius(const Vec3& q, double r) const;

 private:
  struct Node {
    uint32_t begin, end;
    int32_t left = -1, right = -1;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
  };

  int32_t build(uint32_t begin, uint32_t end, size_t leaf_size);
  template <typename Visit>
  void descend(int32_t node, const Vec3& q, double& bound, Visit&& visit) const;

  std::vector<Vec3> points_;
  std::vector<uint32_t> order_;
  std::vector<Node> nodes_;
};

template <typename Visit>
void NeighborIndex::descend(int32_t id, const Vec3& q, double& bound, Visit&& visit) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.axis < 0) {
    for (uint32_t i = n.begin; i < n.end; ++i) {
      const uint32_t idx = order_[i];
      const double d2 = (points_[idx] - q).squaredNorm();
      if (d2 <= bound) visit(idx, d2, bound);
    }
    return;
  }
  const double diff = q[n.axis] - n.split;
  const int32_t near = diff <= 0.0 ? n.left : n.right;
  const int32_t far = diff <= 0.0 ? n.right : n.left;
  descend(near, q, bound, visit);
  if (diff * diff <= bound) descend(far, q, bound, visit);
}

template <typename Pred>
std::vector<Neighbor> NeighborIndex::k_nearest_if(const Vec3& q, size_t k, Pred&& keep, double max_dist2) const {
  std::vector<Neighbor> heap;
  if (k == 0 || points_.empty()) return heap;
  heap.reserve(k + 1);
  double bound = max_dist2;
  descend(0, q, bound, [&](uint32_t idx, double d2, double& b) {
    if (!keep(static_cast<size_t>(idx))) return;
    const Neighbor cand{idx, d2};
    if (heap.size() == k && !(cand < heap.front())) return;
    heap.push_back(cand);
    std::push_heap(heap.begin(), heap.end());
    if (heap.size() > k) {
      std::pop_heap(heap.begin(), heap.end());
      heap.pop_back();
    }
    if (heap.size() == k) b = heap.front().dist2;
  });
  std::sort_heap(heap.begin(), heap.end());
  return heap;
}

struct VoxelKey {
  int64_t x, y, z;
  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
};

struct VoxelKeyHash {
  size_t operator()(const VoxelKey& k) const noexcept {
    uint64_t h = static_cast<uint64_t>(k.x) * 73856093ULL;
    h ^= static_cast<uint64_t>(k.y) * 19349663ULL;
    h ^= static_cast<uint64_t>(k.z) * 83492791ULL;
    return static_cast<size_t>(h ^ (h >> 29));
  }
};

/// Points bucketed by floor(p / voxel_size). Point indices inside each voxel
/// are in increasing order.
class VoxelGrid {
 public:
  VoxelGrid(std::span<const Vec3> points, double voxel_size);

  static VoxelKey key_of(const Vec3& p, double voxel_size);
  double voxel_size() const { return voxel_size_; }
  const std::unordered_map<VoxelKey, std::vector<size_t>, VoxelKeyHash>& voxels() const { return voxels_; }
  const VoxelKey& key(size_t point) const { return keys_[point]; }
  size_t count(const VoxelKey& k) const;

 private:
  double voxel_size_;
  std::vector<VoxelKey> keys_;
  std::unordered_map<VoxelKey, std::vector<size_t>, VoxelKeyHash> voxels_;
};

using CameraCenterFn = std::function<Vec3(int32_t frame_id)>;

/// PCA normals from the k nearest neighbors (plus the point itself), oriented
/// toward the camera center of each point's frame. Degenerate neighborhoods
/// (covariance rank < 2) get a zero normal. Throws if k + 1 > cloud size.
PointCloud estimate_normals(const PointCloud& cloud, size_t k, const CameraCenterFn& camera_center);

/// Tangent-plane color gradients for colored ICP.
struct ColorGradient {
  std::vector<Vec3> gradient;      // d_q, orthogonal to n_q
  std::vector<double> intensity;  // I(q)
};

/// Least-squares fit of I(p) - I(q) = d_q . (proj_q(p) - q) over neighbors
/// within `radius`, solved in the tangent basis of q. Points with fewer than
/// three neighbors, invalid normals or a singular fit get d_q = 0.
ColorGradient estimate_color_gradients(const PointCloud& cloud, const NeighborIndex& index, double radius);

/// Unit vectors t1, t2 completing n to a right-handed orthonormal frame.
void tangent_basis(const Vec3& n, Vec3& t1, Vec3& t2);

}  // namespace driftalign
