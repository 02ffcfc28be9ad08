#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "driftalign/lie.hpp"
#include "driftalign/types.hpp"

namespace driftalign {

using Matrix6X = Eigen::Matrix<double, 6, Eigen::Dynamic>;
using Mat63 = Eigen::Matrix<double, 6, 3>;

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  /// Bounding box of `points` grown by `pad` on every side.
  static Aabb around(std::span<const Vec3> points, double pad);
  Vec3 extent() const { return max - min; }
  double diagonal() const { return extent().norm(); }
  Vec3 clamp(const Vec3& p) const { return p.cwiseMax(min).cwiseMin(max); }
};

struct FieldConfig {
  int levels = 8;
  int features = 2;           // per level
  int log2_table = 15;        // hash entries per level = 2^log2_table
  int hidden = 64;            // width of both hidden layers
  int embedding_dim = 0;      // 0 = no view conditioning
  int num_views = 0;
  double finest_cell = 0.02;  // meters
  double coarse_divisions = 8.0;  // coarsest cell = bbox diagonal / coarse_divisions
  double output_scale = 0.1;
  double feature_init = 1e-4;   // hash features ~ U(-a, a)
  double embedding_init = 0.5;  // view embeddings ~ U(-a, a)
  uint64_t seed = 0;
};

/// Learnable map from position (and optionally a view index) to a twist.
///
/// Features are trilinearly interpolated from L hashed lattices whose cell
/// size shrinks geometrically from bbox-diagonal / coarse_divisions down to
/// finest_cell; coarse levels that fit in the table are indexed densely. The
/// concatenated features (plus the view embedding) pass through two tanh
/// layers and a linear head whose output is multiplied by output_scale. The
/// head starts at zero, so a fresh field is the identity deformation.
///
/// Parameters are stored as float32; all arithmetic is in double. Gradient
/// buffers are double and match param_count().
class DeformationField {
 public:
  /// Activations kept by forward() for backward().
  struct Tape {
    size_t n = 0;
    std::vector<uint32_t> corner;   // n * levels * 8 feature offsets
    std::vector<double> weight;     // matching trilinear weights
    std::vector<int> views;
    Eigen::MatrixXd X, H1, H2;
  };

  DeformationField() = default;
  DeformationField(const FieldConfig& config, const Aabb& bounds);

  const FieldConfig& config() const { return config_; }
  const Aabb& bounds() const { return bounds_; }
  bool has_views() const { return config_.embedding_dim > 0; }
  size_t param_count() const { return params_.size(); }
  std::span<float> params() { return params_; }
  std::span<const float> params() const { return params_; }
  double cell_size(int level) const { return cell_[static_cast<size_t>(level)]; }
  int input_dim() const { return config_.levels * config_.features + config_.embedding_dim; }

  Twist eval(const Vec3& p, std::optional<int> view = std::nullopt) const;

  /// Batch evaluation. `views` is empty for unconditioned fields and has one
  /// entry per point otherwise. Writes 6 x n twists to `out`.
  void forward(std::span<const Vec3> points, std::span<const int> views, Tape& tape, Matrix6X& out) const;
  /// Accumulates d(sum_i upstream_i . xi_i)/d(theta) into `grad`.
  void backward(const Tape& tape, const Matrix6X& upstream, std::span<double> grad) const;

  /// Accumulates the parameter gradient of upstream . eval(p, view) into
  /// `grad`; returns d(xi)/dp when `want_input_jacobian` is set.
  std::optional<Mat63> eval_with_grad(const Vec3& p, std::optional<int> view, const Vec6& upstream,
                                      std::span<double> grad, bool want_input_jacobian = false) const;

  /// d(xi)/dp; zero along axes where p is clamped to the bounding box.
  Mat63 input_jacobian(const Vec3& p, std::optional<int> view = std::nullopt) const;

  std::vector<uint8_t> serialize() const;
  static DeformationField deserialize(std::span<const uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static DeformationField load(const std::filesystem::path& path);

 private:
  struct Level {
    Eigen::Vector3i cells;  // cells per axis
    size_t offset = 0;      // first parameter of this level's table
    size_t entries = 0;
    bool dense = false;
  };

  void layout();
  void initialize();
  size_t vertex_entry(const Level& lv, int x, int y, int z) const;
  void check_views(size_t n, std::span<const int> views) const;
  // Fills corner offsets/weights for one point; optionally trilinear weight gradients.
  void interpolate(const Vec3& p, uint32_t* corner, double* weight, Eigen::Matrix<double, 8, 3>* dweight,
                   int level) const;

  FieldConfig config_;
  Aabb bounds_;
  std::vector<double> cell_;
  std::vector<Level> levels_;
  size_t emb_offset_ = 0, w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0;
  std::vector<float> params_;
};

/// Mean over points of sum over the six offsets +-s e_axis of
/// |F(p) - F(p + offset)|^2. Adds `weight` times its gradient to `grad` when
/// `grad` is non-empty.
double tv_loss(const DeformationField& field, std::span<const Vec3> points, std::span<const int> views,
               double offset, std::span<double> grad, double weight = 1.0);

}  // namespace driftalign
