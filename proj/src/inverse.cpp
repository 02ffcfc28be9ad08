#include "driftalign/inverse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "driftalign/adam.hpp"
#include "driftalign/parallel.hpp"
#include "driftalign/ply.hpp"

namespace driftalign {

namespace {

// Uniform sample without replacement of `m` indices out of n (partial Fisher-Yates).
std::vector<size_t> sample_indices(size_t n, size_t m, std::mt19937_64& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  m = std::min(m, n);
  for (size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m);
  return idx;
}

}  // namespace

TrainingPairSet sample_pairs(const std::vector<FrameState>& states, const std::vector<std::vector<Vec3>>& frame_points,
                             int m_per_frame, uint64_t seed, std::vector<std::vector<Vec3>>* holdout,
                             int holdout_per_frame) {
  if (frame_points.size() != states.size()) throw Error("invariant", "sample_pairs: one point list per frame required");
  TrainingPairSet set;
  if (holdout) holdout->assign(states.size(), {});
  for (size_t f = 0; f < states.size(); ++f) {
    const auto& pts = frame_points[f];
    std::mt19937_64 rng(seed * 6364136223846793005ULL + f + 1);
    const size_t m = static_cast<size_t>(std::max(0, m_per_frame));
    const size_t h = holdout ? static_cast<size_t>(std::max(0, holdout_per_frame)) : 0;
    // The holdout is drawn first (at most a quarter of the frame) so small
    // frames still contribute held-out points.
    const size_t held = std::min(h, pts.size() / 4);
    const auto idx = sample_indices(pts.size(), std::min(pts.size(), m + held), rng);
    const size_t train = idx.size() - held;
    std::vector<Vec3> cam(train);
    for (size_t i = 0; i < train; ++i) cam[i] = pts[idx[held + i]];
    DeformBatch batch;
    deform_points(states[f], cam, true, batch);
    for (size_t i = 0; i < train; ++i) set.records.push_back({static_cast<int>(f), cam[i], batch.world[i]});
    if (holdout) {
      for (size_t i = 0; i < held; ++i) (*holdout)[f].push_back(pts[idx[i]]);
    }
  }
  return set;
}

double verify_pairs(const TrainingPairSet& pairs, const std::vector<FrameState>& states) {
  double worst = 0.0;
  for (const auto& r : pairs.records) {
    const FrameState& s = states.at(static_cast<size_t>(r.view));
    Vec3 local = r.p_cam;
    if (s.field_enabled && s.field.param_count() > 0) local = twist_exp(s.field.eval(r.p_cam))(r.p_cam);
    worst = std::max(worst, (s.camera()(local) - r.p0).norm());
  }
  return worst;
}

Vec3 inverse_input(const FrameState& state, const Vec3& p0) {
  const RigidTransform cam = state.camera();
  return cam.R.transpose() * (p0 - cam.t);
}

DeformationField make_inverse_field(const InverseParams& params, const TrainingPairSet& pairs,
                                    const std::vector<FrameState>& states) {
  std::vector<Vec3> inputs;
  inputs.reserve(pairs.records.size());
  for (const auto& r : pairs.records) inputs.push_back(inverse_input(states.at(static_cast<size_t>(r.view)), r.p0));
  FieldConfig cfg = params.field;
  cfg.embedding_dim = params.embedding_dim;
  cfg.num_views = std::max<int>(1, static_cast<int>(states.size()));
  cfg.finest_cell = params.tv_offset;
  cfg.seed = params.seed * 1000003ULL + 999983ULL;
  return DeformationField(cfg, Aabb::around(inputs, params.padding));
}

double inverse_loss(const DeformationField& field, std::span<const Vec3> inputs, std::span<const int> views,
                    std::span<const Vec3> targets, std::span<double> grad, double weight) {
  const size_t n = inputs.size();
  if (targets.size() != n) throw Error("invariant", "inverse_loss: size mismatch");
  if (n == 0) return 0.0;
  DeformationField::Tape tape;
  Matrix6X tw;
  field.forward(inputs, views, tape, tw);
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> err(n);
  Matrix6X up;
  if (!grad.empty()) up.setZero(6, static_cast<Eigen::Index>(n));
  parallel_for(
      n,
      [&](size_t i) {
        const auto col = static_cast<Eigen::Index>(i);
        const Twist xi = Twist::from_vector(tw.col(col));
        const Vec3 diff = twist_exp(xi)(inputs[i]) - targets[i];
        err[i] = diff.squaredNorm();
        if (!grad.empty()) up.col(col) = (weight * 2.0 * inv) * (twist_action_jacobian(xi, inputs[i]).transpose() * diff);
      },
      512);
  if (!grad.empty()) field.backward(tape, up, grad);
  double sum = 0.0;
  for (double e : err) sum += e;
  return sum * inv;
}

InverseReport train_inverse(const TrainingPairSet& pairs, const std::vector<FrameState>& states,
                            DeformationField& field, const InverseParams& params, const ProgressFn& progress) {
  const size_t n = pairs.records.size();
  if (n == 0) throw Error("domain", "train_inverse: no training pairs");
  if (!field.has_views()) throw Error("config", "train_inverse: the inverse field needs view embeddings");
  std::vector<Vec3> inputs(n), targets(n);
  std::vector<int> views(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& r = pairs.records[i];
    inputs[i] = inverse_input(states.at(static_cast<size_t>(r.view)), r.p0);
    targets[i] = r.p_cam;
    views[i] = r.view;
  }

  InverseReport report;
  Adam opt("inverse-field", field.param_count(), {params.lr});
  std::vector<double> grad(field.param_count());
  std::mt19937_64 rng(params.seed * 0x9E3779B97F4A7C15ULL + 3);
  const size_t batch = std::min(n, static_cast<size_t>(std::max(1, params.batch)));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = n;
  std::vector<Vec3> bx(batch), bt(batch);
  std::vector<int> bv(batch);
  std::vector<Vec3> tv_pts;
  std::vector<int> tv_views;

  for (int it = 0; it < params.iters; ++it) {
    for (size_t j = 0; j < batch; ++j) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const size_t i = order[cursor++];
      bx[j] = inputs[i];
      bt[j] = targets[i];
      bv[j] = views[i];
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    const double l = inverse_loss(field, bx, bv, bt, grad);
    double tv = 0.0;
    if (params.lambda_tv > 0.0 && params.tv_samples > 0) {
      const size_t m = std::min(batch, static_cast<size_t>(params.tv_samples));
      tv_pts.assign(bx.begin(), bx.begin() + static_cast<std::ptrdiff_t>(m));
      tv_views.assign(bv.begin(), bv.begin() + static_cast<std::ptrdiff_t>(m));
      tv = tv_loss(field, tv_pts, tv_views, params.tv_offset, grad, params.lambda_tv);
    }
    const double energy = l + params.lambda_tv * tv;
    if (!std::isfinite(energy)) {
      throw Error("numeric", "train_inverse: non-finite loss at step " + std::to_string(it) + " (L_inverse " +
                                 std::to_string(l) + ", L_tv " + std::to_string(tv) + ")");
    }
    report.history.push_back(energy);
    opt.step(field.params(), grad);
    if (progress && (it % 250 == 0 || it + 1 == params.iters)) {
      progress("inverse step " + std::to_string(it) + ": L_inverse " + std::to_string(l));
    }
  }
  report.final_loss = inverse_loss(field, inputs, views, targets, {});
  return report;
}

Vec3 apply_inverse(const DeformationField& field, const FrameState& state, int view, const Vec3& p0) {
  const Vec3 x = inverse_input(state, p0);
  return twist_exp(field.eval(x, view))(x);
}

std::vector<double> roundtrip_errors(const DeformationField& field, const FrameState& state, int view,
                                     std::span<const Vec3> cam_points) {
  DeformBatch batch;
  deform_points(state, cam_points, true, batch);
  const RigidTransform cam = state.camera();
  const size_t n = cam_points.size();
  std::vector<Vec3> x(n);
  for (size_t i = 0; i < n; ++i) x[i] = cam.R.transpose() * (batch.world[i] - cam.t);
  std::vector<int> views(n, view);
  DeformationField::Tape tape;
  Matrix6X tw;
  field.forward(x, views, tape, tw);
  std::vector<double> err(n);
  for (size_t i = 0; i < n; ++i) {
    err[i] = (twist_exp(Twist::from_vector(tw.col(static_cast<Eigen::Index>(i))))(x[i]) - cam_points[i]).norm();
  }
  return err;
}

// ---------------------------------------------------------------------------

Vec3 sh0_from_color(const Vec3& rgb) {
  Vec3 sh;
  for (int c = 0; c < 3; ++c) {
    const double x = (rgb[c] - 0.5) / kY00;
    sh[c] = x;
    // search outward from the closed form for an exact preimage
    double up = x, down = x;
    for (int k = 0; k < 16 && sh[c] * kY00 + 0.5 != rgb[c]; ++k) {
      up = std::nextafter(up, HUGE_VAL);
      down = std::nextafter(down, -HUGE_VAL);
      if (up * kY00 + 0.5 == rgb[c]) sh[c] = up;
      else if (down * kY00 + 0.5 == rgb[c]) sh[c] = down;
    }
  }
  return sh;
}

SplatSet export_splats(const PointCloud& canonical, const SplatParams& params) {
  if (!canonical.has_normals()) throw Error("domain", "export_splats: cloud has no normals");
  std::vector<size_t> idx;
  if (params.target_count == 0 || params.target_count >= canonical.size()) {
    idx.resize(canonical.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
  } else {
    std::mt19937_64 rng(params.seed * 0xD1B54A32D192ED03ULL + 5);
    idx = sample_indices(canonical.size(), params.target_count, rng);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<size_t> valid;
  for (size_t i : idx) {
    if (canonical.normal_valid(i)) valid.push_back(i);
  }
  SplatSet set;
  set.splats.resize(valid.size());
  if (valid.empty()) return set;
  std::vector<Vec3> pos(valid.size());
  for (size_t j = 0; j < valid.size(); ++j) pos[j] = canonical.positions[valid[j]];
  const NeighborIndex index(pos);
  const size_t k = std::min(static_cast<size_t>(std::max(1, params.k)), pos.size() - 1);
  parallel_for(valid.size(), [&](size_t j) {
    const size_t i = valid[j];
    Splat& s = set.splats[j];
    s.position = canonical.positions[i];
    s.normal = canonical.normals[i];
    Vec3 t1, t2;
    tangent_basis(s.normal, t1, t2);
    Mat3 frame;
    frame << t1, t2, s.normal;
    s.rotation = Eigen::Quaterniond(frame).normalized();
    if (s.rotation.w() < 0.0) s.rotation.coeffs() *= -1.0;
    double mean = 0.0;
    if (k > 0) {
      const auto nn = index.k_nearest(s.position, k + 1);
      size_t used = 0;
      for (const auto& nb : nn) {
        if (nb.index == j) continue;
        if (used == k) break;
        mean += std::sqrt(nb.dist2);
        ++used;
      }
      mean /= static_cast<double>(std::max<size_t>(used, 1));
    }
    s.scale[0] = s.scale[1] = mean;
    s.opacity = params.opacity;
    s.sh0 = sh0_from_color(canonical.colors[i]);
  });
  return set;
}

void write_splat_ply(const std::filesystem::path& path, const SplatSet& set, SplatEncoding encoding) {
  const size_t n = set.splats.size();
  PlyTable t;
  auto column = [&](auto get) {
    std::vector<double> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = get(set.splats[i]);
    return v;
  };
  const bool act = encoding == SplatEncoding::Activated;
  t.add("x", PlyType::Float32, column([](const Splat& s) { return s.position.x(); }));
  t.add("y", PlyType::Float32, column([](const Splat& s) { return s.position.y(); }));
  t.add("z", PlyType::Float32, column([](const Splat& s) { return s.position.z(); }));
  t.add("nx", PlyType::Float32, column([](const Splat& s) { return s.normal.x(); }));
  t.add("ny", PlyType::Float32, column([](const Splat& s) { return s.normal.y(); }));
  t.add("nz", PlyType::Float32, column([](const Splat& s) { return s.normal.z(); }));
  for (int a = 0; a < 2; ++a) {
    t.add("scale_" + std::to_string(a), PlyType::Float32,
          column([&](const Splat& s) { return act ? std::log(std::max(s.scale[a], 1e-12)) : s.scale[a]; }));
  }
  t.add("rot_0", PlyType::Float32, column([](const Splat& s) { return s.rotation.w(); }));
  t.add("rot_1", PlyType::Float32, column([](const Splat& s) { return s.rotation.x(); }));
  t.add("rot_2", PlyType::Float32, column([](const Splat& s) { return s.rotation.y(); }));
  t.add("rot_3", PlyType::Float32, column([](const Splat& s) { return s.rotation.z(); }));
  t.add("opacity", PlyType::Float32,
        column([&](const Splat& s) { return act ? std::log(s.opacity / (1.0 - s.opacity)) : s.opacity; }));
  for (int c = 0; c < 3; ++c) {
    t.add("f_dc_" + std::to_string(c), PlyType::Float32, column([&](const Splat& s) { return s.sh0[c]; }));
  }
  write_ply_table(path, t);
}

SplatSet read_splat_ply(const std::filesystem::path& path, SplatEncoding encoding) {
  const PlyTable t = read_ply_table(path);
  const bool act = encoding == SplatEncoding::Activated;
  SplatSet set;
  set.splats.resize(t.rows());
  for (size_t i = 0; i < t.rows(); ++i) {
    Splat& s = set.splats[i];
    s.position = Vec3(t.column("x")[i], t.column("y")[i], t.column("z")[i]);
    s.normal = Vec3(t.column("nx")[i], t.column("ny")[i], t.column("nz")[i]);
    for (int a = 0; a < 2; ++a) {
      const double v = t.column("scale_" + std::to_string(a))[i];
      s.scale[a] = act ? std::exp(v) : v;
    }
    s.rotation = Eigen::Quaterniond(t.column("rot_0")[i], t.column("rot_1")[i], t.column("rot_2")[i], t.column("rot_3")[i]);
    const double o = t.column("opacity")[i];
    s.opacity = act ? 1.0 / (1.0 + std::exp(-o)) : o;
    for (int c = 0; c < 3; ++c) s.sh0[c] = t.column("f_dc_" + std::to_string(c))[i];
  }
  return set;
}

}  // namespace driftalign
