#include "driftalign/icp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_map>

#include <Eigen/Geometry>

#include "driftalign/adam.hpp"
#include "driftalign/parallel.hpp"

namespace driftalign {

namespace {

constexpr size_t kGrain = 512;

}  // namespace

// ---------------------------------------------------------------------------
// forward deformation and its chain rule

void deform_points(const FrameState& state, std::span<const Vec3> cam, bool use_field, DeformBatch& out) {
  const size_t n = cam.size();
  out.camera = state.camera();
  out.world.resize(n);
  out.local_rotation.resize(n);
  out.field_used = use_field && state.field_enabled && state.field.param_count() > 0;
  if (!out.field_used) {
    out.twists.setZero(6, static_cast<Eigen::Index>(n));
    out.tape = {};
    for (size_t i = 0; i < n; ++i) {
      out.local_rotation[i].setIdentity();
      out.world[i] = out.camera(cam[i]);
    }
    return;
  }
  state.field.forward(cam, {}, out.tape, out.twists);
  parallel_for(
      n,
      [&](size_t i) {
        const RigidTransform local = twist_exp(Twist::from_vector(out.twists.col(static_cast<Eigen::Index>(i))));
        out.local_rotation[i] = local.R;
        out.world[i] = out.camera(local(cam[i]));
      },
      kGrain);
}

void backprop_points(const FrameState& state, std::span<const Vec3> cam, const DeformBatch& batch,
                     std::span<const Vec3> grad_world, std::span<const VectorTerm> vectors, FrameGrad& grad) {
  const size_t n = cam.size();
  if (grad_world.size() != n || batch.world.size() != n) throw Error("invariant", "backprop_points: size mismatch");
  for (const auto& vt : vectors) {
    if (vt.cam.size() != n || vt.grad.size() != n) throw Error("invariant", "backprop_points: vector size mismatch");
  }
  const RigidTransform G = twist_exp(state.xi_g);
  const Mat3& Rc = batch.camera.R;
  const Mat3 R0 = state.pose0.R;
  // field gradients only when the caller sized the buffer for them
  const bool field = batch.field_used && grad.field.size() == state.field.param_count();
  Matrix6X upstream;
  if (field) upstream.setZero(6, static_cast<Eigen::Index>(n));

  const size_t chunks = chunk_count(n, kGrain);
  std::vector<Vec6> partial(chunks, Vec6::Zero());
  parallel_chunks(n, kGrain, [&](size_t c, size_t b, size_t e) {
    Vec6 acc = Vec6::Zero();
    for (size_t i = b; i < e; ++i) {
      const Vec3& g = grad_world[i];
      bool any_vec = false;
      for (const auto& vt : vectors) any_vec = any_vec || !vt.grad[i].isZero(0.0);
      if (g.isZero(0.0) && !any_vec) continue;
      // world = G * y with y = pose0(local(p))
      const Vec3 y = G.R.transpose() * (batch.world[i] - G.t);
      acc += twist_action_jacobian(state.xi_g, y).transpose() * g;
      Vec6 up = Vec6::Zero();
      if (field) {
        const Twist xi = Twist::from_vector(batch.twists.col(static_cast<Eigen::Index>(i)));
        up = twist_action_jacobian(xi, cam[i]).transpose() * (Rc.transpose() * g);
      }
      for (const auto& vt : vectors) {
        const Vec3& gv = vt.grad[i];
        if (gv.isZero(0.0)) continue;
        const Vec3 m = R0 * (batch.local_rotation[i] * vt.cam[i]);
        acc.head<3>() += rotation_action_jacobian(state.xi_g.omega, m).transpose() * gv;
        if (field) {
          const Vec3 omega = batch.twists.col(static_cast<Eigen::Index>(i)).head<3>();
          up.head<3>() += rotation_action_jacobian(omega, vt.cam[i]).transpose() * (Rc.transpose() * gv);
        }
      }
      if (field) upstream.col(static_cast<Eigen::Index>(i)) = up;
    }
    partial[c] = acc;
  });
  for (const auto& p : partial) grad.xi_g += p;
  if (field) state.field.backward(batch.tape, upstream, grad.field);
}

PointCloud apply_forward(const PointCloud& cam_cloud, const FrameState& state) {
  DeformBatch batch;
  deform_points(state, cam_cloud.positions, true, batch);
  PointCloud out = cam_cloud;
  out.positions = batch.world;
  if (out.has_normals()) {
    for (size_t i = 0; i < out.size(); ++i) {
      if (cam_cloud.normal_valid(i)) out.normals[i] = (batch.camera.R * (batch.local_rotation[i] * cam_cloud.normals[i])).normalized();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

std::vector<Association> associate(std::span<const Vec3> deformed, const NeighborIndex& index, double d_max,
                                   std::span<const uint32_t> subset) {
  const size_t n = subset.empty() ? deformed.size() : subset.size();
  std::vector<int64_t> match(n, -1);
  const double r2 = d_max * d_max;
  parallel_for(
      n,
      [&](size_t k) {
        const size_t i = subset.empty() ? k : subset[k];
        const Neighbor nb = index.nearest(deformed[i]);
        if (nb.dist2 < r2) match[k] = static_cast<int64_t>(nb.index);
      },
      kGrain);
  std::vector<Association> out;
  for (size_t k = 0; k < n; ++k) {
    if (match[k] < 0) continue;
    const size_t i = subset.empty() ? k : subset[k];
    out.push_back({static_cast<uint32_t>(i), static_cast<uint32_t>(match[k])});
  }
  return out;
}

LossValue loss_data(std::span<const Vec3> deformed, std::span<const Association> assoc, const ModelView& model,
                    std::span<Vec3> grad_world, double weight) {
  const PointCloud& m = *model.cloud;
  LossValue out;
  for (const auto& a : assoc) out.count += m.normal_valid(a.model) ? 1 : 0;
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  double sum = 0.0;
  for (const auto& a : assoc) {
    if (!m.normal_valid(a.model)) continue;
    const Vec3& n = m.normals[a.model];
    const double r = (deformed[a.point] - m.positions[a.model]).dot(n);
    sum += r * r;
    if (!grad_world.empty()) grad_world[a.point] += (weight * 2.0 * r * inv) * n;
  }
  out.value = sum * inv;
  return out;
}

LossValue loss_color(std::span<const Vec3> deformed, std::span<const double> intensities,
                     std::span<const Association> assoc, const ModelView& model, std::span<Vec3> grad_world,
                     double weight) {
  const PointCloud& m = *model.cloud;
  const ColorGradient& cg = *model.gradients;
  LossValue out;
  for (const auto& a : assoc) out.count += m.normal_valid(a.model) ? 1 : 0;
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  double sum = 0.0;
  for (const auto& a : assoc) {
    if (!m.normal_valid(a.model)) continue;
    const Vec3& n = m.normals[a.model];
    const Vec3& d = cg.gradient[a.model];
    const Vec3 diff = deformed[a.point] - m.positions[a.model];
    const Vec3 proj = diff - diff.dot(n) * n;
    const double c = cg.intensity[a.model] + d.dot(proj) - intensities[a.point];
    sum += c * c;
    if (!grad_world.empty()) grad_world[a.point] += (weight * 2.0 * c * inv) * (d - d.dot(n) * n);
  }
  out.value = sum * inv;
  return out;
}

LossValue loss_corr(std::span<const Vec3> deformed, std::span<const CorrTerm> terms, std::span<Vec3> grad_world,
                    double weight) {
  LossValue out;
  double wsum = 0.0;
  for (const auto& t : terms) {
    if (t.w > 0.0) {
      wsum += t.w;
      ++out.count;
    }
  }
  if (out.count == 0 || !(wsum > 0.0)) {
    out.count = 0;
    return out;
  }
  double sum = 0.0;
  for (const auto& t : terms) {
    if (!(t.w > 0.0)) continue;
    Vec3 dst = Vec3::Zero();
    for (int c = 0; c < 4; ++c) {
      if (t.beta[c] != 0.0) dst += t.beta[c] * deformed[t.corner[c]];
    }
    const Vec3 diff = dst - t.source;
    sum += t.w * diff.squaredNorm();
    if (!grad_world.empty()) {
      for (int c = 0; c < 4; ++c) {
        if (t.beta[c] != 0.0) grad_world[t.corner[c]] += (weight * 2.0 * t.w * t.beta[c] / wsum) * diff;
      }
    }
  }
  out.value = sum / wsum;
  return out;
}

// ---------------------------------------------------------------------------

PixelGrid::PixelGrid(std::span<const PixelCoord> pixels, int stride, int width, int height, int64_t offset)
    : stride_(stride), cols_((width + stride - 1) / stride), rows_((height + stride - 1) / stride) {
  cell_.assign(static_cast<size_t>(cols_) * static_cast<size_t>(rows_), -1);
  for (size_t i = 0; i < pixels.size(); ++i) {
    const auto& p = pixels[i];
    if (p.u % stride || p.v % stride) continue;
    const int c = p.u / stride, r = p.v / stride;
    if (c < 0 || r < 0 || c >= cols_ || r >= rows_) continue;
    cell_[static_cast<size_t>(r) * static_cast<size_t>(cols_) + static_cast<size_t>(c)] = offset + static_cast<int64_t>(i);
  }
}

int64_t PixelGrid::at(int u, int v) const {
  if (u < 0 || v < 0 || u % stride_ || v % stride_) return -1;
  const int c = u / stride_, r = v / stride_;
  if (c >= cols_ || r >= rows_) return -1;
  return cell_[static_cast<size_t>(r) * static_cast<size_t>(cols_) + static_cast<size_t>(c)];
}

bool PixelGrid::bilinear(const Vec2& px, uint32_t corner[4], double beta[4]) const {
  const double gx = px.x() / stride_, gy = px.y() / stride_;
  if (!(gx >= 0.0 && gy >= 0.0)) return false;
  const int c0 = static_cast<int>(std::floor(gx)), r0 = static_cast<int>(std::floor(gy));
  const double fx = gx - c0, fy = gy - r0;
  const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  const int dc[4] = {0, 1, 0, 1}, dr[4] = {0, 0, 1, 1};
  for (int k = 0; k < 4; ++k) {
    beta[k] = 0.0;
    corner[k] = 0;
    if (w[k] == 0.0) continue;
    const int c = c0 + dc[k], r = r0 + dr[k];
    if (c >= cols_ || r >= rows_) return false;
    const int64_t id = cell_[static_cast<size_t>(r) * static_cast<size_t>(cols_) + static_cast<size_t>(c)];
    if (id < 0) return false;
    corner[k] = static_cast<uint32_t>(id);
    beta[k] = w[k];
  }
  return true;
}

// ---------------------------------------------------------------------------
// merge

double median(std::vector<double> values) { return percentile(std::move(values), 50.0); }

double mad(const std::vector<double>& values) {
  const double m = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::abs(v - m));
  return median(std::move(dev));
}

void MergeStats::append(double gd, double gc, double sigma_d, double sigma_c) {
  g_d.push_back(gd);
  g_c.push_back(gc);
  tau_d = median(g_d) + sigma_d * 1.4826 * mad(g_d);
  tau_c = median(g_c) + sigma_c * 1.4826 * mad(g_c);
}

FrameResiduals compute_residuals(std::span<const Vec3> deformed, std::span<const double> intensities,
                                 const NeighborIndex& index, const ModelView& model, double d_max) {
  const PointCloud& m = *model.cloud;
  const ColorGradient& cg = *model.gradients;
  const size_t n = deformed.size();
  FrameResiduals r;
  r.data.resize(n);
  r.color.resize(n);
  r.inlier.resize(n);
  parallel_for(
      n,
      [&](size_t i) {
        const Neighbor nb = index.nearest(deformed[i]);
        const Vec3 diff = deformed[i] - m.positions[nb.index];
        const Vec3 normal = m.normal_valid(nb.index) ? m.normals[nb.index] : Vec3::Zero();
        // without a normal the point-to-point distance stands in
        const double rd = normal.isZero(0.0) ? diff.squaredNorm() : std::pow(diff.dot(normal), 2);
        const Vec3& d = cg.gradient[nb.index];
        const double c = cg.intensity[nb.index] + d.dot(diff - diff.dot(normal) * normal) - intensities[i];
        r.data[i] = rd;
        r.color[i] = c * c;
        r.inlier[i] = nb.dist2 < d_max * d_max ? 1 : 0;
      },
      kGrain);
  return r;
}

MergeDecision merge_frame(const FrameResiduals& res, MergeStats& stats, const AlignParams& params) {
  MergeDecision out;
  std::vector<double> gd, gc;
  for (size_t i = 0; i < res.data.size(); ++i) {
    if (res.inlier[i]) {
      gd.push_back(res.data[i]);
      gc.push_back(res.color[i]);
    }
  }
  if (gd.empty()) {
    gd = res.data;
    gc = res.color;
  }
  if (gd.empty()) return out;
  out.g_d = percentile(gd, params.theta_d);
  out.g_c = percentile(gc, params.theta_c);
  out.bootstrap = stats.bootstrapping();
  out.tau_d = stats.tau_d;
  out.tau_c = stats.tau_c;
  for (size_t i = 0; i < res.data.size(); ++i) {
    const bool keep = out.bootstrap ? res.inlier[i] != 0 : (res.data[i] <= stats.tau_d && res.color[i] <= stats.tau_c);
    if (keep) out.accepted.push_back(i);
  }
  stats.append(out.g_d, out.g_c, params.sigma_d, params.sigma_c);
  return out;
}

std::string to_string(FrameStatus s) {
  switch (s) {
    case FrameStatus::Reference: return "reference";
    case FrameStatus::Merged: return "merged";
    case FrameStatus::Unalignable: return "unalignable";
  }
  return "?";
}

FrameStatus frame_status_from(const std::string& s) {
  if (s == "reference") return FrameStatus::Reference;
  if (s == "merged") return FrameStatus::Merged;
  if (s == "unalignable") return FrameStatus::Unalignable;
  throw Error("io", "unknown frame status '" + s + "'");
}

// ---------------------------------------------------------------------------
// alignment

DeformationField make_frame_field(const AlignParams& params, std::span<const Vec3> cam_points, int frame_id) {
  FieldConfig cfg = params.field;
  cfg.finest_cell = params.s_vox.back();
  cfg.embedding_dim = 0;
  cfg.num_views = 0;
  cfg.seed = params.seed * 1000003ULL + static_cast<uint64_t>(frame_id);
  return DeformationField(cfg, Aabb::around(cam_points, params.field_padding));
}

ModelContext make_model_context(const PointCloud& model, const NeighborIndex& index, const AlignParams& params) {
  ModelContext ctx;
  ctx.model = &model;
  ctx.index = &index;
  for (double s : params.s_vox) {
    if (params.lambda_color > 0.0) {
      ctx.gradients.push_back(estimate_color_gradients(model, index, params.color_radius_factor * s));
    } else {
      ColorGradient g;
      g.gradient.assign(model.size(), Vec3::Zero());
      g.intensity.resize(model.size());
      for (size_t i = 0; i < model.size(); ++i) g.intensity[i] = intensity(model.colors[i]);
      ctx.gradients.push_back(std::move(g));
    }
  }
  return ctx;
}

namespace {

// One representative (lowest index) per voxel, in index order.
std::vector<uint32_t> voxel_subsample(std::span<const Vec3> points, double s) {
  std::unordered_map<VoxelKey, uint32_t, VoxelKeyHash> seen;
  std::vector<uint32_t> out;
  for (size_t i = 0; i < points.size(); ++i) {
    if (seen.emplace(VoxelGrid::key_of(points[i], s), static_cast<uint32_t>(i)).second) {
      out.push_back(static_cast<uint32_t>(i));
    }
  }
  return out;
}

void validate_schedule(const AlignParams& p) {
  if (p.s_vox.empty() || p.s_vox.size() != p.d_max.size() || p.s_vox.size() != p.iters.size()) {
    throw Error("config", "scale schedules must be non-empty and of equal length");
  }
}

}  // namespace

AlignResult align_frame(const ModelContext& ctx, FrameState state, const FrameInput& frame,
                        std::span<const CorrTerm> corr, const AlignParams& params) {
  validate_schedule(params);
  AlignResult result;
  const auto& cam = frame.cam_cloud.positions;
  const size_t n = cam.size();
  std::vector<double> intens(n);
  for (size_t i = 0; i < n; ++i) intens[i] = intensity(frame.cam_cloud.colors[i]);

  std::mt19937_64 rng(params.seed * 7919ULL + static_cast<uint64_t>(frame.frame_id));
  DeformBatch batch;
  FrameGrad grad;
  std::vector<Vec3> gw(n);
  std::vector<Vec3> tv_points;
  int zero_streak = 0;
  const size_t scales = params.s_vox.size();

  for (size_t s = 0; s < scales; ++s) {
    const bool use_field = s + 1 == scales && !params.freeze_field && state.field_enabled;
    const auto subset = voxel_subsample(cam, params.s_vox[s]);
    const ModelView mv{ctx.model, &ctx.gradients[s]};
    Adam cam_opt("camera", 6, {params.lr_camera});
    Adam field_opt;
    if (use_field) field_opt = Adam("field", state.field.param_count(), {params.lr_field});

    for (int it = 0; it < params.iters[s]; ++it) {
      deform_points(state, cam, use_field, batch);
      const auto assoc = associate(batch.world, *ctx.index, params.d_max[s], subset);
      std::fill(gw.begin(), gw.end(), Vec3::Zero());
      grad.reset(use_field ? state.field.param_count() : 0);

      const LossValue data = loss_data(batch.world, assoc, mv, gw, 1.0);
      LossValue color, cor;
      if (params.lambda_color > 0.0) color = loss_color(batch.world, intens, assoc, mv, gw, params.lambda_color);
      if (params.lambda_corr > 0.0 && !corr.empty()) cor = loss_corr(batch.world, corr, gw, params.lambda_corr);
      double tv = 0.0;
      if (use_field && params.lambda_tv > 0.0 && n > 0) {
        tv_points.clear();
        const size_t m = std::min<size_t>(n, static_cast<size_t>(std::max(1, params.tv_samples)));
        std::uniform_int_distribution<size_t> pick(0, n - 1);
        for (size_t j = 0; j < m; ++j) tv_points.push_back(cam[pick(rng)]);
        tv = tv_loss(state.field, tv_points, {}, params.s_vox[s], grad.field, params.lambda_tv);
      }
      backprop_points(state, cam, batch, gw, {}, grad);

      IterationLog log;
      log.scale = static_cast<int>(s);
      log.data = data.value;
      log.color = color.value;
      log.corr = cor.value;
      log.tv = tv;
      log.inliers = data.count;
      log.energy = data.value + params.lambda_color * color.value + params.lambda_corr * cor.value + params.lambda_tv * tv;
      result.log.push_back(log);

      if (data.empty()) {
        if (++zero_streak > params.unalignable_patience) {
          result.unalignable = true;
          result.state = std::move(state);
          return result;
        }
      } else {
        zero_streak = 0;
      }

      Vec6 xi = state.xi_g.vector();
      cam_opt.step(std::span<double>(xi.data(), 6), std::span<const double>(grad.xi_g.data(), 6));
      state.xi_g = Twist::from_vector(xi);
      if (use_field) field_opt.step(state.field.params(), grad.field);
    }
  }
  result.state = std::move(state);
  return result;
}

std::vector<CorrTerm> resolve_correspondences(const CorrespondenceSet& set, const FrameInput& dst,
                                              const std::vector<MergedFrame>& merged, const PointCloud& model,
                                              const AlignParams& params) {
  std::vector<CorrTerm> terms;
  if (set.records.empty() || merged.empty() || params.max_pairs <= 0 || params.max_correspondences <= 0) return terms;

  // rank merged frames by the fraction of dst points their (ingested) camera sees
  const auto& pts = dst.cam_cloud.positions;
  const RigidTransform dst_pose = dst.camera.pose();
  std::vector<std::pair<double, size_t>> ranked;
  for (size_t j = 0; j < merged.size(); ++j) {
    const auto& cam = merged[j].camera;
    const RigidTransform to_cam = cam.pose().inverse();
    size_t seen = 0, total = 0;
    for (size_t i = 0; i < pts.size(); i += 7) {
      ++total;
      const auto px = cam.project(to_cam(dst_pose(pts[i])));
      if (px && px->x() >= 0 && px->y() >= 0 && px->x() <= cam.width - 1 && px->y() <= cam.height - 1) ++seen;
    }
    const double overlap = total ? static_cast<double>(seen) / static_cast<double>(total) : 0.0;
    if (overlap > 0.0) ranked.emplace_back(overlap, j);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (ranked.size() > static_cast<size_t>(params.max_pairs)) ranked.resize(static_cast<size_t>(params.max_pairs));
  std::unordered_map<int, size_t> chosen;
  for (const auto& [o, j] : ranked) chosen[merged[j].frame_id] = j;

  const PixelGrid dst_grid(dst.cam_cloud.pixels, dst.stride, dst.camera.width, dst.camera.height);
  for (const auto& rec : set.records) {
    int src_frame;
    Vec2 src_px, dst_px;
    if (rec.dst_frame == dst.frame_id && chosen.count(rec.src_frame)) {
      src_frame = rec.src_frame;
      src_px = rec.src;
      dst_px = rec.dst;
    } else if (rec.src_frame == dst.frame_id && chosen.count(rec.dst_frame)) {
      src_frame = rec.dst_frame;
      src_px = rec.dst;
      dst_px = rec.src;
    } else {
      continue;
    }
    if (!(rec.w > 0.0)) continue;
    CorrTerm t;
    t.w = rec.w;
    if (!dst_grid.bilinear(dst_px, t.corner, t.beta)) continue;
    uint32_t sc[4];
    double sb[4];
    if (!merged[chosen[src_frame]].grid.bilinear(src_px, sc, sb)) continue;
    for (int c = 0; c < 4; ++c) {
      if (sb[c] != 0.0) t.source += sb[c] * model.positions[sc[c]];
    }
    terms.push_back(t);
  }
  const auto cap = static_cast<size_t>(params.max_correspondences);
  if (terms.size() > cap) {
    std::vector<CorrTerm> kept;
    kept.reserve(cap);
    for (size_t i = 0; i < cap; ++i) kept.push_back(terms[i * terms.size() / cap]);
    terms = std::move(kept);
  }
  return terms;
}

void update_model_normals(PointCloud& model, const std::vector<FrameState>& states, int k) {
  std::unordered_map<int, Vec3> centers;
  for (const auto& s : states) centers[s.frame_id] = s.camera().t;
  const size_t kk = std::min<size_t>(static_cast<size_t>(std::max(2, k)), model.size() - 1);
  model = estimate_normals(model, kk, [&](int32_t id) {
    auto it = centers.find(id);
    return it == centers.end() ? Vec3::Zero() : it->second;
  });
}

Stage1Result run_stage1(const std::vector<FrameInput>& frames, const CorrespondenceSet& corr,
                        const AlignParams& params, const ProgressFn& progress) {
  validate_schedule(params);
  if (frames.empty()) throw Error("domain", "stage 1 needs at least one frame");
  if (frames.front().cam_cloud.size() < 3) throw Error("domain", "reference frame has too few points");
  Stage1Result out;
  std::vector<MergedFrame> merged;

  {
    const FrameInput& f0 = frames.front();
    FrameState s0;
    s0.frame_id = f0.frame_id;
    s0.pose0 = f0.camera.pose();
    s0.field = make_frame_field(params, f0.cam_cloud.positions, f0.frame_id);
    s0.field_enabled = false;  // the reference frame is never deformed
    out.model = apply_forward(f0.cam_cloud, s0);
    out.model.normals.clear();
    out.states.push_back(std::move(s0));
    update_model_normals(out.model, out.states, params.normal_k);
    merged.push_back({f0.frame_id, f0.camera, PixelGrid(f0.cam_cloud.pixels, f0.stride, f0.camera.width, f0.camera.height, 0)});
    FrameReport r;
    r.frame_id = f0.frame_id;
    r.status = FrameStatus::Reference;
    r.points = r.accepted = f0.cam_cloud.size();
    r.inlier_fraction = 1.0;
    out.reports.push_back(r);
  }

  for (size_t k = 1; k < frames.size(); ++k) {
    const FrameInput& f = frames[k];
    FrameReport report;
    report.frame_id = f.frame_id;
    report.points = f.cam_cloud.size();
    FrameState state;
    state.frame_id = f.frame_id;
    state.pose0 = f.camera.pose();
    state.field = make_frame_field(params, f.cam_cloud.positions, f.frame_id);
    state.field_enabled = !params.freeze_field;
    if (f.cam_cloud.empty()) {
      report.status = FrameStatus::Unalignable;
      out.states.push_back(std::move(state));
      out.reports.push_back(report);
      continue;
    }

    const NeighborIndex index(out.model.positions);
    const ModelContext ctx = make_model_context(out.model, index, params);
    const auto terms = resolve_correspondences(corr, f, merged, out.model, params);
    report.correspondences = terms.size();
    AlignResult ar = align_frame(ctx, std::move(state), f, terms, params);
    report.final_energy = ar.log.empty() ? 0.0 : ar.log.back().energy;
    if (ar.unalignable) {
      report.status = FrameStatus::Unalignable;
      out.states.push_back(std::move(ar.state));
      out.reports.push_back(report);
      if (progress) progress("frame " + std::to_string(f.frame_id) + ": unalignable, skipped");
      continue;
    }

    const PointCloud world = apply_forward(f.cam_cloud, ar.state);
    std::vector<double> intens(world.size());
    for (size_t i = 0; i < world.size(); ++i) intens[i] = intensity(world.colors[i]);
    const ModelView mv{&out.model, &ctx.gradients.back()};
    const FrameResiduals res = compute_residuals(world.positions, intens, index, mv, params.d_max.back());
    const MergeDecision decision = merge_frame(res, out.stats, params);

    size_t inliers = 0;
    for (auto b : res.inlier) inliers += b;
    report.status = FrameStatus::Merged;
    report.accepted = decision.accepted.size();
    report.inlier_fraction = static_cast<double>(inliers) / static_cast<double>(world.size());
    report.g_d = decision.g_d;
    report.g_c = decision.g_c;
    report.tau_d = decision.tau_d;
    report.tau_c = decision.tau_c;
    report.bootstrap = decision.bootstrap;

    PointCloud accepted = world.subset(decision.accepted);
    const auto offset = static_cast<int64_t>(out.model.size());
    accepted.normals.assign(accepted.size(), Vec3::Zero());
    out.model.append(accepted);
    out.states.push_back(std::move(ar.state));
    update_model_normals(out.model, out.states, params.normal_k);
    merged.push_back({f.frame_id, f.camera, PixelGrid(accepted.pixels, f.stride, f.camera.width, f.camera.height, offset)});
    out.reports.push_back(report);
    if (progress) {
      progress("frame " + std::to_string(f.frame_id) + ": merged " + std::to_string(report.accepted) + "/" +
               std::to_string(report.points) + " points, " + std::to_string(terms.size()) + " correspondences");
    }
  }
  return out;
}

}  // namespace driftalign
