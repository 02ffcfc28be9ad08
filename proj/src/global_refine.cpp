#include "driftalign/global_refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <unordered_map>

#include "driftalign/adam.hpp"
#include "driftalign/parallel.hpp"

namespace driftalign {

GlobalProblem build_global_problem(const PointCloud& model, std::span<const Vec3> cam_positions,
                                   const std::vector<FrameState>& states, double color_radius) {
  if (cam_positions.size() != model.size()) throw Error("invariant", "global: camera-space positions do not match model");
  if (!model.has_normals()) throw Error("invariant", "global: model has no normals");
  std::unordered_map<int, size_t> slot;
  for (size_t f = 0; f < states.size(); ++f) slot[states[f].frame_id] = f;

  const size_t F = states.size();
  GlobalProblem p;
  p.cam.resize(F);
  p.normal_cam.resize(F);
  p.gradient_cam.resize(F);
  p.intensity.resize(F);
  p.model_index.resize(F);
  p.fixed.assign(F, 0);
  if (F > 0) p.fixed[0] = 1;

  ColorGradient cg;
  if (!model.empty()) {
    const NeighborIndex index(model.positions);
    cg = estimate_color_gradients(model, index, color_radius);
  }
  for (size_t i = 0; i < model.size(); ++i) {
    auto it = slot.find(model.frame_ids[i]);
    if (it == slot.end()) throw Error("invariant", "global: model point references unknown frame");
    p.model_index[it->second].push_back(i);
  }
  for (size_t f = 0; f < F; ++f) {
    const auto& idx = p.model_index[f];
    std::vector<Vec3> cam(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) cam[j] = cam_positions[idx[j]];
    DeformBatch batch;
    deform_points(states[f], cam, true, batch);
    p.cam[f] = std::move(cam);
    p.normal_cam[f].resize(idx.size());
    p.gradient_cam[f].resize(idx.size());
    p.intensity[f].resize(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) {
      const Mat3 Rt = (batch.camera.R * batch.local_rotation[j]).transpose();
      p.normal_cam[f][j] = model.normal_valid(idx[j]) ? Vec3(Rt * model.normals[idx[j]]) : Vec3::Zero();
      p.gradient_cam[f][j] = Rt * cg.gradient[idx[j]];
      p.intensity[f][j] = cg.intensity[idx[j]];
    }
  }
  return p;
}

GlobalSnapshot take_snapshot(const GlobalProblem& problem, const std::vector<FrameState>& states, int samples,
                             uint64_t seed) {
  GlobalSnapshot snap;
  const size_t F = states.size();
  snap.anchors.resize(F);
  snap.twists.resize(F);
  snap.xi_g.resize(F);
  std::mt19937_64 rng(seed * 2654435761ULL + 17);
  for (size_t f = 0; f < F; ++f) {
    snap.xi_g[f] = states[f].xi_g;
    const size_t n = problem.cam[f].size();
    std::vector<uint32_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<uint32_t>(i);
    const size_t m = std::min(n, static_cast<size_t>(std::max(0, samples)));
    // partial Fisher-Yates: uniform sample without replacement
    for (size_t i = 0; i < m; ++i) {
      std::uniform_int_distribution<size_t> pick(i, n - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(m);
    snap.anchors[f] = idx;
    std::vector<Vec3> pts(m);
    for (size_t i = 0; i < m; ++i) pts[i] = problem.cam[f][idx[i]];
    if (states[f].field_enabled && states[f].field.param_count() > 0 && m > 0) {
      DeformationField::Tape tape;
      states[f].field.forward(pts, {}, tape, snap.twists[f]);
    } else {
      snap.twists[f].setZero(6, static_cast<Eigen::Index>(m));
    }
  }
  return snap;
}

void deform_all(const GlobalProblem& problem, const std::vector<FrameState>& states, bool use_field,
                GlobalGeometry& geometry) {
  geometry.batches.resize(states.size());
  for (size_t f = 0; f < states.size(); ++f) deform_points(states[f], problem.cam[f], use_field, geometry.batches[f]);
}

std::vector<CrossPair> find_cross_pairs(const GlobalProblem& problem, const GlobalGeometry& geometry, int k,
                                        double d_max) {
  std::vector<Vec3> all;
  std::vector<uint32_t> frame_of, point_of;
  for (size_t f = 0; f < geometry.batches.size(); ++f) {
    for (size_t i = 0; i < geometry.batches[f].world.size(); ++i) {
      all.push_back(geometry.batches[f].world[i]);
      frame_of.push_back(static_cast<uint32_t>(f));
      point_of.push_back(static_cast<uint32_t>(i));
    }
  }
  std::vector<CrossPair> pairs;
  if (all.empty() || k <= 0) return pairs;
  const NeighborIndex index(all);
  const size_t n = all.size();
  const size_t kk = static_cast<size_t>(k);
  std::vector<std::vector<CrossPair>> per_chunk(chunk_count(n, 1024));
  parallel_chunks(n, 1024, [&](size_t c, size_t b, size_t e) {
    auto& out = per_chunk[c];
    for (size_t g = b; g < e; ++g) {
      const uint32_t fa = frame_of[g];
      const auto nn = index.k_nearest_if(all[g], kk, [&](size_t j) { return frame_of[j] != fa; }, d_max * d_max);
      for (const auto& nb : nn) {
        if (!(nb.dist2 < d_max * d_max)) continue;
        const uint32_t fb = frame_of[nb.index];
        if (problem.normal_cam[fb][point_of[nb.index]].isZero(0.0)) continue;
        out.push_back({fa, point_of[g], fb, point_of[nb.index]});
      }
    }
  });
  for (auto& c : per_chunk) pairs.insert(pairs.end(), c.begin(), c.end());
  return pairs;
}

GlobalLossValue global_losses(const GlobalProblem& problem, const std::vector<FrameState>& states,
                              const GlobalGeometry& geometry, std::span<const CrossPair> pairs, double lambda_color,
                              std::vector<FrameGrad>* grads) {
  GlobalLossValue out;
  out.pairs = pairs.size();
  if (pairs.empty()) return out;
  const size_t F = states.size();
  const double inv = 1.0 / static_cast<double>(pairs.size());

  // world normals / color gradients of the current state
  auto world_vec = [&](size_t f, size_t i, const Vec3& v) {
    const auto& b = geometry.batches[f];
    return Vec3(b.camera.R * (b.local_rotation[i] * v));
  };

  std::vector<std::vector<Vec3>> gpos, gnorm, ggrad;
  if (grads) {
    gpos.resize(F);
    gnorm.resize(F);
    ggrad.resize(F);
    for (size_t f = 0; f < F; ++f) {
      gpos[f].assign(problem.cam[f].size(), Vec3::Zero());
      gnorm[f].assign(problem.cam[f].size(), Vec3::Zero());
      ggrad[f].assign(problem.cam[f].size(), Vec3::Zero());
    }
  }

  double data = 0.0, color = 0.0;
  for (const auto& pr : pairs) {
    const Vec3& p = geometry.batches[pr.frame_a].world[pr.point_a];
    const Vec3& q = geometry.batches[pr.frame_b].world[pr.point_b];
    const Vec3 n = world_vec(pr.frame_b, pr.point_b, problem.normal_cam[pr.frame_b][pr.point_b]);
    const Vec3 d = world_vec(pr.frame_b, pr.point_b, problem.gradient_cam[pr.frame_b][pr.point_b]);
    const Vec3 diff = p - q;
    const double r = diff.dot(n);
    const double dn = d.dot(n);
    const double c = problem.intensity[pr.frame_b][pr.point_b] + d.dot(diff) - dn * r - problem.intensity[pr.frame_a][pr.point_a];
    data += r * r;
    color += c * c;
    if (!grads) continue;
    const double sd = 2.0 * r * inv;
    const double sc = 2.0 * lambda_color * c * inv;
    // d/d(diff), d/dn, d/dd of r^2 + lambda * c^2
    const Vec3 g_diff = sd * n + sc * (d - dn * n);
    const Vec3 g_n = sd * diff - sc * (r * d + dn * diff);
    const Vec3 g_d = sc * (diff - r * n);
    gpos[pr.frame_a][pr.point_a] += g_diff;
    gpos[pr.frame_b][pr.point_b] -= g_diff;
    gnorm[pr.frame_b][pr.point_b] += g_n;
    ggrad[pr.frame_b][pr.point_b] += g_d;
  }
  out.data = data * inv;
  out.color = color * inv;
  if (grads) {
    for (size_t f = 0; f < F; ++f) {
      if (problem.fixed[f] || problem.cam[f].empty()) continue;
      const VectorTerm vt[2] = {{problem.normal_cam[f], gnorm[f]}, {problem.gradient_cam[f], ggrad[f]}};
      backprop_points(states[f], problem.cam[f], geometry.batches[f], gpos[f], vt, (*grads)[f]);
    }
  }
  return out;
}

double anchor_loss(const GlobalProblem& problem, const std::vector<FrameState>& states,
                   const GlobalSnapshot& snapshot, std::vector<FrameGrad>* grads, double weight) {
  const size_t F = states.size();
  size_t N = 0;
  for (size_t f = 0; f < F; ++f) N += (!problem.fixed[f] && !problem.cam[f].empty()) ? 1 : 0;
  if (N == 0) return 0.0;
  const double invN = 1.0 / static_cast<double>(N);
  double total = 0.0;
  for (size_t f = 0; f < F; ++f) {
    if (problem.fixed[f] || problem.cam[f].empty()) continue;
    const auto& anchors = snapshot.anchors[f];
    const size_t M = anchors.size();
    const FrameState& s = states[f];
    double field_term = 0.0;
    if (M > 0 && s.field_enabled && s.field.param_count() > 0) {
      std::vector<Vec3> pts(M);
      for (size_t i = 0; i < M; ++i) pts[i] = problem.cam[f][anchors[i]];
      DeformationField::Tape tape;
      Matrix6X tw;
      s.field.forward(pts, {}, tape, tw);
      const Matrix6X diff = tw - snapshot.twists[f];
      field_term = diff.squaredNorm() / static_cast<double>(M);
      if (grads && (*grads)[f].field.size() == s.field.param_count()) {
        auto& g = (*grads)[f];
        const Matrix6X up = (weight * 2.0 * invN / static_cast<double>(M)) * diff;
        s.field.backward(tape, up, g.field);
      }
    }
    const Vec6 dg = s.xi_g.vector() - snapshot.xi_g[f].vector();
    total += field_term + dg.squaredNorm();
    if (grads) (*grads)[f].xi_g += (weight * 2.0 * invN) * dg;
  }
  return total * invN;
}

GlobalResult run_global(const PointCloud& model, std::span<const Vec3> cam_positions, std::vector<FrameState> states,
                        const GlobalParams& params, const ProgressFn& progress) {
  GlobalResult result;
  const size_t F = states.size();
  const GlobalProblem problem = build_global_problem(model, cam_positions, states, params.color_radius);
  const GlobalSnapshot snapshot = take_snapshot(problem, states, params.anchor_samples, params.seed);
  const bool train_field = !params.freeze_field;

  std::vector<Adam> cam_opt(F), field_opt(F);
  for (size_t f = 0; f < F; ++f) {
    cam_opt[f] = Adam("camera[" + std::to_string(states[f].frame_id) + "]", 6, {params.lr_camera});
    if (train_field && states[f].field_enabled) {
      field_opt[f] = Adam("field[" + std::to_string(states[f].frame_id) + "]", states[f].field.param_count(), {params.lr_field});
    }
  }

  GlobalGeometry geo;
  std::vector<FrameGrad> grads(F);
  std::vector<FrameState> best;
  double best_energy = std::numeric_limits<double>::infinity();
  double prev = std::numeric_limits<double>::infinity();
  int rising = 0;

  for (int it = 0; it < params.iters; ++it) {
    deform_all(problem, states, true, geo);
    const auto pairs = find_cross_pairs(problem, geo, params.neighbors, params.d_max);
    for (size_t f = 0; f < F; ++f) {
      const bool active = train_field && states[f].field_enabled && !problem.fixed[f];
      grads[f].reset(active ? states[f].field.param_count() : 0);
    }
    const GlobalLossValue l = global_losses(problem, states, geo, pairs, params.lambda_color, &grads);
    const double anchor = anchor_loss(problem, states, snapshot, &grads, params.lambda_anchor);
    const double energy = l.data + params.lambda_color * l.color + params.lambda_anchor * anchor;
    if (!std::isfinite(energy)) throw Error("numeric", "global refinement: non-finite energy at iteration " + std::to_string(it));
    result.energy.push_back(energy);
    if (progress && (it % 10 == 0 || it + 1 == params.iters)) {
      progress("global iter " + std::to_string(it) + ": energy " + std::to_string(energy) + ", pairs " +
               std::to_string(l.pairs));
    }

    if (energy < best_energy) {
      best_energy = energy;
      best = states;
    }
    rising = energy > prev ? rising + 1 : 0;
    prev = energy;
    if (rising >= params.divergence_patience) {
      result.halted = true;
      states = best;
      if (progress) progress("global refinement halted: energy rose for " + std::to_string(rising) + " iterations");
      break;
    }

    for (size_t f = 0; f < F; ++f) {
      if (problem.fixed[f] || problem.cam[f].empty()) continue;
      Vec6 xi = states[f].xi_g.vector();
      cam_opt[f].step(std::span<double>(xi.data(), 6), std::span<const double>(grads[f].xi_g.data(), 6));
      states[f].xi_g = Twist::from_vector(xi);
      if (!grads[f].field.empty()) field_opt[f].step(states[f].field.params(), grads[f].field);
    }
  }

  deform_all(problem, states, true, geo);
  result.model = model;
  for (size_t f = 0; f < F; ++f) {
    const auto& b = geo.batches[f];
    for (size_t j = 0; j < problem.model_index[f].size(); ++j) {
      const size_t i = problem.model_index[f][j];
      result.model.positions[i] = b.world[j];
      const Vec3& nc = problem.normal_cam[f][j];
      if (!nc.isZero(0.0)) result.model.normals[i] = (b.camera.R * (b.local_rotation[j] * nc)).normalized();
    }
  }
  result.states = std::move(states);
  return result;
}

}  // namespace driftalign
