#include "driftalign/deform_field.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace driftalign {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'F', 'I', 'E', 'L', 'D', '1'};
constexpr uint32_t kPrimeY = 2654435761u;
constexpr uint32_t kPrimeZ = 805459861u;

using MapXf = Eigen::Map<const Eigen::MatrixXf>;
using MapXd = Eigen::Map<Eigen::MatrixXd>;
using MapVd = Eigen::Map<Eigen::VectorXd>;

inline Eigen::MatrixXd tanh_of(const Eigen::MatrixXd& z) { return z.array().tanh().matrix(); }

}  // namespace

Aabb Aabb::around(std::span<const Vec3> points, double pad) {
  Aabb box;
  if (points.empty()) {
    box.min = Vec3::Constant(-pad);
    box.max = Vec3::Constant(pad);
    return box;
  }
  box.min = box.max = points.front();
  for (const auto& p : points) {
    box.min = box.min.cwiseMin(p);
    box.max = box.max.cwiseMax(p);
  }
  box.min.array() -= pad;
  box.max.array() += pad;
  return box;
}

DeformationField::DeformationField(const FieldConfig& config, const Aabb& bounds) : config_(config), bounds_(bounds) {
  if (config_.levels < 1 || config_.features < 1 || config_.hidden < 1 || config_.log2_table < 4 ||
      config_.log2_table > 24 || config_.embedding_dim < 0) {
    throw Error("config", "DeformationField: invalid capacity settings");
  }
  if (config_.embedding_dim > 0 && config_.num_views < 1) {
    throw Error("config", "DeformationField: view embeddings need num_views >= 1");
  }
  if (!((bounds_.max - bounds_.min).minCoeff() > 0.0)) throw Error("domain", "DeformationField: empty bounding box");
  layout();
  initialize();
}

void DeformationField::layout() {
  const int L = config_.levels;
  const double coarse = bounds_.diagonal() / config_.coarse_divisions;
  const double fine = std::min(config_.finest_cell, coarse);
  const double growth = L > 1 ? std::pow(coarse / fine, 1.0 / (L - 1)) : 1.0;
  const size_t table = size_t{1} << config_.log2_table;
  const Vec3 ext = bounds_.extent();

  cell_.resize(static_cast<size_t>(L));
  levels_.resize(static_cast<size_t>(L));
  size_t offset = 0;
  for (int l = 0; l < L; ++l) {
    const double c = coarse / std::pow(growth, l);
    cell_[static_cast<size_t>(l)] = c;
    Level& lv = levels_[static_cast<size_t>(l)];
    for (int a = 0; a < 3; ++a) lv.cells[a] = std::max(1, static_cast<int>(std::ceil(ext[a] / c)));
    const double vertices = double(lv.cells[0] + 1) * double(lv.cells[1] + 1) * double(lv.cells[2] + 1);
    lv.dense = vertices <= static_cast<double>(table);
    lv.entries = lv.dense ? static_cast<size_t>(vertices) : table;
    lv.offset = offset;
    offset += lv.entries * static_cast<size_t>(config_.features);
  }
  emb_offset_ = offset;
  offset += static_cast<size_t>(config_.num_views) * static_cast<size_t>(config_.embedding_dim);
  const size_t D = static_cast<size_t>(input_dim()), H = static_cast<size_t>(config_.hidden);
  w1_ = offset;
  b1_ = w1_ + H * D;
  w2_ = b1_ + H;
  b2_ = w2_ + H * H;
  w3_ = b2_ + H;
  b3_ = w3_ + 6 * H;
  params_.assign(b3_ + 6, 0.0f);
}

void DeformationField::initialize() {
  std::mt19937_64 rng(config_.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (size_t i = 0; i < emb_offset_; ++i) params_[i] = static_cast<float>(config_.feature_init * unit(rng));
  for (size_t i = emb_offset_; i < w1_; ++i) params_[i] = static_cast<float>(config_.embedding_init * unit(rng));
  const double a1 = 1.0 / std::sqrt(static_cast<double>(input_dim()));
  for (size_t i = w1_; i < b1_; ++i) params_[i] = static_cast<float>(a1 * unit(rng));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(config_.hidden));
  for (size_t i = w2_; i < b2_; ++i) params_[i] = static_cast<float>(a2 * unit(rng));
  // biases and the output head stay zero
}

size_t DeformationField::vertex_entry(const Level& lv, int x, int y, int z) const {
  if (lv.dense) {
    return static_cast<size_t>(x) +
           static_cast<size_t>(lv.cells[0] + 1) * (static_cast<size_t>(y) + static_cast<size_t>(lv.cells[1] + 1) * z);
  }
  const uint32_t h = static_cast<uint32_t>(x) ^ (static_cast<uint32_t>(y) * kPrimeY) ^ (static_cast<uint32_t>(z) * kPrimeZ);
  return h & static_cast<uint32_t>(lv.entries - 1);
}

void DeformationField::interpolate(const Vec3& p_in, uint32_t* corner, double* weight,
                                   Eigen::Matrix<double, 8, 3>* dweight, int l) const {
  const Level& lv = levels_[static_cast<size_t>(l)];
  const double c = cell_[static_cast<size_t>(l)];
  const Vec3 p = bounds_.clamp(p_in);
  int base[3];
  double frac[3];
  bool inside[3];
  for (int a = 0; a < 3; ++a) {
    const double x = (p[a] - bounds_.min[a]) / c;
    int i = static_cast<int>(std::floor(x));
    i = std::clamp(i, 0, lv.cells[a] - 1);
    base[a] = i;
    frac[a] = x - i;
    inside[a] = p_in[a] > bounds_.min[a] && p_in[a] < bounds_.max[a];
  }
  for (int k = 0; k < 8; ++k) {
    const int bx = k & 1, by = (k >> 1) & 1, bz = (k >> 2) & 1;
    const double wx = bx ? frac[0] : 1.0 - frac[0];
    const double wy = by ? frac[1] : 1.0 - frac[1];
    const double wz = bz ? frac[2] : 1.0 - frac[2];
    weight[k] = wx * wy * wz;
    const size_t entry = vertex_entry(lv, base[0] + bx, base[1] + by, base[2] + bz);
    corner[k] = static_cast<uint32_t>(lv.offset + entry * static_cast<size_t>(config_.features));
    if (dweight) {
      const double sx = bx ? 1.0 : -1.0, sy = by ? 1.0 : -1.0, sz = bz ? 1.0 : -1.0;
      (*dweight)(k, 0) = inside[0] ? sx * wy * wz / c : 0.0;
      (*dweight)(k, 1) = inside[1] ? sy * wx * wz / c : 0.0;
      (*dweight)(k, 2) = inside[2] ? sz * wx * wy / c : 0.0;
    }
  }
}

void DeformationField::check_views(size_t n, std::span<const int> views) const {
  if (!has_views()) {
    if (!views.empty()) throw Error("domain", "DeformationField: view index given to a field without embeddings");
    return;
  }
  if (views.size() != n) throw Error("domain", "DeformationField: view-conditioned field needs one view per point");
  for (int v : views) {
    if (v < 0 || v >= config_.num_views) throw Error("domain", "DeformationField: view index out of range");
  }
}

void DeformationField::forward(std::span<const Vec3> points, std::span<const int> views, Tape& tape,
                               Matrix6X& out) const {
  const size_t n = points.size();
  check_views(n, views);
  const int L = config_.levels, F = config_.features, E = config_.embedding_dim, H = config_.hidden;
  const int D = input_dim();
  tape.n = n;
  tape.corner.resize(n * static_cast<size_t>(L) * 8);
  tape.weight.resize(n * static_cast<size_t>(L) * 8);
  tape.views.assign(views.begin(), views.end());
  tape.X.setZero(D, static_cast<Eigen::Index>(n));

  for (size_t i = 0; i < n; ++i) {
    auto col = tape.X.col(static_cast<Eigen::Index>(i));
    for (int l = 0; l < L; ++l) {
      const size_t base = (i * static_cast<size_t>(L) + static_cast<size_t>(l)) * 8;
      uint32_t* corner = &tape.corner[base];
      double* weight = &tape.weight[base];
      interpolate(points[i], corner, weight, nullptr, l);
      for (int k = 0; k < 8; ++k) {
        for (int f = 0; f < F; ++f) col[l * F + f] += weight[k] * static_cast<double>(params_[corner[k] + static_cast<uint32_t>(f)]);
      }
    }
    if (E > 0) {
      const size_t off = emb_offset_ + static_cast<size_t>(views[i]) * static_cast<size_t>(E);
      for (int e = 0; e < E; ++e) col[L * F + e] = params_[off + static_cast<size_t>(e)];
    }
  }

  const Eigen::MatrixXd W1 = MapXf(&params_[w1_], H, D).cast<double>();
  const Eigen::VectorXd b1 = Eigen::Map<const Eigen::VectorXf>(&params_[b1_], H).cast<double>();
  const Eigen::MatrixXd W2 = MapXf(&params_[w2_], H, H).cast<double>();
  const Eigen::VectorXd b2 = Eigen::Map<const Eigen::VectorXf>(&params_[b2_], H).cast<double>();
  const Eigen::MatrixXd W3 = MapXf(&params_[w3_], 6, H).cast<double>();
  const Vec6 b3 = Eigen::Map<const Eigen::Matrix<float, 6, 1>>(&params_[b3_]).cast<double>();

  tape.H1.noalias() = W1 * tape.X;
  tape.H1.colwise() += b1;
  tape.H1 = tanh_of(tape.H1);
  tape.H2.noalias() = W2 * tape.H1;
  tape.H2.colwise() += b2;
  tape.H2 = tanh_of(tape.H2);
  out.resize(6, static_cast<Eigen::Index>(n));
  out.noalias() = W3 * tape.H2;
  out.colwise() += b3;
  out *= config_.output_scale;
}

void DeformationField::backward(const Tape& tape, const Matrix6X& upstream, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw Error("invariant", "DeformationField: gradient buffer has wrong size");
  if (static_cast<size_t>(upstream.cols()) != tape.n) throw Error("invariant", "DeformationField: upstream size mismatch");
  const int L = config_.levels, F = config_.features, E = config_.embedding_dim, H = config_.hidden;
  const int D = input_dim();
  const auto n = static_cast<Eigen::Index>(tape.n);
  if (n == 0) return;

  const Eigen::MatrixXd W1 = MapXf(&params_[w1_], H, D).cast<double>();
  const Eigen::MatrixXd W2 = MapXf(&params_[w2_], H, H).cast<double>();
  const Eigen::MatrixXd W3 = MapXf(&params_[w3_], 6, H).cast<double>();

  const Eigen::MatrixXd dY = config_.output_scale * upstream;
  MapXd(&grad[w3_], 6, H).noalias() += dY * tape.H2.transpose();
  MapVd(&grad[b3_], 6) += dY.rowwise().sum();
  Eigen::MatrixXd dZ2 = W3.transpose() * dY;
  dZ2.array() *= 1.0 - tape.H2.array().square();
  MapXd(&grad[w2_], H, H).noalias() += dZ2 * tape.H1.transpose();
  MapVd(&grad[b2_], H) += dZ2.rowwise().sum();
  Eigen::MatrixXd dZ1 = W2.transpose() * dZ2;
  dZ1.array() *= 1.0 - tape.H1.array().square();
  MapXd(&grad[w1_], H, D).noalias() += dZ1 * tape.X.transpose();
  MapVd(&grad[b1_], H) += dZ1.rowwise().sum();
  const Eigen::MatrixXd dX = W1.transpose() * dZ1;

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto col = dX.col(i);
    for (int l = 0; l < L; ++l) {
      const size_t base = (static_cast<size_t>(i) * static_cast<size_t>(L) + static_cast<size_t>(l)) * 8;
      for (int k = 0; k < 8; ++k) {
        const double w = tape.weight[base + static_cast<size_t>(k)];
        const uint32_t c = tape.corner[base + static_cast<size_t>(k)];
        for (int f = 0; f < F; ++f) grad[c + static_cast<uint32_t>(f)] += w * col[l * F + f];
      }
    }
    if (E > 0) {
      const size_t off = emb_offset_ + static_cast<size_t>(tape.views[static_cast<size_t>(i)]) * static_cast<size_t>(E);
      for (int e = 0; e < E; ++e) grad[off + static_cast<size_t>(e)] += col[L * F + e];
    }
  }
}

Twist DeformationField::eval(const Vec3& p, std::optional<int> view) const {
  Tape tape;
  Matrix6X out;
  const int v = view.value_or(0);
  forward(std::span<const Vec3>(&p, 1), view ? std::span<const int>(&v, 1) : std::span<const int>(), tape, out);
  return Twist::from_vector(out.col(0));
}

std::optional<Mat63> DeformationField::eval_with_grad(const Vec3& p, std::optional<int> view, const Vec6& upstream,
                                                      std::span<double> grad, bool want_input_jacobian) const {
  Tape tape;
  Matrix6X out;
  const int v = view.value_or(0);
  forward(std::span<const Vec3>(&p, 1), view ? std::span<const int>(&v, 1) : std::span<const int>(), tape, out);
  Matrix6X up = upstream;
  backward(tape, up, grad);
  if (want_input_jacobian) return input_jacobian(p, view);
  return std::nullopt;
}

Mat63 DeformationField::input_jacobian(const Vec3& p, std::optional<int> view) const {
  const int v = view.value_or(0);
  check_views(1, view ? std::span<const int>(&v, 1) : std::span<const int>());
  const int L = config_.levels, F = config_.features, E = config_.embedding_dim, H = config_.hidden;
  const int D = input_dim();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(D);
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(D, 3);
  uint32_t corner[8];
  double weight[8];
  Eigen::Matrix<double, 8, 3> dw;
  for (int l = 0; l < L; ++l) {
    interpolate(p, corner, weight, &dw, l);
    for (int k = 0; k < 8; ++k) {
      for (int f = 0; f < F; ++f) {
        const double feat = params_[corner[k] + static_cast<uint32_t>(f)];
        x[l * F + f] += weight[k] * feat;
        dx.row(l * F + f) += feat * dw.row(k);
      }
    }
  }
  if (E > 0) {
    for (int e = 0; e < E; ++e) x[L * F + e] = params_[emb_offset_ + static_cast<size_t>(v * E + e)];
  }
  const Eigen::MatrixXd W1 = MapXf(&params_[w1_], H, D).cast<double>();
  const Eigen::VectorXd b1 = Eigen::Map<const Eigen::VectorXf>(&params_[b1_], H).cast<double>();
  const Eigen::MatrixXd W2 = MapXf(&params_[w2_], H, H).cast<double>();
  const Eigen::VectorXd b2 = Eigen::Map<const Eigen::VectorXf>(&params_[b2_], H).cast<double>();
  const Eigen::MatrixXd W3 = MapXf(&params_[w3_], 6, H).cast<double>();
  const Eigen::VectorXd h1 = (W1 * x + b1).array().tanh().matrix();
  const Eigen::VectorXd h2 = (W2 * h1 + b2).array().tanh().matrix();
  const Eigen::MatrixXd j1 = (1.0 - h1.array().square()).matrix().asDiagonal() * (W1 * dx);
  const Eigen::MatrixXd j2 = (1.0 - h2.array().square()).matrix().asDiagonal() * (W2 * j1);
  return config_.output_scale * (W3 * j2);
}

// ---------------------------------------------------------------------------
// serialization

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, const T& v) {
  const auto* b = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T take(std::span<const uint8_t> bytes, size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw Error("io", "field blob truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<uint8_t> DeformationField::serialize() const {
  std::vector<uint8_t> out(std::begin(kMagic), std::end(kMagic));
  for (int32_t v : {config_.levels, config_.features, config_.log2_table, config_.hidden, config_.embedding_dim,
                    config_.num_views}) {
    put(out, v);
  }
  for (double v : {config_.finest_cell, config_.coarse_divisions, config_.output_scale, bounds_.min.x(),
                   bounds_.min.y(), bounds_.min.z(), bounds_.max.x(), bounds_.max.y(), bounds_.max.z()}) {
    put(out, v);
  }
  put(out, static_cast<uint64_t>(params_.size()));
  const auto* b = reinterpret_cast<const uint8_t*>(params_.data());
  out.insert(out.end(), b, b + params_.size() * sizeof(float));
  return out;
}

DeformationField DeformationField::deserialize(std::span<const uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error("io", "not a deformation field blob");
  }
  size_t pos = sizeof(kMagic);
  FieldConfig cfg;
  cfg.levels = take<int32_t>(bytes, pos);
  cfg.features = take<int32_t>(bytes, pos);
  cfg.log2_table = take<int32_t>(bytes, pos);
  cfg.hidden = take<int32_t>(bytes, pos);
  cfg.embedding_dim = take<int32_t>(bytes, pos);
  cfg.num_views = take<int32_t>(bytes, pos);
  cfg.finest_cell = take<double>(bytes, pos);
  cfg.coarse_divisions = take<double>(bytes, pos);
  cfg.output_scale = take<double>(bytes, pos);
  Aabb box;
  for (int a = 0; a < 3; ++a) box.min[a] = take<double>(bytes, pos);
  for (int a = 0; a < 3; ++a) box.max[a] = take<double>(bytes, pos);
  const auto count = take<uint64_t>(bytes, pos);
  DeformationField field(cfg, box);
  if (count != field.params_.size()) throw Error("io", "field blob parameter count does not match its header");
  if (pos + count * sizeof(float) != bytes.size()) throw Error("io", "field blob has wrong payload size");
  std::memcpy(field.params_.data(), bytes.data() + pos, count * sizeof(float));
  return field;
}

void DeformationField::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io", "write failed: " + path.string());
}

DeformationField DeformationField::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------

double tv_loss(const DeformationField& field, std::span<const Vec3> points, std::span<const int> views, double s,
               std::span<double> grad, double weight) {
  const size_t n = points.size();
  if (n == 0) return 0.0;
  std::vector<Vec3> all;
  std::vector<int> all_views;
  all.reserve(7 * n);
  for (size_t i = 0; i < n; ++i) {
    all.push_back(points[i]);
    for (int a = 0; a < 3; ++a) {
      for (double sign : {1.0, -1.0}) {
        Vec3 q = points[i];
        q[a] += sign * s;
        all.push_back(q);
      }
    }
  }
  if (!views.empty()) {
    all_views.reserve(7 * n);
    for (size_t i = 0; i < n; ++i) all_views.insert(all_views.end(), 7, views[i]);
  }
  DeformationField::Tape tape;
  Matrix6X xi;
  field.forward(all, all_views, tape, xi);
  double loss = 0.0;
  Matrix6X up = Matrix6X::Zero(6, xi.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(7 * i);
    for (int o = 1; o <= 6; ++o) {
      const Vec6 d = xi.col(c) - xi.col(c + o);
      loss += d.squaredNorm();
      up.col(c) += 2.0 * weight * inv_n * d;
      up.col(c + o) -= 2.0 * weight * inv_n * d;
    }
  }
  if (!grad.empty()) field.backward(tape, up, grad);
  return loss * inv_n;
}

}  // namespace driftalign
