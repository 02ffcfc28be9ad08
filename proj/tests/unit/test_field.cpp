#include <random>

#include <gtest/gtest.h>

#include "driftalign/adam.hpp"
#include "driftalign/deform_field.hpp"
#include "test_util.hpp"

using namespace driftalign;

namespace {

Aabb unit_box() { return {Vec3(-0.5, -0.5, -0.5), Vec3(0.5, 0.5, 0.5)}; }

// A field with every parameter randomized so that no gradient vanishes.
DeformationField random_field(int embedding_dim = 0, int views = 0) {
  FieldConfig cfg;
  cfg.levels = 4;
  cfg.log2_table = 10;
  cfg.hidden = 16;
  cfg.embedding_dim = embedding_dim;
  cfg.num_views = views;
  cfg.finest_cell = 0.05;
  cfg.seed = 7;
  DeformationField f(cfg, unit_box());
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> U(-0.6f, 0.6f);
  for (float& p : f.params()) p = U(rng);
  return f;
}

std::vector<Vec3> random_points(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-0.45, 0.45);
  std::vector<Vec3> p(n);
  for (auto& x : p) x = Vec3(U(rng), U(rng), U(rng));
  return p;
}

// Central difference in one float32 parameter using the step actually realized
// after rounding.
template <typename F>
double param_fd(DeformationField& f, size_t i, F&& objective) {
  const float x0 = f.params()[i];
  const float hi = x0 + 1e-3f, lo = x0 - 1e-3f;
  f.params()[i] = hi;
  const double a = objective();
  f.params()[i] = lo;
  const double b = objective();
  f.params()[i] = x0;
  return (a - b) / (static_cast<double>(hi) - static_cast<double>(lo));
}

}  // namespace

TEST(Field, FreshFieldIsIdentity) {
  FieldConfig cfg;
  const DeformationField f(cfg, unit_box());
  for (const auto& p : random_points(50, 1)) EXPECT_EQ(f.eval(p).vector(), Vec6::Zero());
}

TEST(Field, BackwardMatchesFiniteDifferences) {
  DeformationField f = random_field();
  const auto pts = random_points(5, 2);
  Matrix6X up(6, static_cast<long>(pts.size()));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0.0, 1.0);
  for (long i = 0; i < up.size(); ++i) up.data()[i] = N(rng);

  auto objective = [&] {
    double s = 0.0;
    for (size_t i = 0; i < pts.size(); ++i) s += up.col(static_cast<long>(i)).dot(f.eval(pts[i]).vector());
    return s;
  };
  DeformationField::Tape tape;
  Matrix6X out;
  f.forward(pts, {}, tape, out);
  for (size_t i = 0; i < pts.size(); ++i) {
    EXPECT_LT((out.col(static_cast<long>(i)) - f.eval(pts[i]).vector()).norm(), 1e-12);
  }
  std::vector<double> grad(f.param_count(), 0.0);
  f.backward(tape, up, grad);

  std::vector<double> single(f.param_count(), 0.0);
  for (size_t i = 0; i < pts.size(); ++i) f.eval_with_grad(pts[i], std::nullopt, up.col(static_cast<long>(i)), single);

  std::uniform_int_distribution<size_t> pick(0, f.param_count() - 1);
  int nonzero = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const size_t i = pick(rng);
    const double fd = param_fd(f, i, objective);
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "param " << i;
    EXPECT_NEAR(single[i], grad[i], 1e-10 * std::max(1.0, std::abs(grad[i])));
    nonzero += std::abs(grad[i]) > 1e-8;
  }
  EXPECT_GT(nonzero, 10);
  // the head (last params) always receives gradient
  for (size_t i = f.param_count() - 6; i < f.param_count(); ++i) {
    EXPECT_NEAR(grad[i], param_fd(f, i, objective), 1e-4);
  }
}

TEST(Field, InputJacobianMatchesFiniteDifferences) {
  const DeformationField f = random_field();
  for (const auto& p : random_points(20, 4)) {
    const Mat63 J = f.input_jacobian(p);
    const double h = 1e-6;
    for (int c = 0; c < 3; ++c) {
      Vec3 d = Vec3::Zero();
      d[c] = h;
      const Vec6 fd = (f.eval(p + d).vector() - f.eval(p - d).vector()) / (2 * h);
      EXPECT_LT((J.col(c) - fd).norm(), 1e-5 * std::max(1.0, fd.norm()));
    }
    std::vector<double> g(f.param_count(), 0.0);
    const auto J2 = f.eval_with_grad(p, std::nullopt, Vec6::Ones(), g, true);
    ASSERT_TRUE(J2.has_value());
    EXPECT_LT((*J2 - J).norm(), 1e-12);
  }
}

TEST(Field, ClampedAxesHaveZeroJacobian) {
  const DeformationField f = random_field();
  const Mat63 J = f.input_jacobian(Vec3(2.0, 0.1, 0.0));
  EXPECT_EQ(J.col(0).norm(), 0.0);
  EXPECT_GT(J.col(1).norm(), 0.0);
  EXPECT_EQ(f.eval(Vec3(2.0, 0.1, 0.0)).vector(), f.eval(Vec3(0.5, 0.1, 0.0)).vector());
}

TEST(Field, ViewConditioning) {
  DeformationField f = random_field(4, 3);
  const Vec3 p(0.1, -0.2, 0.3);
  EXPECT_GT((f.eval(p, 0).vector() - f.eval(p, 2).vector()).norm(), 1e-6);
  EXPECT_THROW(f.eval(p, 3), Error);
  const std::vector<Vec3> pts = {p, p};
  const std::vector<int> views = {1, 2};
  Matrix6X up = Matrix6X::Ones(6, 2);
  auto objective = [&] { return f.eval(p, 1).vector().sum() + f.eval(p, 2).vector().sum(); };
  DeformationField::Tape tape;
  Matrix6X out;
  f.forward(pts, views, tape, out);
  std::vector<double> grad(f.param_count(), 0.0);
  f.backward(tape, up, grad);
  // perturb a block that includes the embedding table
  for (size_t i = 0; i < f.param_count(); i += 97) {
    EXPECT_NEAR(grad[i], param_fd(f, i, objective), 1e-4 * std::max(1.0, std::abs(grad[i])));
  }
}

TEST(Field, SerializeRoundtripIsBitExact) {
  testutil::TempDir dir("field");
  const DeformationField f = random_field(2, 5);
  f.save(dir / "f.bin");
  const DeformationField g = DeformationField::load(dir / "f.bin");
  ASSERT_EQ(g.param_count(), f.param_count());
  EXPECT_TRUE(std::equal(f.params().begin(), f.params().end(), g.params().begin()));
  for (const auto& p : random_points(10, 5)) EXPECT_EQ(f.eval(p, 3).vector(), g.eval(p, 3).vector());
  auto bytes = f.serialize();
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(DeformationField::deserialize(bytes), Error);
}

TEST(Field, TvGradientMatchesFiniteDifferences) {
  DeformationField f = random_field();
  const auto pts = random_points(8, 6);
  std::vector<double> grad(f.param_count(), 0.0);
  const double w = 2.5;
  const double loss = tv_loss(f, pts, {}, 0.02, grad, w);
  EXPECT_GT(loss, 0.0);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<size_t> pick(0, f.param_count() - 1);
  for (int trial = 0; trial < 150; ++trial) {
    const size_t i = pick(rng);
    const double fd = w * param_fd(f, i, [&] { return tv_loss(f, pts, {}, 0.02, {}); });
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
  // constant field has zero TV
  FieldConfig cfg;
  EXPECT_EQ(tv_loss(DeformationField(cfg, unit_box()), pts, {}, 0.02, {}), 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<float> x = {1.0f, -2.0f, 0.5f};
  const std::vector<double> g = {0.3, -4.0, 0.0};
  Adam opt("t", 3, {0.1, 0.9, 0.999, 1e-8});
  opt.step(std::span<float>(x), std::span<const double>(g));
  EXPECT_NEAR(x[0], 0.9, 1e-6);
  EXPECT_NEAR(x[1], -1.9, 1e-6);
  EXPECT_EQ(x[2], 0.5f);
  const std::vector<double> bad = {0.0, std::nan(""), 0.0};
  EXPECT_THROW(opt.step(std::span<float>(x), std::span<const double>(bad)), Error);
}
