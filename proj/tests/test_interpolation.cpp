#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fqr/interpolation.hpp"
#include "test_util.hpp"

using namespace fqr;

namespace {

SamplingGrid random_grid(std::size_t T, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> gap(0.2, 1.5);
  std::vector<double> p{gap(rng)};
  for (std::size_t l = 1; l < T; ++l) p.push_back(p.back() + gap(rng));
  return SamplingGrid(p);
}

Vector random_values(std::size_t T, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Vector v(static_cast<Eigen::Index>(T));
  for (auto& x : v) x = z(rng);
  return v;
}

std::vector<double> random_queries(const SamplingGrid& g, int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(g.front(), g.back());
  std::vector<double> q;
  for (int k = 0; k < count; ++k) q.push_back(u(rng));
  q.push_back(g.front());
  q.push_back(g.back());
  return q;
}

// Second derivatives of the clamped cubic interpolant with end slopes s0, s1.
Vector clamped_second_derivatives(const SamplingGrid& g, const Vector& y, double s0, double s1) {
  const Eigen::Index T = y.size();
  Matrix A = Matrix::Zero(T, T);
  Vector b(T);
  const double h0 = g[1] - g[0], hn = g[T - 1] - g[T - 2];
  A(0, 0) = h0 / 3.0;
  A(0, 1) = h0 / 6.0;
  b(0) = (y(1) - y(0)) / h0 - s0;
  for (Eigen::Index i = 1; i + 1 < T; ++i) {
    const double a = g[i] - g[i - 1], c = g[i + 1] - g[i];
    A(i, i - 1) = a / 6.0;
    A(i, i) = (a + c) / 3.0;
    A(i, i + 1) = c / 6.0;
    b(i) = (y(i + 1) - y(i)) / c - (y(i) - y(i - 1)) / a;
  }
  A(T - 1, T - 2) = hn / 6.0;
  A(T - 1, T - 1) = hn / 3.0;
  b(T - 1) = s1 - (y(T - 1) - y(T - 2)) / hn;
  return A.lu().solve(b);
}

}  // namespace

TEST(ExtractContrast, Examples) {
  PointwiseFit f;
  f.beta_hat = Vector(2);
  f.beta_hat << 2.0, 5.0;
  EXPECT_DOUBLE_EQ(extract_contrast({f}, Contrast::unit(2, 0))(0), 2.0);
  EXPECT_DOUBLE_EQ(extract_contrast({f}, Contrast::unit(2, 1))(0), 5.0);
  f.beta_hat << 1.0, 1.0;
  EXPECT_NEAR(extract_contrast({f}, Contrast(Vector::Ones(2)))(0), std::sqrt(2.0), 1e-15);
  EXPECT_THROW(extract_contrast({f}, Contrast::unit(3, 0)), Error);
}

TEST(LinearInterpolate, Examples) {
  const SamplingGrid g({0.0, 1.0});
  Vector v(2);
  v << 0.0, 2.0;
  EXPECT_DOUBLE_EQ(linear_interpolate(g, v, {0.5})(0), 1.0);
  EXPECT_DOUBLE_EQ(linear_interpolate(g, v, {1.0})(0), 2.0);
  EXPECT_THROW(linear_interpolate(g, v, {1.5}), Error);
  EXPECT_THROW(linear_interpolate(g, v, {-1e-9}), Error);
  EXPECT_THROW(linear_interpolate(g, Vector::Ones(3), {0.5}), Error);
}

TEST(LinearInterpolate, AffineReproducedAndBracketed) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    const auto g = random_grid(12, rng);
    Vector affine(12);
    for (Eigen::Index l = 0; l < 12; ++l) affine(l) = 1.5 - 0.7 * g[l];
    const auto q = random_queries(g, 30, rng);
    const Vector out = linear_interpolate(g, affine, q);
    for (std::size_t k = 0; k < q.size(); ++k) EXPECT_NEAR(out(k), 1.5 - 0.7 * q[k], 1e-12);

    const Vector v = random_values(12, rng);
    const Vector li = linear_interpolate(g, v, q);
    for (std::size_t k = 0; k < q.size(); ++k) {
      const std::size_t l = detail::bracket(g, q[k]);
      EXPECT_GE(li(k), std::min(v(l), v(l + 1)) - 1e-15);
      EXPECT_LE(li(k), std::max(v(l), v(l + 1)) + 1e-15);
    }
  }
}

TEST(SplineInterpolate, ThreeKnotExample) {
  const SamplingGrid g({0.0, 1.0, 2.0});
  Vector v(3);
  v << 0.0, 1.0, 0.0;
  const Vector M = natural_spline_second_derivatives(g, v);
  EXPECT_NEAR(M(1), -3.0, 1e-14);
  // g(0.5) = 0.5 + (0.125 - 0.5) (-3) / 6 = 11/16
  EXPECT_NEAR(spline_interpolate(g, v, 2, {0.5})(0), 0.6875, 1e-14);
}

TEST(SplineInterpolate, OrderOneIsLinear) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 30; ++rep) {
    const auto g = random_grid(9, rng);
    const Vector v = random_values(9, rng);
    const auto q = random_queries(g, 40, rng);
    EXPECT_LE((spline_interpolate(g, v, 1, q) - linear_interpolate(g, v, q)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SplineInterpolate, UnsupportedOrder) {
  const SamplingGrid g({0.0, 1.0, 2.0});
  EXPECT_THROW(spline_interpolate(g, Vector::Zero(3), 3, {0.5}), Error);
  EXPECT_THROW(spline_interpolate(g, Vector::Zero(3), 0, {0.5}), Error);
}

TEST(SplineInterpolate, AffineAndInterpolation) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    const auto g = random_grid(10, rng);
    Vector affine(10);
    for (Eigen::Index l = 0; l < 10; ++l) affine(l) = -2.0 + 0.3 * g[l];
    const auto q = random_queries(g, 20, rng);
    const Vector out = spline_interpolate(g, affine, 2, q);
    for (std::size_t k = 0; k < q.size(); ++k) EXPECT_NEAR(out(k), -2.0 + 0.3 * q[k], 1e-10);

    const Vector v = random_values(10, rng);
    for (int r : {1, 2}) {
      const Vector at_nodes = spline_interpolate(g, v, r, g.points());
      EXPECT_LE((at_nodes - v).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(SplineInterpolate, NaturalSplineMinimisesRoughness) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> slope(0.0, 2.0);
  for (int rep = 0; rep < 10; ++rep) {
    const auto g = random_grid(7, rng);
    const Vector v = random_values(7, rng);
    const double natural = spline_roughness(g, natural_spline_second_derivatives(g, v));
    for (int k = 0; k < 20; ++k) {
      const Vector M = clamped_second_derivatives(g, v, slope(rng), slope(rng));
      EXPECT_LE(natural, spline_roughness(g, M) + 1e-12);
    }
  }
}

TEST(Method, ParseRoundTrip) {
  for (Method m : {Method::li, Method::spline2, Method::presmooth_li, Method::bayes_gp}) {
    EXPECT_EQ(parse_method(to_string(m)), m);
  }
  EXPECT_THROW(parse_method("kernel"), Error);
}

TEST(Presmooth, ConstantAndAffineRowsUnchanged) {
  const auto g = SamplingGrid::equally_spaced(0.0, 5.1, 40);
  Matrix Y(3, 40);
  std::mt19937_64 rng(5);
  const Vector noise = random_values(40, rng);
  for (Eigen::Index l = 0; l < 40; ++l) {
    Y(0, l) = 3.25;
    Y(1, l) = 1.0 - 0.4 * g[l];
    Y(2, l) = noise(l);
  }
  Matrix X(3, 1);
  X.setOnes();
  const FunctionalDataset ds(Y, X, g);
  for (std::optional<double> df : {std::optional<double>{}, std::optional<double>{6.0}}) {
    PresmoothConfig cfg;
    cfg.df = df;
    const auto out = presmooth_dataset(ds, cfg);
    EXPECT_LE((out.responses().row(0) - Y.row(0)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((out.responses().row(1) - Y.row(1)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(out.design(), ds.design());
    EXPECT_EQ(out.grid(), ds.grid());
  }
}

TEST(Presmooth, HeavySmoothingReducesVariance) {
  const auto g = SamplingGrid::equally_spaced(0.0, 1.0, 64);
  std::mt19937_64 rng(6);
  Matrix Y(20, 64);
  for (Eigen::Index i = 0; i < 20; ++i) Y.row(i) = random_values(64, rng).transpose();
  const FunctionalDataset ds(Y, Matrix::Ones(20, 1), g);
  PresmoothConfig cfg;
  cfg.df = 4.0;
  const auto out = presmooth_dataset(ds, cfg);
  auto var = [](const Eigen::RowVectorXd& r) { return (r.array() - r.mean()).square().mean(); };
  for (Eigen::Index i = 0; i < 20; ++i) EXPECT_LT(var(out.responses().row(i)), var(Y.row(i)));
}

TEST(Presmooth, DegreesOfFreedomAndGcv) {
  const auto g = SamplingGrid::equally_spaced(0.0, 1.0, 50);
  const SmoothingSpline s(g);
  EXPECT_NEAR(s.degrees_of_freedom(0.0), 50.0, 1e-9);
  EXPECT_NEAR(s.degrees_of_freedom(1e20), 2.0, 1e-6);
  EXPECT_NEAR(s.degrees_of_freedom(s.lambda_for_df(7.5)), 7.5, 1e-6);
  EXPECT_THROW(s.lambda_for_df(1.0), Error);

  // smooth signal plus small noise: GCV keeps the signal
  std::mt19937_64 rng(7);
  std::normal_distribution<double> z(0.0, 0.05);
  Vector y(50), truth(50);
  for (Eigen::Index l = 0; l < 50; ++l) {
    truth(l) = std::sin(2.0 * 3.14159 * g[l]);
    y(l) = truth(l) + z(rng);
  }
  const Vector fit = s.smooth(y, s.gcv_lambda(y));
  EXPECT_LT((fit - truth).squaredNorm(), (y - truth).squaredNorm());
}

TEST(Presmooth, ThreadCountDoesNotMatter) {
  const auto g = SamplingGrid::equally_spaced(0.0, 1.0, 32);
  std::mt19937_64 rng(8);
  Matrix Y(9, 32);
  for (Eigen::Index i = 0; i < 9; ++i) Y.row(i) = random_values(32, rng).transpose();
  const FunctionalDataset ds(Y, Matrix::Ones(9, 1), g);
  PresmoothConfig one, four;
  four.threads = 4;
  EXPECT_EQ(presmooth_dataset(ds, one).responses(), presmooth_dataset(ds, four).responses());
}
