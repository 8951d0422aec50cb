#ifndef FQR_INTERPOLATION_HPP
#define FQR_INTERPOLATION_HPP

// Whole-domain curve estimators built from the pointwise contrast estimates:
// linear interpolation, natural cubic interpolating splines, and per-curve
// smoothing-spline pre-smoothing of the raw functional data.

#include "fqr/core.hpp"
#include "fqr/dataset.hpp"
#include "fqr/qr_pointwise.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fqr {

enum class Method { li, spline2, presmooth_li, bayes_gp };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::li: return "li";
    case Method::spline2: return "spline2";
    case Method::presmooth_li: return "presmooth-li";
    case Method::bayes_gp: return "bayes-gp";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "li") return Method::li;
  if (s == "spline2") return Method::spline2;
  if (s == "presmooth-li") return Method::presmooth_li;
  if (s == "bayes-gp") return Method::bayes_gp;
  throw Error("unknown method '" + s + "' (expected li, spline2, presmooth-li or bayes-gp)");
}

struct CurveEstimate {
  Method method = Method::li;
  SamplingGrid eval_grid{{0.0, 1.0}};
  Vector values;
  double tau = 0.5;
  Vector contrast;
};

/// mu_hat(t_l) = a' beta_hat(t_l)
inline Vector extract_contrast(const std::vector<PointwiseFit>& fits, const Contrast& contrast) {
  Vector mu(static_cast<Eigen::Index>(fits.size()));
  for (std::size_t l = 0; l < fits.size(); ++l) {
    if (fits[l].beta_hat.size() != contrast.size()) throw Error("contrast length does not match coefficients");
    mu(static_cast<Eigen::Index>(l)) = contrast.weights().dot(fits[l].beta_hat);
  }
  return mu;
}

namespace detail {

inline void check_query(const SamplingGrid& grid, double t) {
  if (!(t >= grid.front() && t <= grid.back())) {
    throw Error("query point " + std::to_string(t) + " outside domain [" + std::to_string(grid.front()) + ", " +
                std::to_string(grid.back()) + "]");
  }
}

/// Index l with t in [t_l, t_{l+1}].
inline std::size_t bracket(const SamplingGrid& grid, double t) {
  const auto& p = grid.points();
  auto it = std::upper_bound(p.begin(), p.end(), t);
  std::size_t l = it == p.begin() ? 0 : static_cast<std::size_t>(it - p.begin()) - 1;
  return std::min(l, p.size() - 2);
}

inline void check_values(const SamplingGrid& grid, const Vector& values) {
  if (static_cast<std::size_t>(values.size()) != grid.size()) {
    throw Error("value vector length " + std::to_string(values.size()) + " does not match grid length " +
                std::to_string(grid.size()));
  }
}

}  // namespace detail

inline Vector linear_interpolate(const SamplingGrid& grid, const Vector& values, const std::vector<double>& query) {
  detail::check_values(grid, values);
  Vector out(static_cast<Eigen::Index>(query.size()));
  for (std::size_t q = 0; q < query.size(); ++q) {
    const double t = query[q];
    detail::check_query(grid, t);
    const std::size_t l = detail::bracket(grid, t);
    const double lo = grid[l], hi = grid[l + 1];
    const double w = (hi - t) / (hi - lo);
    out(static_cast<Eigen::Index>(q)) = w * values(l) + (1.0 - w) * values(l + 1);
  }
  return out;
}

/// Second derivatives of the natural cubic interpolating spline at the nodes.
inline Vector natural_spline_second_derivatives(const SamplingGrid& grid, const Vector& values) {
  detail::check_values(grid, values);
  const std::size_t T = grid.size();
  Vector M = Vector::Zero(static_cast<Eigen::Index>(T));
  if (T < 3) return M;
  const std::size_t m = T - 2;
  std::vector<double> lower(m), diag(m), upper(m), rhs(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = k + 1;
    const double h0 = grid[i] - grid[i - 1], h1 = grid[i + 1] - grid[i];
    lower[k] = h0 / 6.0;
    diag[k] = (h0 + h1) / 3.0;
    upper[k] = h1 / 6.0;
    rhs[k] = (values(i + 1) - values(i)) / h1 - (values(i) - values(i - 1)) / h0;
  }
  // Thomas algorithm
  for (std::size_t k = 1; k < m; ++k) {
    const double w = lower[k] / diag[k - 1];
    diag[k] -= w * upper[k - 1];
    rhs[k] -= w * rhs[k - 1];
  }
  M(static_cast<Eigen::Index>(m)) = rhs[m - 1] / diag[m - 1];
  for (std::size_t k = m - 1; k-- > 0;) {
    M(static_cast<Eigen::Index>(k + 1)) = (rhs[k] - upper[k] * M(static_cast<Eigen::Index>(k + 2))) / diag[k];
  }
  return M;
}

/// Minimiser of the integral of (g^(r))^2 through the nodes. r = 1 is the
/// piecewise-linear interpolant, r = 2 the natural cubic spline.
inline Vector spline_interpolate(const SamplingGrid& grid, const Vector& values, int r,
                                 const std::vector<double>& query) {
  if (r == 1) return linear_interpolate(grid, values, query);
  if (r != 2) throw Error("unsupported spline order r = " + std::to_string(r) + " (supported: 1, 2)");
  const Vector M = natural_spline_second_derivatives(grid, values);
  Vector out(static_cast<Eigen::Index>(query.size()));
  for (std::size_t q = 0; q < query.size(); ++q) {
    const double t = query[q];
    detail::check_query(grid, t);
    const std::size_t l = detail::bracket(grid, t);
    const double h = grid[l + 1] - grid[l];
    const double A = (grid[l + 1] - t) / h, B = (t - grid[l]) / h;
    out(static_cast<Eigen::Index>(q)) = A * values(l) + B * values(l + 1) +
                                        ((A * A * A - A) * M(l) + (B * B * B - B) * M(l + 1)) * h * h / 6.0;
  }
  return out;
}

/// Integral of (g'')^2 for the cubic spline with node second derivatives M.
inline double spline_roughness(const SamplingGrid& grid, const Vector& M) {
  double total = 0.0;
  for (std::size_t l = 0; l + 1 < grid.size(); ++l) {
    const double h = grid[l + 1] - grid[l];
    total += h / 3.0 * (M(l) * M(l) + M(l) * M(l + 1) + M(l + 1) * M(l + 1));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Pre-smoothing

struct PresmoothConfig {
  /// Equivalent degrees of freedom shared by every curve; GCV per curve if unset.
  std::optional<double> df;
  int threads = 1;
};

/// Cubic smoothing spline on a fixed grid in the Demmler-Reinsch basis:
/// fitted = U diag(1 / (1 + lambda k)) U' y where K = U diag(k) U' is the
/// roughness matrix with y'Ky = integral of (g'')^2 for the interpolant.
class SmoothingSpline {
 public:
  explicit SmoothingSpline(const SamplingGrid& grid) {
    const Eigen::Index T = static_cast<Eigen::Index>(grid.size());
    Matrix K = Matrix::Zero(T, T);
    if (T >= 3) {
      const Eigen::Index m = T - 2;
      Matrix Q = Matrix::Zero(T, m);
      Matrix R = Matrix::Zero(m, m);
      for (Eigen::Index j = 0; j < m; ++j) {
        const double h0 = grid[j + 1] - grid[j], h1 = grid[j + 2] - grid[j + 1];
        Q(j, j) = 1.0 / h0;
        Q(j + 1, j) = -1.0 / h0 - 1.0 / h1;
        Q(j + 2, j) = 1.0 / h1;
        R(j, j) = (h0 + h1) / 3.0;
        if (j + 1 < m) R(j, j + 1) = R(j + 1, j) = h1 / 6.0;
      }
      K = symmetrize(Q * R.ldlt().solve(Q.transpose()));
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(K);
    basis_ = es.eigenvectors();
    eigen_ = es.eigenvalues().cwiseMax(0.0);
    // null space (constants, lines) must not be penalised
    eigen_.head(std::min<Eigen::Index>(2, T)).setZero();
  }

  double degrees_of_freedom(double lambda) const {
    return (1.0 / (1.0 + lambda * eigen_.array())).sum();
  }

  double lambda_for_df(double df) const {
    const double T = static_cast<double>(eigen_.size());
    if (!(df >= 2.0 && df <= T)) throw Error("smoothing df must lie in [2, T]");
    double lo = -30.0, hi = 30.0;  // log10 lambda
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (degrees_of_freedom(std::pow(10.0, mid)) > df ? lo : hi) = mid;
    }
    return std::pow(10.0, 0.5 * (lo + hi));
  }

  double gcv(const Vector& coef, double lambda) const {
    const double T = static_cast<double>(eigen_.size());
    const Eigen::ArrayXd shrink = lambda * eigen_.array() / (1.0 + lambda * eigen_.array());
    const double rss = (shrink * coef.array()).square().sum();
    const double resid_df = shrink.sum();
    return T * rss / (resid_df * resid_df);
  }

  /// GCV-optimal lambda: log-spaced scan, then golden-section refinement.
  double gcv_lambda(const Vector& y) const {
    const Vector coef = basis_.transpose() * y;
    const double top = std::log10(std::max(eigen_.maxCoeff(), 1e-300));
    const double lo_bound = -top - 4.0, hi_bound = -top + 14.0;  // log10 lambda
    const int steps = 60;
    double best = lo_bound, best_val = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= steps; ++k) {
      const double x = lo_bound + (hi_bound - lo_bound) * k / steps;
      const double v = gcv(coef, std::pow(10.0, x));
      if (v < best_val) {
        best_val = v;
        best = x;
      }
    }
    const double step = (hi_bound - lo_bound) / steps;
    double a = best - step, b = best + step;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = gcv(coef, std::pow(10.0, c)), fd = gcv(coef, std::pow(10.0, d));
    for (int it = 0; it < 60; ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - phi * (b - a);
        fc = gcv(coef, std::pow(10.0, c));
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + phi * (b - a);
        fd = gcv(coef, std::pow(10.0, d));
      }
    }
    const double x = 0.5 * (a + b);
    return gcv(coef, std::pow(10.0, x)) <= best_val ? std::pow(10.0, x) : std::pow(10.0, best);
  }

  Vector smooth(const Vector& y, double lambda) const {
    const Vector coef = basis_.transpose() * y;
    return basis_ * (coef.array() / (1.0 + lambda * eigen_.array())).matrix();
  }

 private:
  Matrix basis_;
  Vector eigen_;
};

/// Replaces every response curve by its cubic smoothing-spline fit on the
/// same grid; design and grid are unchanged.
inline FunctionalDataset presmooth_dataset(const FunctionalDataset& ds, const PresmoothConfig& cfg = {}) {
  const SmoothingSpline spline(ds.grid());
  std::optional<double> fixed_lambda;
  if (cfg.df) fixed_lambda = spline.lambda_for_df(*cfg.df);
  Matrix out(ds.n(), ds.T());
  parallel_for(static_cast<std::size_t>(ds.n()), cfg.threads, [&](std::size_t i) {
    const Vector y = ds.responses().row(static_cast<Eigen::Index>(i)).transpose();
    const double lambda = fixed_lambda ? *fixed_lambda : spline.gcv_lambda(y);
    out.row(static_cast<Eigen::Index>(i)) = spline.smooth(y, lambda).transpose();
  });
  return ds.with_responses(std::move(out));
}

}  // namespace fqr

#endif  // FQR_INTERPOLATION_HPP
