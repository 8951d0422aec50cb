#ifndef FQR_QR_POINTWISE_HPP
#define FQR_QR_POINTWISE_HPP

// Per-location quantile regression: check-loss minimisation by a primal-dual
// interior-point method with vertex polishing, and the posterior covariance
// of the coefficients under an asymmetric-Laplace working likelihood.

#include "fqr/core.hpp"
#include "fqr/dataset.hpp"

#include <numeric>
#include <random>
#include <sstream>

namespace fqr {

/// rho_tau(u) = (tau - 1{u <= 0}) u
inline double check_loss(double u, QuantileLevel tau) {
  return (tau.value() - (u <= 0.0 ? 1.0 : 0.0)) * u;
}

/// psi(Y, X; beta, tau) = X (1{Y <= X'beta} - tau)
inline Vector psi(double y, const Vector& x, const Vector& beta, QuantileLevel tau) {
  if (x.size() != beta.size()) {
    throw Error("psi: dimension mismatch (x has " + std::to_string(x.size()) + ", beta has " +
                std::to_string(beta.size()) + ")");
  }
  const double indicator = y <= x.dot(beta) ? 1.0 : 0.0;
  return x * (indicator - tau.value());
}

inline double check_loss_sum(const Vector& residuals, double tau) {
  return (residuals.array() > 0.0).select(tau * residuals.array(), (tau - 1.0) * residuals.array()).sum();
}

struct McmcConfig {
  int chain_length = 12000;
  int burn_in = 2000;
  double al_scale = 1.0;
  /// Multiplier on the initial random-walk proposal covariance.
  double proposal_scale = 1.0;
  std::uint64_t seed = 20240601;
};

struct SolverConfig {
  double tolerance = 1e-10;
  int max_iterations = 200;
  McmcConfig mcmc;

  void validate() const {
    if (!(tolerance > 0.0)) throw Error("solver tolerance must be positive");
    if (max_iterations < 1) throw Error("max_iterations must be positive");
    if (!(mcmc.burn_in >= 0 && mcmc.chain_length > mcmc.burn_in)) {
      throw Error("MCMC chain_length must exceed burn_in >= 0");
    }
    if (!(mcmc.al_scale > 0.0)) throw Error("asymmetric-Laplace scale must be positive");
  }
};

struct QuantileSolution {
  Vector beta;
  double objective = 0.0;
  /// Observations interpolated exactly (the vertex basis); empty if the
  /// interior-point iterate was kept.
  std::vector<Eigen::Index> basis;
  int iterations = 0;
};

struct PointwiseFit {
  Eigen::Index location_index = 0;
  Vector beta_hat;
  Matrix v_hat;
  double objective = 0.0;
  double subgrad_norm = 0.0;
  double acceptance_rate = 0.0;
};

namespace detail {

inline double max_step(const Vector& x, const Vector& dx) {
  double step = 1.0 / 0.99995;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (dx(i) < 0.0) step = std::min(step, -x(i) / dx(i));
  }
  return step;
}

struct NewtonDirection {
  Vector dbeta, da, du, dv;
};

// Solves the linearised KKT system for the bounded dual
//   max y'a  s.t. X'a = (1-tau) X'1,  0 <= a <= 1,
// with primal slacks u, v (positive/negative residual parts).
inline NewtonDirection newton_direction(const Matrix& X, const Vector& a, const Vector& u, const Vector& v,
                                        const Vector& f1, const Vector& f2, const Vector& f3,
                                        const Vector& f4) {
  const Vector s = (1.0 - a.array()).matrix();
  const Vector D = (u.array() / s.array() + v.array() / a.array()).matrix();
  const Vector rr = (-f1.array() + f3.array() / s.array() - f4.array() / a.array()).matrix();
  const Vector Dinv = D.cwiseInverse();
  const Matrix XtDX = X.transpose() * Dinv.asDiagonal() * X;
  const Vector rhs = X.transpose() * Dinv.cwiseProduct(rr) + f2;
  NewtonDirection dir;
  dir.dbeta = XtDX.ldlt().solve(rhs);
  dir.da = Dinv.cwiseProduct(rr - X * dir.dbeta);
  dir.du = ((-f3.array() + u.array() * dir.da.array()) / s.array()).matrix();
  dir.dv = ((-f4.array() - v.array() * dir.da.array()) / a.array()).matrix();
  return dir;
}

inline void for_each_subset(Eigen::Index k, Eigen::Index d, const std::function<void(const std::vector<Eigen::Index>&)>& fn) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(d));
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    fn(idx);
    Eigen::Index i = d - 1;
    while (i >= 0 && idx[i] == k - d + i) --i;
    if (i < 0) return;
    ++idx[i];
    for (Eigen::Index j = i + 1; j < d; ++j) idx[j] = idx[j - 1] + 1;
  }
}

inline bool lexicographically_less(const Vector& a, const Vector& b) {
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a(i) < b(i)) return true;
    if (a(i) > b(i)) return false;
  }
  return false;
}

}  // namespace detail

/// Minimises sum_i rho_tau(y_i - x_i' beta). Mehrotra predictor-corrector on
/// the bounded-variable dual, then polished onto an exactly interpolating
/// vertex. When the minimiser is not unique the lexicographically smallest
/// optimal vertex found is returned (lower sample quantile for an intercept).
inline QuantileSolution solve_quantile(const Matrix& X, const Vector& y, QuantileLevel tau_level,
                                       double tolerance = 1e-10, int max_iterations = 200) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (y.size() != n) throw Error("solve_quantile: response length does not match design rows");
  if (n < d) throw Error("solve_quantile: fewer observations than coefficients");
  const double tau = tau_level.value();

  const double scale = std::max(y.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  const Vector ys = y / scale;

  Vector beta = X.colPivHouseholderQr().solve(ys);
  Vector r = ys - X * beta;
  const double pad = 0.1 * r.cwiseAbs().mean() + 1e-2;
  Vector u = (r.cwiseMax(0.0).array() + pad).matrix();
  Vector v = ((-r).cwiseMax(0.0).array() + pad).matrix();
  Vector a = Vector::Constant(n, 1.0 - tau);
  const Vector b = (1.0 - tau) * X.transpose() * Vector::Ones(n);

  QuantileSolution sol;
  bool converged = false;
  double gap = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    sol.iterations = it + 1;
    const Vector s = (1.0 - a.array()).matrix();
    gap = u.dot(s) + v.dot(a);
    const double primal = tau * u.sum() + (1.0 - tau) * v.sum();
    if (gap <= tolerance * (1.0 + std::abs(primal))) {
      converged = true;
      break;
    }
    const Vector f1 = X * beta + u - v - ys;
    const Vector f2 = X.transpose() * a - b;

    // predictor
    const Vector f3a = u.cwiseProduct(s);
    const Vector f4a = v.cwiseProduct(a);
    const auto aff = detail::newton_direction(X, a, u, v, f1, f2, f3a, f4a);
    const double ap = std::min(1.0, std::min(detail::max_step(u, aff.du), detail::max_step(v, aff.dv)));
    const double ad = std::min(1.0, std::min(detail::max_step(a, aff.da), detail::max_step(s, -aff.da)));
    const double mu = gap / (2.0 * static_cast<double>(n));
    const double mu_aff = ((u + ap * aff.du).dot(s - ad * aff.da) + (v + ap * aff.dv).dot(a + ad * aff.da)) /
                          (2.0 * static_cast<double>(n));
    const double sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);

    // corrector
    const Vector f3 = (f3a.array() - sigma * mu - aff.du.array() * aff.da.array()).matrix();
    const Vector f4 = (f4a.array() - sigma * mu + aff.dv.array() * aff.da.array()).matrix();
    const auto dir = detail::newton_direction(X, a, u, v, f1, f2, f3, f4);
    const double sp =
        std::min(1.0, 0.99995 * std::min(detail::max_step(u, dir.du), detail::max_step(v, dir.dv)));
    const double sd =
        std::min(1.0, 0.99995 * std::min(detail::max_step(a, dir.da), detail::max_step(s, -dir.da)));
    beta += sp * dir.dbeta;
    u += sp * dir.du;
    v += sp * dir.dv;
    a += sd * dir.da;
  }
  if (!converged) {
    std::ostringstream msg;
    msg << "quantile solver did not converge after " << max_iterations << " iterations; last duality gap "
        << gap * scale << ", objective " << check_loss_sum(y - X * (beta * scale), tau);
    throw Error(msg.str());
  }

  beta *= scale;
  r = y - X * beta;
  const double ipm_objective = check_loss_sum(r, tau);

  // Vertex polish over the observations closest to the fitted hyperplane.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return std::abs(r(i)) < std::abs(r(j)); });
  const Eigen::Index k = std::min<Eigen::Index>(n, d + 4);
  const double slack = 1e-12 * (1.0 + std::abs(ipm_objective)) + tolerance * 10.0 * scale;
  double best_obj = std::numeric_limits<double>::infinity();
  struct Candidate {
    Vector beta;
    double objective;
    std::vector<Eigen::Index> basis;
  };
  std::vector<Candidate> candidates;
  detail::for_each_subset(k, d, [&](const std::vector<Eigen::Index>& pick) {
    Matrix XS(d, d);
    Vector yS(d);
    std::vector<Eigen::Index> basis;
    for (Eigen::Index j = 0; j < d; ++j) {
      const Eigen::Index i = order[static_cast<std::size_t>(pick[j])];
      basis.push_back(i);
      XS.row(j) = X.row(i);
      yS(j) = y(i);
    }
    Eigen::FullPivLU<Matrix> lu(XS);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) return;
    Vector bv = lu.solve(yS);
    Vector rv = y - X * bv;
    for (auto i : basis) rv(i) = 0.0;
    const double obj = check_loss_sum(rv, tau);
    if (!std::isfinite(obj)) return;
    best_obj = std::min(best_obj, obj);
    candidates.push_back({std::move(bv), obj, std::move(basis)});
  });

  if (!candidates.empty() && best_obj <= ipm_objective + slack) {
    const double tie = 1e-12 * (1.0 + std::abs(best_obj));
    const Candidate* chosen = nullptr;
    for (const auto& c : candidates) {
      if (c.objective > best_obj + tie) continue;
      if (!chosen || detail::lexicographically_less(c.beta, chosen->beta)) chosen = &c;
    }
    sol.beta = chosen->beta;
    sol.objective = chosen->objective;
    sol.basis = chosen->basis;
  } else {
    sol.beta = beta;
    sol.objective = ipm_objective;
  }
  return sol;
}

/// ||(1/n) sum_i psi_i|| at beta; observations in `basis` are treated as
/// lying exactly on the fitted hyperplane.
inline double subgradient_norm(const Matrix& X, const Vector& y, const Vector& beta, QuantileLevel tau,
                               const std::vector<Eigen::Index>& basis = {}) {
  Vector r = y - X * beta;
  for (auto i : basis) r(i) = 0.0;
  // 1{y <= x'beta} is 1{r <= 0}
  const Vector ind = ((r.array() <= 0.0).cast<double>() - tau.value()).matrix();
  return (X.transpose() * ind).norm() / static_cast<double>(X.rows());
}

struct AlPosterior {
  Matrix covariance;
  Vector mean;
  double acceptance_rate = 0.0;
};

/// Random-walk Metropolis over beta for the asymmetric-Laplace working
/// likelihood exp(-sum rho_tau(y - X beta) / scale) with a flat prior. The
/// proposal is adapted during burn-in toward 20-40% acceptance and frozen
/// afterwards; the covariance of the retained draws is returned.
inline AlPosterior al_posterior_covariance(const Matrix& X, const Vector& y, QuantileLevel tau_level,
                                           const McmcConfig& cfg, std::uint64_t seed, const Vector& start) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  const double tau = tau_level.value();
  const double inv_scale = 1.0 / cfg.al_scale;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Vector beta = start;
  Vector r = y - X * beta;
  double loglik = -inv_scale * check_loss_sum(r, tau);

  // Initial proposal: posterior covariance is roughly scale * (X'X)^{-1} / f,
  // with the residual density f guessed from the median absolute residual.
  std::vector<double> absr(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) absr[static_cast<std::size_t>(i)] = std::abs(r(i));
  std::nth_element(absr.begin(), absr.begin() + n / 2, absr.end());
  double spread = absr[static_cast<std::size_t>(n / 2)];
  if (!(spread > 0.0)) spread = std::max(1e-8, (y.array() - y.mean()).abs().mean());
  const double density_guess = 0.27 / spread;
  Matrix base = (X.transpose() * X).inverse() * (cfg.al_scale / density_guess);
  base = symmetrize(base);
  double lambda = cfg.proposal_scale * 2.38 * 2.38 / static_cast<double>(d);
  Eigen::LLT<Matrix> chol(lambda * base);
  Matrix L = chol.matrixL();

  const int window = 100;
  int accepted_window = 0;
  int in_window = 0;
  Vector burn_mean = Vector::Zero(d);
  Matrix burn_m2 = Matrix::Zero(d, d);
  int burn_count = 0;

  Vector mean = Vector::Zero(d);
  Matrix m2 = Matrix::Zero(d, d);
  int kept = 0;
  int accepted_kept = 0;
  Vector z(d);
  for (int it = 0; it < cfg.chain_length; ++it) {
    for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(rng);
    const Vector step = L * z;
    const Vector r_new = r - X * step;
    const double ll_new = -inv_scale * check_loss_sum(r_new, tau);
    const bool accept = std::log(unif(rng)) < ll_new - loglik;
    if (accept) {
      beta += step;
      r = r_new;
      loglik = ll_new;
    }
    if (it < cfg.burn_in) {
      ++burn_count;
      const Vector delta = beta - burn_mean;
      burn_mean += delta / burn_count;
      burn_m2 += delta * (beta - burn_mean).transpose();
      accepted_window += accept ? 1 : 0;
      if (++in_window == window) {
        const double rate = static_cast<double>(accepted_window) / window;
        lambda *= std::exp(2.0 * (rate - 0.3));
        if (burn_count >= 20 * d && 2 * it >= cfg.burn_in) {
          Matrix emp = symmetrize(burn_m2 / (burn_count - 1));
          if (smallest_eigenvalue(emp) > 1e-14 * emp.trace()) base = emp;
        }
        Eigen::LLT<Matrix> c2(lambda * base);
        if (c2.info() == Eigen::Success) L = c2.matrixL();
        accepted_window = 0;
        in_window = 0;
      }
    } else {
      ++kept;
      accepted_kept += accept ? 1 : 0;
      const Vector delta = beta - mean;
      mean += delta / kept;
      m2 += delta * (beta - mean).transpose();
    }
  }
  AlPosterior out;
  out.acceptance_rate = kept > 0 ? static_cast<double>(accepted_kept) / kept : 0.0;
  if (kept < 2 || accepted_kept == 0 || !(m2.trace() > 0.0)) {
    std::ostringstream msg;
    msg << "degenerate asymmetric-Laplace chain: all " << kept << " retained draws identical (acceptance rate "
        << out.acceptance_rate << ")";
    throw Error(msg.str());
  }
  out.mean = mean;
  out.covariance = symmetrize(m2 / (kept - 1));
  return out;
}

namespace detail {

inline Vector location_column(const FunctionalDataset& ds, Eigen::Index l) {
  if (l < 0 || l >= ds.T()) {
    throw Error("location index " + std::to_string(l) + " outside [0, " + std::to_string(ds.T()) + ")");
  }
  return ds.responses().col(l);
}

}  // namespace detail

inline Matrix al_posterior_cov(const FunctionalDataset& ds, Eigen::Index l, QuantileLevel tau,
                               const SolverConfig& cfg) {
  cfg.validate();
  const Vector y = detail::location_column(ds, l);
  const auto sol = solve_quantile(ds.design(), y, tau, cfg.tolerance, cfg.max_iterations);
  return al_posterior_covariance(ds.design(), y, tau, cfg.mcmc, derive_seed(cfg.mcmc.seed, l), sol.beta)
      .covariance;
}

/// Check-loss fit and AL posterior covariance at grid location l (0-based).
inline PointwiseFit fit_location(const FunctionalDataset& ds, Eigen::Index l, QuantileLevel tau,
                                 const SolverConfig& cfg) {
  cfg.validate();
  const Vector y = detail::location_column(ds, l);
  const Matrix& X = ds.design();
  const auto sol = solve_quantile(X, y, tau, cfg.tolerance, cfg.max_iterations);
  PointwiseFit fit;
  fit.location_index = l;
  fit.beta_hat = sol.beta;
  fit.objective = sol.objective;
  fit.subgrad_norm = subgradient_norm(X, y, sol.beta, tau, sol.basis);
  const auto post = al_posterior_covariance(X, y, tau, cfg.mcmc, derive_seed(cfg.mcmc.seed, l), sol.beta);
  fit.v_hat = post.covariance;
  fit.acceptance_rate = post.acceptance_rate;
  return fit;
}

inline std::vector<PointwiseFit> fit_all_locations(const FunctionalDataset& ds, QuantileLevel tau,
                                                   const SolverConfig& cfg, int parallelism = 1) {
  cfg.validate();
  const auto T = static_cast<std::size_t>(ds.T());
  std::vector<PointwiseFit> fits(T);
  std::vector<std::string> failures(T);
  parallel_for(T, parallelism, [&](std::size_t l) {
    try {
      fits[l] = fit_location(ds, static_cast<Eigen::Index>(l), tau, cfg);
    } catch (const std::exception& e) {
      failures[l] = e.what();
    }
  });
  std::ostringstream msg;
  std::size_t failed = 0;
  for (std::size_t l = 0; l < T; ++l) {
    if (failures[l].empty()) continue;
    if (failed++ < 10) msg << "\n  location " << l << ": " << failures[l];
  }
  if (failed > 0) {
    throw Error("pointwise fit failed at " + std::to_string(failed) + " location(s):" + msg.str());
  }
  return fits;
}

}  // namespace fqr

#endif  // FQR_QR_POINTWISE_HPP
