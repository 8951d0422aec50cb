#ifndef FQR_BAYES_GP_HPP
#define FQR_BAYES_GP_HPP

// Gaussian-process model for the contrast curve: mu ~ GP(0, K) with a squared
// exponential kernel, observed through mu_hat(t) ~ MVN(mu(t), Sigma_t / n).
// Hyperparameters by maximum marginal likelihood with a log(T) adjustment of
// the length-scale parameter, closed-form posterior, and simultaneous
// credible bands from posterior draws.

#include "fqr/core.hpp"
#include "fqr/coupling_cov.hpp"
#include "fqr/inference.hpp"

#include <numbers>
#include <optional>
#include <string>

namespace fqr {

enum class LengthAdjustment { multiply, divide, none };

inline std::string to_string(LengthAdjustment a) {
  switch (a) {
    case LengthAdjustment::multiply: return "multiply";
    case LengthAdjustment::divide: return "divide";
    case LengthAdjustment::none: return "none";
  }
  return "?";
}

inline LengthAdjustment parse_length_adjustment(const std::string& s) {
  if (s == "multiply") return LengthAdjustment::multiply;
  if (s == "divide") return LengthAdjustment::divide;
  if (s == "none") return LengthAdjustment::none;
  throw Error("unknown length-scale adjustment '" + s + "' (expected multiply, divide or none)");
}

struct GpHyper {
  double theta_sigma = 1.0;  // kernel amplitude
  double theta_l = 1.0;      // squared length-scale, in squared units of t
  bool adjusted = false;
  LengthAdjustment adjustment = LengthAdjustment::none;
  /// theta_l before the log(T) adjustment.
  double theta_l_mmle = 1.0;
  double loglik = 0.0;
  std::optional<std::string> warning;
};

struct GpSearchConfig {
  int grid_size = 25;
  int refinements = 20;
  LengthAdjustment adjustment = LengthAdjustment::divide;
  int threads = 1;
};

struct GpPosterior {
  Vector mean;
  Matrix cov;
  GpHyper hyper;
  Matrix noise_cov_used;  // Sigma_t / n
  SamplingGrid eval_grid{{0.0, 1.0}};
};

/// K(s,t) = theta_sigma exp(-(t - s)^2 / theta_l)
inline double se_kernel(double s, double t, const GpHyper& hyper) {
  const double d = t - s;
  return hyper.theta_sigma * std::exp(-d * d / hyper.theta_l);
}

inline Matrix kernel_matrix(const std::vector<double>& a, const std::vector<double>& b, const GpHyper& hyper) {
  Matrix K(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      K(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = se_kernel(a[i], b[j], hyper);
  return K;
}

namespace detail {

inline void add_jitter(Matrix& K) {
  const double jitter = 1e-10 * K.trace() / static_cast<double>(K.rows());
  K.diagonal().array() += jitter;
}

inline Matrix marginal_covariance(const Matrix& noise, const SamplingGrid& grid, const GpHyper& hyper) {
  Matrix K = kernel_matrix(grid.points(), grid.points(), hyper);
  add_jitter(K);
  return symmetrize(noise + K);
}

inline double gaussian_loglik(const Vector& x, const Matrix& A) {
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw Error("marginal covariance is not positive definite after jitter");
  const Vector alpha = llt.solve(x);
  const Matrix& L = llt.matrixLLT();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += 2.0 * std::log(L(i, i));
  return -0.5 * x.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

inline Matrix noise_matrix(const CouplingCovariance& cov, Eigen::Index n) {
  return symmetrize(cov.sigma / static_cast<double>(n));
}

}  // namespace detail

/// log N(mu_hat; 0, noise + K(t, t)).
inline double marginal_loglik(const Vector& mu_hat, const Matrix& noise, const SamplingGrid& grid,
                              const GpHyper& hyper) {
  if (mu_hat.size() != noise.rows() || static_cast<std::size_t>(mu_hat.size()) != grid.size()) {
    throw Error("marginal_loglik: dimension mismatch");
  }
  return detail::gaussian_loglik(mu_hat, detail::marginal_covariance(noise, grid, hyper));
}

inline double marginal_loglik(const Vector& mu_hat, const CouplingCovariance& cov, Eigen::Index n,
                              const SamplingGrid& grid, const GpHyper& hyper) {
  return marginal_loglik(mu_hat, detail::noise_matrix(cov, n), grid, hyper);
}

/// Maximum marginal likelihood over a log-spaced grid in (theta_sigma, theta_l)
/// followed by coordinate refinement, then theta_l adjusted by log(T).
inline GpHyper fit_hyper(const Vector& mu_hat, const Matrix& noise, const SamplingGrid& grid,
                         const GpSearchConfig& cfg = {}) {
  const Eigen::Index T = mu_hat.size();
  if (T < 4) throw Error("hyperparameter search needs at least 4 grid points");
  const double mean = mu_hat.mean();
  const double sample_var = (mu_hat.array() - mean).square().sum() / static_cast<double>(T - 1);
  const double v = std::max(sample_var, noise.diagonal().mean());
  const double s_lo = std::log10(1e-4 * v), s_hi = std::log10(1e2 * v);
  const double dT = grid.max_gap();
  const double l_lo = std::log10(dT * dT), l_hi = std::log10(grid.length() * grid.length());
  const int G = std::max(cfg.grid_size, 2);
  const double s_step = (s_hi - s_lo) / (G - 1), l_step = (l_hi - l_lo) / (G - 1);

  auto eval = [&](double ls, double ll) {
    GpHyper h;
    h.theta_sigma = std::pow(10.0, ls);
    h.theta_l = std::pow(10.0, ll);
    try {
      return marginal_loglik(mu_hat, noise, grid, h);
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  std::vector<double> values(static_cast<std::size_t>(G * G));
  parallel_for(values.size(), cfg.threads, [&](std::size_t k) {
    const int i = static_cast<int>(k) / G, j = static_cast<int>(k) % G;
    values[k] = eval(s_lo + i * s_step, l_lo + j * l_step);
  });
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k)
    if (values[k] > values[best]) best = k;
  double ls = s_lo + static_cast<int>(best) / G * s_step;
  double ll = l_lo + static_cast<int>(best) % G * l_step;
  double fbest = values[best];
  if (!std::isfinite(fbest)) throw Error("marginal likelihood could not be evaluated anywhere on the search grid");

  double step_s = s_step, step_l = l_step;
  for (int r = 0; r < cfg.refinements; ++r) {
    bool moved_s = false, moved_l = false;
    for (double dir : {1.0, -1.0}) {
      const double cand = std::clamp(ls + dir * step_s, s_lo, s_hi);
      const double f = eval(cand, ll);
      if (f > fbest) {
        fbest = f;
        ls = cand;
        moved_s = true;
        break;
      }
    }
    for (double dir : {1.0, -1.0}) {
      const double cand = std::clamp(ll + dir * step_l, l_lo, l_hi);
      const double f = eval(ls, cand);
      if (f > fbest) {
        fbest = f;
        ll = cand;
        moved_l = true;
        break;
      }
    }
    if (!moved_s) step_s *= 0.5;
    if (!moved_l) step_l *= 0.5;
  }

  GpHyper h;
  h.theta_sigma = std::pow(10.0, ls);
  h.theta_l_mmle = std::pow(10.0, ll);
  h.theta_l = h.theta_l_mmle;
  h.loglik = fbest;
  const double edge = 1e-9;
  std::string boundary;
  if (ls <= s_lo + edge) boundary += " theta_sigma at lower bound;";
  if (ls >= s_hi - edge) boundary += " theta_sigma at upper bound;";
  if (ll <= l_lo + edge) boundary += " theta_l at lower bound;";
  if (ll >= l_hi - edge) boundary += " theta_l at upper bound;";
  if (!boundary.empty()) h.warning = "marginal-likelihood optimum on search boundary:" + boundary;

  const double factor = std::log(static_cast<double>(T));
  h.adjustment = cfg.adjustment;
  if (cfg.adjustment == LengthAdjustment::multiply) h.theta_l *= factor;
  if (cfg.adjustment == LengthAdjustment::divide) h.theta_l /= factor;
  h.adjusted = cfg.adjustment != LengthAdjustment::none;
  return h;
}

inline GpHyper fit_hyper(const Vector& mu_hat, const CouplingCovariance& cov, Eigen::Index n,
                         const SamplingGrid& grid, const GpSearchConfig& cfg = {}) {
  return fit_hyper(mu_hat, detail::noise_matrix(cov, n), grid, cfg);
}

/// Closed-form GP posterior of mu on eval_grid given mu_hat on the sampling grid.
inline GpPosterior posterior(const Vector& mu_hat, const Matrix& noise, const SamplingGrid& grid,
                             const GpHyper& hyper, const SamplingGrid& eval_grid) {
  for (double t : eval_grid.points()) {
    if (t < grid.front() || t > grid.back()) throw Error("GP evaluation grid leaves the sampling domain");
  }
  const Matrix A = detail::marginal_covariance(noise, grid, hyper);
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw Error("GP posterior: factorization failed");
  const Matrix Ks = kernel_matrix(eval_grid.points(), grid.points(), hyper);
  const Matrix Kss = kernel_matrix(eval_grid.points(), eval_grid.points(), hyper);
  GpPosterior post;
  post.mean = Ks * llt.solve(mu_hat);
  Matrix cov = symmetrize(Kss - Ks * llt.solve(Ks.transpose()));
  detail::add_jitter(cov);
  post.cov = cov;
  post.hyper = hyper;
  post.noise_cov_used = noise;
  post.eval_grid = eval_grid;
  return post;
}

inline GpPosterior posterior(const Vector& mu_hat, const CouplingCovariance& cov, Eigen::Index n,
                             const SamplingGrid& grid, const GpHyper& hyper, const SamplingGrid& eval_grid) {
  return posterior(mu_hat, detail::noise_matrix(cov, n), grid, hyper, eval_grid);
}

/// Simultaneous credible band mean -/+ q sd(t), q the (1 - alpha)-quantile of
/// max_t |draw(t) - mean(t)| / sd(t) over posterior draws.
inline BandResult credible_band(const GpPosterior& post, double alpha, std::size_t draws, std::uint64_t seed,
                                int threads = 1, double fold_threshold = default_fold_threshold()) {
  const Vector sd = post.cov.diagonal().cwiseMax(1e-300).cwiseSqrt();
  double shift = 0.0;
  auto sup = std::make_shared<const SupDraws>(standardized_sup_draws(post.cov, sd, draws, seed, threads, &shift));
  CurveEstimate est;
  est.method = Method::bayes_gp;
  est.eval_grid = post.eval_grid;
  est.values = post.mean;
  BandResult b = make_band(std::move(est), sd, std::move(sup), alpha, fold_threshold);
  b.psd_shift = shift;
  return b;
}

}  // namespace fqr

#endif  // FQR_BAYES_GP_HPP
