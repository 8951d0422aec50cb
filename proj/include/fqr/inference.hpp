#ifndef FQR_INFERENCE_HPP
#define FQR_INFERENCE_HPP

// Simultaneous inference for a curve estimate: Monte Carlo critical value of
// the standardized supremum, pointwise and joint bands, SimBaS scores and
// fold-change flags. Critical value and SimBaS share one set of draws, so a
// location has SimBaS <= alpha exactly when the 1 - alpha joint band
// excludes zero there.

#include "fqr/core.hpp"
#include "fqr/coupling_cov.hpp"
#include "fqr/interpolation.hpp"

#include <boost/math/distributions/normal.hpp>

#include <memory>
#include <random>

namespace fqr {

/// Default practical-significance cut: half of log2(1.5).
inline double default_fold_threshold() { return 0.5 * std::log2(1.5); }

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<>(), p);
}

/// Sorted Monte Carlo draws of a supremum statistic.
struct SupDraws {
  std::vector<double> sorted;
  std::uint64_t seed = 0;
  /// Largest m with m / N <= alpha, i.e. the number of draws allowed above C.
  std::size_t allowed_exceedances(double alpha) const {
    const std::size_t N = sorted.size();
    auto m = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(N)));
    while (m + 1 <= N && static_cast<double>(m + 1) / static_cast<double>(N) <= alpha) ++m;
    while (m > 0 && static_cast<double>(m) / static_cast<double>(N) > alpha) --m;
    return m;
  }
  /// Empirical (1 - alpha)-quantile: order statistic N - m (1-based).
  double quantile(double alpha) const {
    const std::size_t m = allowed_exceedances(alpha);
    if (m >= sorted.size()) throw Error("alpha too large for the number of Monte Carlo draws");
    return sorted[sorted.size() - m - 1];
  }
  /// Fraction of draws with statistic >= z.
  double exceedance(double z) const {
    const auto it = std::lower_bound(sorted.begin(), sorted.end(), z);
    return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
  }
};

struct BandResult {
  CurveEstimate estimate;
  /// Standard error of the estimate at each evaluation point.
  Vector scale;
  Vector pointwise_lo, pointwise_hi;
  Vector joint_lo, joint_hi;
  double c_n_alpha = 0.0;
  double z_alpha = 0.0;
  double alpha = 0.05;
  Vector simbas;
  std::vector<bool> excludes_zero;
  std::vector<bool> flags;
  std::size_t mc_draws = 0;
  std::uint64_t seed = 0;
  double psd_shift = 0.0;
  std::shared_ptr<const SupDraws> draws;
};

namespace detail {

/// Lower Cholesky factor after shifting the diagonal by |lambda_min| + 1e-10 lambda_max when needed.
inline Matrix repaired_cholesky(const Matrix& sigma, double* shift_out = nullptr) {
  const Matrix S = symmetrize(sigma);
  Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  const double hi = std::max(es.eigenvalues()(es.eigenvalues().size() - 1), 0.0);
  double shift = 0.0;
  if (lo <= 1e-12 * hi) shift = std::max(0.0, -lo) + 1e-10 * std::max(hi, 1e-300);
  if (shift_out) *shift_out = shift;
  Matrix shifted = S;
  shifted.diagonal().array() += shift;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) throw Error("Cholesky factorization failed after PSD repair");
  return llt.matrixL();
}

}  // namespace detail

/// Draws of max_l |G_l| / scale_l for G ~ MVN(0, sigma). Draws are generated in
/// fixed chunks with per-chunk substreams so the result is independent of the
/// worker count.
inline SupDraws standardized_sup_draws(const Matrix& sigma, const Vector& scale, std::size_t mc_draws,
                                       std::uint64_t seed, int threads = 1, double* psd_shift = nullptr) {
  const Eigen::Index T = sigma.rows();
  if (scale.size() != T) throw Error("standardizing scale length does not match covariance");
  if (!(scale.array() > 0.0).all()) throw Error("standardizing scale must be strictly positive");
  const Matrix L = detail::repaired_cholesky(sigma, psd_shift);
  const Vector inv = scale.cwiseInverse();
  constexpr std::size_t chunk = 512;
  const std::size_t chunks = (mc_draws + chunk - 1) / chunk;
  SupDraws out;
  out.seed = seed;
  out.sorted.resize(mc_draws);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t count = std::min(chunk, mc_draws - begin);
    std::mt19937_64 rng(derive_seed(seed, c));
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix Z(T, static_cast<Eigen::Index>(count));
    for (Eigen::Index j = 0; j < Z.cols(); ++j)
      for (Eigen::Index i = 0; i < T; ++i) Z(i, j) = normal(rng);
    const Matrix G = L.triangularView<Eigen::Lower>() * Z;
    for (Eigen::Index j = 0; j < G.cols(); ++j) {
      out.sorted[begin + static_cast<std::size_t>(j)] = (G.col(j).cwiseAbs().cwiseProduct(inv)).maxCoeff();
    }
  });
  std::sort(out.sorted.begin(), out.sorted.end());
  return out;
}

inline SupDraws coupling_sup_draws(const CouplingCovariance& cov, std::size_t mc_draws, std::uint64_t seed,
                                   int threads = 1, double* psd_shift = nullptr) {
  return standardized_sup_draws(cov.sigma, cov.sigma_marginal, mc_draws, seed, threads, psd_shift);
}

/// C_n(alpha): (1 - alpha)-quantile of sup_l |G_l / sigma_n(t_l)|, G ~ MVN(0, Sigma).
inline double critical_value(const CouplingCovariance& cov, double alpha, std::size_t mc_draws, std::uint64_t seed,
                             int threads = 1) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0,1)");
  if (mc_draws < 1000) throw Error("at least 1000 Monte Carlo draws are required");
  return coupling_sup_draws(cov, mc_draws, seed, threads).quantile(alpha);
}

/// Assembles bands, SimBaS and zero-exclusion from an estimate, its standard
/// error and shared supremum draws.
inline BandResult make_band(CurveEstimate estimate, Vector scale, std::shared_ptr<const SupDraws> draws,
                            double alpha, double fold_threshold = default_fold_threshold()) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0,1)");
  const Eigen::Index T = estimate.values.size();
  if (scale.size() != T) throw Error("band scale length does not match estimate");
  BandResult b;
  b.alpha = alpha;
  b.c_n_alpha = draws->quantile(alpha);
  b.z_alpha = normal_quantile(1.0 - alpha / 2.0);
  b.mc_draws = draws->sorted.size();
  b.seed = draws->seed;
  const Vector& est = estimate.values;
  b.pointwise_lo = est - b.z_alpha * scale;
  b.pointwise_hi = est + b.z_alpha * scale;
  b.joint_lo = est - b.c_n_alpha * scale;
  b.joint_hi = est + b.c_n_alpha * scale;
  b.simbas.resize(T);
  b.excludes_zero.resize(static_cast<std::size_t>(T));
  for (Eigen::Index l = 0; l < T; ++l) {
    const double z = std::abs(est(l)) / scale(l);
    b.simbas(l) = draws->exceedance(z);
    b.excludes_zero[static_cast<std::size_t>(l)] = z > b.c_n_alpha;
  }
  b.scale = std::move(scale);
  b.estimate = std::move(estimate);
  b.draws = std::move(draws);
  b.flags.assign(static_cast<std::size_t>(T), false);
  for (Eigen::Index l = 0; l < T; ++l) {
    b.flags[static_cast<std::size_t>(l)] =
        b.excludes_zero[static_cast<std::size_t>(l)] && std::abs(b.estimate.values(l)) > fold_threshold;
  }
  return b;
}

/// Joint band est -/+ C_n(alpha) sigma_n / sqrt(n) and pointwise band with
/// z_{1-alpha/2}, on the sampling grid.
inline BandResult simultaneous_band(const Vector& est_values, const CouplingCovariance& cov, Eigen::Index n,
                                    double alpha, std::size_t mc_draws, std::uint64_t seed, int threads = 1) {
  if (est_values.size() != cov.T()) throw Error("estimate length does not match covariance");
  if (mc_draws < 1000) throw Error("at least 1000 Monte Carlo draws are required");
  double shift = 0.0;
  auto draws = std::make_shared<const SupDraws>(coupling_sup_draws(cov, mc_draws, seed, threads, &shift));
  CurveEstimate est;
  est.values = est_values;
  est.tau = cov.tau;
  est.contrast = cov.contrast;
  BandResult b = make_band(std::move(est), cov.sigma_marginal / std::sqrt(static_cast<double>(n)), draws, alpha);
  b.psd_shift = shift;
  return b;
}

/// SimBaS: fraction of supremum draws at or above sqrt(n) |est_l| / sigma_n(t_l).
inline Vector simbas(const Vector& est_values, const CouplingCovariance& cov, Eigen::Index n, std::size_t mc_draws,
                     std::uint64_t seed, int threads = 1) {
  const SupDraws draws = coupling_sup_draws(cov, mc_draws, seed, threads);
  Vector out(est_values.size());
  for (Eigen::Index l = 0; l < est_values.size(); ++l) {
    out(l) = draws.exceedance(std::sqrt(static_cast<double>(n)) * std::abs(est_values(l)) / cov.sigma_marginal(l));
  }
  return out;
}

inline std::vector<bool> flag_locations(const BandResult& band, double fold_threshold = default_fold_threshold()) {
  const Vector& est = band.estimate.values;
  std::vector<bool> flags(static_cast<std::size_t>(est.size()));
  for (Eigen::Index l = 0; l < est.size(); ++l) {
    const bool excludes = band.joint_lo(l) > 0.0 || band.joint_hi(l) < 0.0;
    flags[static_cast<std::size_t>(l)] = excludes && std::abs(est(l)) > fold_threshold;
  }
  return flags;
}

/// Re-expresses a node band on a finer grid: estimate and standard error are
/// linearly interpolated, SimBaS recomputed from the same draws.
inline BandResult interpolate_band(const BandResult& nodes, const SamplingGrid& grid, const SamplingGrid& eval_grid,
                                   double fold_threshold = default_fold_threshold()) {
  CurveEstimate est = nodes.estimate;
  est.values = linear_interpolate(grid, nodes.estimate.values, eval_grid.points());
  est.eval_grid = eval_grid;
  Vector scale = linear_interpolate(grid, nodes.scale, eval_grid.points());
  BandResult b = make_band(std::move(est), std::move(scale), nodes.draws, nodes.alpha, fold_threshold);
  b.psd_shift = nodes.psd_shift;
  return b;
}

}  // namespace fqr

#endif  // FQR_INFERENCE_HPP
