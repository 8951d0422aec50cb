#ifndef FQR_COUPLING_COV_HPP
#define FQR_COUPLING_COV_HPP

// Covariance of the Gaussian process coupling sqrt(n)(mu_hat - mu) on the
// sampling grid for a contrast a, built from the pointwise fits.

#include "fqr/core.hpp"
#include "fqr/dataset.hpp"
#include "fqr/qr_pointwise.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fqr {

enum class DiagonalMode { empirical, analytic };

inline std::string to_string(DiagonalMode m) { return m == DiagonalMode::empirical ? "empirical" : "analytic"; }

inline DiagonalMode parse_diagonal_mode(const std::string& s) {
  if (s == "empirical") return DiagonalMode::empirical;
  if (s == "analytic") return DiagonalMode::analytic;
  throw Error("unknown diagonal mode '" + s + "' (expected empirical or analytic)");
}

struct CouplingCovariance {
  Matrix sigma;           // T x T
  Vector sigma_marginal;  // sigma_n(t_l), analytic
  Vector contrast;
  double tau = 0.5;
  Eigen::Index n = 0;
  bool smoothed = false;
  /// Diagonal shift added to restore positive semidefiniteness (0 if none).
  double psd_shift = 0.0;
  std::vector<std::string> notes;

  Eigen::Index T() const { return sigma.rows(); }
};

/// J_tau(t_l)^{-1} estimated as n * V_hat, symmetrised.
inline Matrix j_inverse(const PointwiseFit& fit, Eigen::Index n) {
  return symmetrize(static_cast<double>(n) * fit.v_hat);
}

namespace detail {

inline double indicator_tolerance(double y) { return 1e-10 * (1.0 + std::abs(y)); }

/// Rows i: z_i(t_l) = a' J_l^{-1} X_i (1{Y_i(t_l) <= X_i' beta_l} - tau).
inline Matrix influence_scores(const FunctionalDataset& ds, const std::vector<PointwiseFit>& fits, double tau,
                               const Contrast& contrast) {
  const Eigen::Index n = ds.n(), T = ds.T();
  if (static_cast<Eigen::Index>(fits.size()) != T) throw Error("need one pointwise fit per grid location");
  if (contrast.size() != ds.d()) throw Error("contrast length does not match design columns");
  Matrix Z(n, T);
  const Matrix& X = ds.design();
  for (Eigen::Index l = 0; l < T; ++l) {
    const Vector w = j_inverse(fits[static_cast<std::size_t>(l)], n) * contrast.weights();
    const Vector proj = X * w;
    const Vector fitted = X * fits[static_cast<std::size_t>(l)].beta_hat;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = ds.responses()(i, l);
      const double ind = y - fitted(i) <= indicator_tolerance(y) ? 1.0 : 0.0;
      Z(i, l) = proj(i) * (ind - tau);
    }
  }
  return Z;
}

inline Vector analytic_marginal(const FunctionalDataset& ds, const std::vector<PointwiseFit>& fits, double tau,
                                const Contrast& contrast) {
  const Eigen::Index n = ds.n(), T = ds.T();
  const Matrix gram = ds.design().transpose() * ds.design() / static_cast<double>(n);
  Vector out(T);
  for (Eigen::Index l = 0; l < T; ++l) {
    const Vector w = j_inverse(fits[static_cast<std::size_t>(l)], n) * contrast.weights();
    const double var = tau * (1.0 - tau) * w.dot(gram * w);
    if (!(var > 0.0) || !std::isfinite(var)) {
      throw Error("non-positive marginal variance at location " + std::to_string(l));
    }
    out(l) = std::sqrt(var);
  }
  return out;
}

}  // namespace detail

/// a' J_l^{-1} [ (1/n) sum_i X_i X_i' e_il e_ij ] J_j^{-1} a with
/// e_il = 1{Y_i(t_l) <= X_i' beta_hat(t_l)} - tau.
inline double cross_moment(const FunctionalDataset& ds, const std::vector<PointwiseFit>& fits, Eigen::Index l,
                           Eigen::Index j, QuantileLevel tau, const Contrast& contrast) {
  const Eigen::Index n = ds.n();
  const Matrix& X = ds.design();
  auto scores = [&](Eigen::Index loc) {
    const auto& fit = fits.at(static_cast<std::size_t>(loc));
    const Vector proj = X * (j_inverse(fit, n) * contrast.weights());
    const Vector fitted = X * fit.beta_hat;
    Vector z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = ds.responses()(i, loc);
      z(i) = proj(i) * ((y - fitted(i) <= detail::indicator_tolerance(y) ? 1.0 : 0.0) - tau.value());
    }
    return z;
  };
  return scores(l).dot(scores(j)) / static_cast<double>(n);
}

/// Full T x T coupling covariance. Empirical mode is the Gram matrix of the
/// influence scores (PSD by construction); analytic mode replaces its diagonal
/// by sigma_n(t_l)^2 and shifts the diagonal if that breaks PSD.
inline CouplingCovariance assemble_sigma(const FunctionalDataset& ds, const std::vector<PointwiseFit>& fits,
                                         QuantileLevel tau, const Contrast& contrast,
                                         DiagonalMode mode = DiagonalMode::analytic) {
  const Matrix Z = detail::influence_scores(ds, fits, tau.value(), contrast);
  CouplingCovariance cov;
  cov.n = ds.n();
  cov.tau = tau.value();
  cov.contrast = contrast.weights();
  cov.sigma = symmetrize(Z.transpose() * Z / static_cast<double>(ds.n()));
  cov.sigma_marginal = detail::analytic_marginal(ds, fits, tau.value(), contrast);
  if (mode == DiagonalMode::analytic) {
    cov.sigma.diagonal() = cov.sigma_marginal.array().square().matrix();
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov.sigma, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()(0), hi = es.eigenvalues()(es.eigenvalues().size() - 1);
    if (lo < -1e-8 * std::max(hi, 0.0)) {
      cov.psd_shift = -lo + 1e-10 * std::max(hi, 1.0);
      cov.sigma.diagonal().array() += cov.psd_shift;
      cov.notes.push_back("analytic diagonal broke PSD; diagonal shifted by " + std::to_string(cov.psd_shift));
    }
  }
  return cov;
}

namespace wavelet {

inline Eigen::Index next_power_of_two(Eigen::Index T) {
  Eigen::Index p = 1;
  while (p < T) p <<= 1;
  return p;
}

/// One periodic Daubechies-4 analysis step on the leading `len` entries.
inline void d4_step(Vector& x, Eigen::Index len) {
  static const double s3 = std::sqrt(3.0);
  static const double norm = 4.0 * std::sqrt(2.0);
  static const double h[4] = {(1 + s3) / norm, (3 + s3) / norm, (3 - s3) / norm, (1 - s3) / norm};
  static const double g[4] = {h[3], -h[2], h[1], -h[0]};
  const Eigen::Index half = len / 2;
  Vector out(len);
  for (Eigen::Index i = 0; i < half; ++i) {
    double a = 0.0, d = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double v = x((2 * i + k) % len);
      a += h[k] * v;
      d += g[k] * v;
    }
    out(i) = a;
    out(half + i) = d;
  }
  x.head(len) = out;
}

/// Orthonormal full-depth periodic D4 transform as a P x P matrix (P = 2^k).
inline Matrix d4_matrix(Eigen::Index P) {
  if (P < 1 || (P & (P - 1)) != 0) throw Error("wavelet size must be a power of two");
  Matrix W(P, P);
  for (Eigen::Index c = 0; c < P; ++c) {
    Vector x = Vector::Unit(P, c);
    for (Eigen::Index len = P; len >= 2; len /= 2) d4_step(x, len);
    W.col(c) = x;
  }
  return W;
}

}  // namespace wavelet

/// Wavelet-domain diagonal smoothing: pad by symmetric reflection to a power
/// of two, keep only diag(W Sigma W'), transform back and crop.
inline CouplingCovariance wavelet_smooth(const CouplingCovariance& cov) {
  const Eigen::Index T = cov.T();
  const Eigen::Index P = wavelet::next_power_of_two(T);
  std::vector<Eigen::Index> src(static_cast<std::size_t>(P));
  for (Eigen::Index i = 0; i < P; ++i) src[static_cast<std::size_t>(i)] = i < T ? i : 2 * T - 1 - i;
  Matrix padded(P, P);
  for (Eigen::Index i = 0; i < P; ++i)
    for (Eigen::Index j = 0; j < P; ++j) padded(i, j) = cov.sigma(src[i], src[j]);
  const Matrix W = wavelet::d4_matrix(P);
  const Vector energy = (W * padded * W.transpose()).diagonal();
  const Matrix back = W.transpose() * energy.asDiagonal() * W;
  CouplingCovariance out = cov;
  out.sigma = symmetrize(back.topLeftCorner(T, T));
  out.smoothed = true;
  return out;
}

/// Congruence rescaling that keeps the correlation structure of cov.sigma and
/// puts sigma_marginal^2 back on the diagonal. Applied after smoothing so the
/// band's standardized process has unit marginal variance.
inline CouplingCovariance rescale_to_marginal(const CouplingCovariance& cov) {
  const Vector diag = cov.sigma.diagonal();
  for (Eigen::Index l = 0; l < diag.size(); ++l) {
    if (!(diag(l) > 0.0)) throw Error("cannot rescale covariance: non-positive variance at location " + std::to_string(l));
  }
  const Vector r = cov.sigma_marginal.cwiseQuotient(diag.cwiseSqrt());
  CouplingCovariance out = cov;
  out.sigma = symmetrize(r.asDiagonal() * cov.sigma * r.asDiagonal());
  return out;
}

inline void dump_sigma_csv(const CouplingCovariance& cov, const std::string& path) {
  csv::write_matrix(path, cov.sigma);
}

}  // namespace fqr

#endif  // FQR_COUPLING_COV_HPP
