#ifndef FQR_PIPELINE_HPP
#define FQR_PIPELINE_HPP

// End-to-end analysis for one dataset: pointwise fits per quantile level,
// coupling covariance per contrast, curve estimate, bands, SimBaS and flags.

#include "fqr/bayes_gp.hpp"
#include "fqr/coupling_cov.hpp"
#include "fqr/dataset.hpp"
#include "fqr/inference.hpp"
#include "fqr/interpolation.hpp"
#include "fqr/qr_pointwise.hpp"

#include <chrono>
#include <optional>
#include <string>
#include <vector>

namespace fqr {

struct AnalysisConfig {
  Method method = Method::li;
  double alpha = 0.05;
  std::size_t mc_draws = 10000;
  bool wavelet_smooth = true;
  DiagonalMode diagonal_mode = DiagonalMode::analytic;
  double fold_threshold = default_fold_threshold();
  std::uint64_t seed = 20240601;
  int threads = 1;
  int eval_refine = 4;
  /// Replaces the refined sampling grid as output grid when set.
  std::optional<SamplingGrid> eval_grid;
  SolverConfig solver;
  PresmoothConfig presmooth;
  GpSearchConfig gp;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0,1)");
    if (mc_draws < 1000) throw Error("at least 1000 Monte Carlo draws are required");
    if (eval_refine < 1) throw Error("eval refinement factor must be >= 1");
    if (!(fold_threshold >= 0.0)) throw Error("fold threshold must be non-negative");
    solver.validate();
  }
};

struct CurveResult {
  double tau = 0.5;
  Vector contrast;
  std::size_t tau_index = 0;
  std::size_t contrast_index = 0;
  Method method = Method::li;
  SamplingGrid grid{{0.0, 1.0}};
  BandResult nodes;  // on the sampling grid
  BandResult curve;  // on the evaluation grid
  CouplingCovariance sigma_raw;
  CouplingCovariance sigma_used;
  std::optional<GpHyper> gp;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

struct AnalysisOutput {
  std::vector<CurveResult> curves;
  std::vector<std::string> warnings;
  double fit_seconds = 0.0;
  double total_seconds = 0.0;
};

/// Prefixes errors with the pipeline stage that raised them.
template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw Error(stage + ": " + e.what());
  }
}

inline std::uint64_t mcmc_seed(std::uint64_t seed, std::size_t tau_index) { return derive_seed(seed, 0x4d43, tau_index); }

inline std::uint64_t band_seed(std::uint64_t seed, std::size_t tau_index, std::size_t contrast_index) {
  return derive_seed(seed, 0x4243, (static_cast<std::uint64_t>(tau_index) << 20) + contrast_index);
}

/// The data the pointwise fits run on: presmoothed responses for presmooth-li.
inline FunctionalDataset working_dataset(const FunctionalDataset& ds, const AnalysisConfig& cfg) {
  if (cfg.method != Method::presmooth_li) return ds;
  PresmoothConfig p = cfg.presmooth;
  p.threads = cfg.threads;
  return run_stage("presmooth", [&] { return presmooth_dataset(ds, p); });
}

inline std::vector<PointwiseFit> fit_quantile_level(const FunctionalDataset& ds, QuantileLevel tau, std::size_t tau_index,
                                                    const AnalysisConfig& cfg) {
  SolverConfig solver = cfg.solver;
  solver.mcmc.seed = mcmc_seed(cfg.seed, tau_index);
  return run_stage("pointwise fit (tau=" + std::to_string(tau.value()) + ")",
                   [&] { return fit_all_locations(ds, tau, solver, cfg.threads); });
}

/// Estimate, bands and SimBaS for one (tau, contrast) pair from existing fits.
inline CurveResult analyze_contrast(const FunctionalDataset& ds, const std::vector<PointwiseFit>& fits, QuantileLevel tau,
                                    const Contrast& contrast, std::size_t tau_index, std::size_t contrast_index,
                                    const AnalysisConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  CurveResult r;
  r.tau = tau.value();
  r.contrast = contrast.weights();
  r.tau_index = tau_index;
  r.contrast_index = contrast_index;
  r.method = cfg.method;
  r.grid = ds.grid();
  const SamplingGrid eval = cfg.eval_grid ? *cfg.eval_grid : ds.grid().refined(cfg.eval_refine);
  const std::uint64_t seed = band_seed(cfg.seed, tau_index, contrast_index);

  const Vector mu_hat = extract_contrast(fits, contrast);
  r.sigma_raw = run_stage("covariance", [&] { return assemble_sigma(ds, fits, tau, contrast, cfg.diagonal_mode); });
  r.sigma_used = cfg.wavelet_smooth ? wavelet_smooth(r.sigma_raw) : r.sigma_raw;
  for (const auto& note : r.sigma_raw.notes) r.warnings.push_back(note);

  if (cfg.method == Method::bayes_gp) {
    const Matrix noise = symmetrize(r.sigma_used.sigma / static_cast<double>(ds.n()));
    GpSearchConfig gcfg = cfg.gp;
    gcfg.threads = cfg.threads;
    const GpHyper hyper = run_stage("gp hyperparameters", [&] { return fit_hyper(mu_hat, noise, ds.grid(), gcfg); });
    if (hyper.warning) r.warnings.push_back(*hyper.warning);
    r.gp = hyper;
    run_stage("gp posterior", [&] {
      const GpPosterior at_nodes = posterior(mu_hat, noise, ds.grid(), hyper, ds.grid());
      r.nodes = credible_band(at_nodes, cfg.alpha, cfg.mc_draws, seed, cfg.threads, cfg.fold_threshold);
      if (eval == ds.grid()) {
        r.curve = r.nodes;
      } else {
        const GpPosterior at_eval = posterior(mu_hat, noise, ds.grid(), hyper, eval);
        r.curve = credible_band(at_eval, cfg.alpha, cfg.mc_draws, derive_seed(seed, 1), cfg.threads, cfg.fold_threshold);
      }
      return 0;
    });
  } else {
    run_stage("bands", [&] {
      // the band is standardized by sigma_n, so the smoothed matrix keeps its
      // correlation but gets sigma_n^2 back on the diagonal
      const CouplingCovariance band_cov = r.sigma_used.smoothed ? rescale_to_marginal(r.sigma_used) : r.sigma_used;
      double shift = 0.0;
      auto draws =
          std::make_shared<const SupDraws>(coupling_sup_draws(band_cov, cfg.mc_draws, seed, cfg.threads, &shift));
      CurveEstimate est;
      est.method = cfg.method;
      est.eval_grid = ds.grid();
      est.values = mu_hat;
      est.tau = tau.value();
      est.contrast = contrast.weights();
      const Vector scale = r.sigma_used.sigma_marginal / std::sqrt(static_cast<double>(ds.n()));
      r.nodes = make_band(est, scale, draws, cfg.alpha, cfg.fold_threshold);
      r.nodes.psd_shift = shift;
      if (cfg.method == Method::spline2) {
        CurveEstimate fine = est;
        fine.eval_grid = eval;
        fine.values = spline_interpolate(ds.grid(), mu_hat, 2, eval.points());
        Vector fine_scale = linear_interpolate(ds.grid(), scale, eval.points());
        r.curve = make_band(std::move(fine), std::move(fine_scale), draws, cfg.alpha, cfg.fold_threshold);
        r.curve.psd_shift = shift;
      } else {
        r.curve = interpolate_band(r.nodes, ds.grid(), eval, cfg.fold_threshold);
      }
      return 0;
    });
    if (r.nodes.psd_shift > 0.0) {
      r.warnings.push_back("covariance repaired before factorization; diagonal shift " +
                           std::to_string(r.nodes.psd_shift));
    }
  }
  for (BandResult* b : {&r.nodes, &r.curve}) {
    b->estimate.tau = tau.value();
    b->estimate.contrast = contrast.weights();
    b->estimate.method = cfg.method;
  }
  r.curve.estimate.eval_grid = eval;
  r.nodes.estimate.eval_grid = ds.grid();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// True when every location satisfies simbas <= alpha iff the joint band excludes 0.
inline bool duality_holds(const BandResult& b) {
  for (Eigen::Index l = 0; l < b.simbas.size(); ++l) {
    const bool excludes = b.joint_lo(l) > 0.0 || b.joint_hi(l) < 0.0;
    if ((b.simbas(l) <= b.alpha) != excludes) return false;
  }
  return true;
}

inline std::optional<std::string> density_warning(const FunctionalDataset& ds) {
  if (static_cast<double>(ds.T()) < std::sqrt(static_cast<double>(ds.n()))) {
    return "sampling grid is sparse: T = " + std::to_string(ds.T()) + " < sqrt(n) = " +
           std::to_string(std::sqrt(static_cast<double>(ds.n()))) + "; band validity needs T >> sqrt(n)";
  }
  return std::nullopt;
}

inline AnalysisOutput run_analyze(const FunctionalDataset& ds, const std::vector<QuantileLevel>& taus,
                                  const std::vector<Contrast>& contrasts, const AnalysisConfig& cfg) {
  cfg.validate();
  if (taus.empty()) throw Error("at least one quantile level is required");
  if (contrasts.empty()) throw Error("at least one contrast is required");
  for (const auto& c : contrasts) {
    if (c.size() != ds.d()) {
      throw Error("contrast length " + std::to_string(c.size()) + " does not match design columns " +
                  std::to_string(ds.d()));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  AnalysisOutput out;
  if (auto w = density_warning(ds)) out.warnings.push_back(*w);
  const FunctionalDataset work = working_dataset(ds, cfg);
  for (std::size_t k = 0; k < taus.size(); ++k) {
    const auto fit_start = std::chrono::steady_clock::now();
    const auto fits = fit_quantile_level(work, taus[k], k, cfg);
    out.fit_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - fit_start).count();
    for (std::size_t c = 0; c < contrasts.size(); ++c) {
      out.curves.push_back(analyze_contrast(work, fits, taus[k], contrasts[c], k, c, cfg));
    }
  }
  out.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace fqr

#endif  // FQR_PIPELINE_HPP
