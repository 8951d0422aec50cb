#ifndef FQR_SIMLAB_HPP
#define FQR_SIMLAB_HPP

// Simulation laboratory: the continuous-predictor and binary-predictor peak
// scenarios, their true quantile coefficient curves, per-replicate metrics and
// replicate studies over methods and quantile levels.

#include "fqr/pipeline.hpp"

#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace fqr {

enum class ScenarioKind { continuous, binary };

/// Distribution of a peak magnitude c_{i,k}.
struct PeakDistribution {
  enum class Kind { normal, inverse_gamma, scaled_t };
  Kind kind = Kind::normal;
  double a = 0.0;  // normal: mean; inverse_gamma: shape; scaled_t: df
  double b = 1.0;  // normal: sd;   inverse_gamma: scale; scaled_t: scale
  double shift = 0.0;

  static PeakDistribution normal(double mean, double sd) { return {Kind::normal, mean, sd, 0.0}; }
  static PeakDistribution inverse_gamma(double shape, double scale, double shift) {
    return {Kind::inverse_gamma, shape, scale, shift};
  }
  static PeakDistribution scaled_t(double df, double scale, double shift) { return {Kind::scaled_t, df, scale, shift}; }

  bool gaussian() const { return kind == Kind::normal; }

  template <class Rng>
  double sample(Rng& rng) const {
    switch (kind) {
      case Kind::normal: return std::normal_distribution<double>(a, b)(rng);
      case Kind::inverse_gamma: return shift + b / std::gamma_distribution<double>(a, 1.0)(rng);
      case Kind::scaled_t: return shift + b * std::student_t_distribution<double>(a)(rng);
    }
    return 0.0;
  }

  /// Quantile at u, taking q = 1 - u to keep precision in the upper tail.
  double quantile(double u, double q) const {
    namespace bm = boost::math;
    switch (kind) {
      case Kind::normal: {
        const bm::normal_distribution<> d(a, b);
        return u <= 0.5 ? bm::quantile(d, u) : bm::quantile(bm::complement(d, q));
      }
      case Kind::inverse_gamma: {
        const bm::inverse_gamma_distribution<> d(a, b);
        return shift + (u <= 0.5 ? bm::quantile(d, u) : bm::quantile(bm::complement(d, q)));
      }
      case Kind::scaled_t: {
        const bm::students_t_distribution<> d(a);
        return shift + b * (u <= 0.5 ? bm::quantile(d, u) : bm::quantile(bm::complement(d, q)));
      }
    }
    return 0.0;
  }

  std::string describe() const {
    std::ostringstream s;
    switch (kind) {
      case Kind::normal: s << "N(" << a << "," << b << "^2)"; break;
      case Kind::inverse_gamma: s << "IG(" << a << "," << b << ")+" << shift; break;
      case Kind::scaled_t: s << b << "*t" << a << "+" << shift; break;
    }
    return s.str();
  }
};

struct ContinuousPeak {
  double c, mu, sigma;
};

struct BinaryPeak {
  int id;  // 1-based peak number
  double mu, sigma;
  PeakDistribution group_minus;  // x1 = -1
  PeakDistribution group_plus;   // x1 = +1
};

struct SimScenario {
  ScenarioKind kind = ScenarioKind::continuous;
  std::string name;
  Eigen::Index n = 400;
  Eigen::Index T = 128;
  double lo = 0.0, hi = 5.10;
  int replicates = 100;
  double rho = 0.5;         // lag-1 autocorrelation of the noise
  bool t_marginal = true;   // t_df marginal via Gaussian copula, else Gaussian
  double t_df = 3.0;
  double noise_sd = 1.0;    // Gaussian marginal only
  double latent_rho = 0.5;  // copula correlation giving lag-1 correlation rho
  std::vector<ContinuousPeak> continuous_peaks;
  std::vector<BinaryPeak> binary_peaks;

  SamplingGrid grid() const { return SamplingGrid::equally_spaced(lo, hi, static_cast<std::size_t>(T)); }
  Eigen::Index d() const { return kind == ScenarioKind::continuous ? 3 : 2; }
  /// Coefficients reported by studies (slopes only).
  std::vector<Eigen::Index> coefficients() const {
    return kind == ScenarioKind::continuous ? std::vector<Eigen::Index>{1, 2} : std::vector<Eigen::Index>{1};
  }

  void validate() const {
    if (!(rho > -1.0 && rho < 1.0) || !(latent_rho > -1.0 && latent_rho < 1.0)) {
      throw Error("AR(1) correlation must lie in (-1,1)");
    }
    if (T < 2) throw Error("scenario needs T >= 2");
    if (n < d() + 1) throw Error("scenario needs n > " + std::to_string(d()));
    if (replicates < 1) throw Error("scenario needs at least one replicate");
    if (!(hi > lo)) throw Error("scenario domain is empty");
    for (const auto& p : continuous_peaks)
      if (!(p.sigma > 0.0)) throw Error("peak width must be positive");
    for (const auto& p : binary_peaks)
      if (!(p.sigma > 0.0)) throw Error("peak width must be positive");
  }
};

/// Lag-1 correlation of the latent Gaussian AR(1) whose t3-transformed
/// process has lag-1 correlation 0.5; from two-dimensional numerical
/// integration of E[Q(Phi(Z1)) Q(Phi(Z2))].
inline constexpr double kT3LatentRho = 0.5719409108050126;

inline SimScenario continuous_scenario() {
  SimScenario s;
  s.kind = ScenarioKind::continuous;
  s.name = "continuous";
  s.n = 400;
  s.T = 128;
  s.lo = 0.0;
  s.hi = 5.10;
  s.rho = 0.5;
  s.t_marginal = true;
  s.t_df = 3.0;
  s.latent_rho = kT3LatentRho;
  s.continuous_peaks = {{0.75, 1.0, 0.2}, {1.0, 3.0, 0.4}};
  return s;
}

inline SimScenario binary_scenario() {
  SimScenario s;
  s.kind = ScenarioKind::binary;
  s.name = "binary";
  s.n = 500;
  s.T = 256;
  s.lo = 0.0;
  s.hi = 8.0;
  s.rho = 0.8;
  s.latent_rho = 0.8;
  s.t_marginal = false;
  s.noise_sd = 4.0;
  using D = PeakDistribution;
  s.binary_peaks = {
      {1, 1.0, 0.25, D::normal(18.5, 1.0), D::normal(20.0, 1.0)},
      {2, 3.0, 0.25, D::inverse_gamma(1.0, 0.4, 20.0), D::normal(20.25, 0.5)},
      {3, 5.0, 0.25, D::normal(20.0, 2.0), D::normal(20.0, 2.0)},
      {4, 7.0, 0.25, D::normal(20.0, 1.0), D::scaled_t(2.0, 2.5, 20.0)},
  };
  return s;
}

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"continuous", "binary"};
  return names;
}

inline SimScenario scenario_by_name(const std::string& name) {
  if (name == "continuous") return continuous_scenario();
  if (name == "binary") return binary_scenario();
  std::string valid;
  for (const auto& v : scenario_names()) valid += (valid.empty() ? "" : ", ") + v;
  throw Error("unknown scenario '" + name + "' (valid: " + valid + ")");
}

struct ScenarioOverrides {
  std::optional<Eigen::Index> n;
  std::optional<Eigen::Index> T;
  std::optional<int> replicates;
  /// Binary scenario: remove the peaks with a non-Gaussian magnitude (2 and 4).
  bool drop_non_gaussian_peaks = false;
};

inline SimScenario apply_overrides(SimScenario s, const ScenarioOverrides& o) {
  if (o.n) s.n = *o.n;
  if (o.T) s.T = *o.T;
  if (o.replicates) s.replicates = *o.replicates;
  if (o.drop_non_gaussian_peaks) {
    if (s.kind != ScenarioKind::binary) throw Error("peak dropping applies to the binary scenario only");
    std::erase_if(s.binary_peaks,
                  [](const BinaryPeak& p) { return !p.group_minus.gaussian() || !p.group_plus.gaussian(); });
    s.name += "-gaussian-peaks";
  }
  s.validate();
  return s;
}

inline double normal_pdf(double t, double mu, double sigma) {
  const double z = (t - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

/// n x T noise: stationary AR(1) Gaussian, optionally mapped to a t marginal.
template <class Rng>
Matrix ar1_noise(const SimScenario& s, Eigen::Index rows, Rng& rng) {
  std::normal_distribution<double> z;
  const double r = s.latent_rho, innov = std::sqrt(1.0 - r * r);
  const boost::math::students_t_distribution<> tdist(s.t_df);
  const boost::math::normal_distribution<> std_normal;
  Matrix out(rows, s.T);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double prev = z(rng);
    for (Eigen::Index l = 0; l < s.T; ++l) {
      const double g = l == 0 ? prev : r * prev + innov * z(rng);
      prev = g;
      if (s.t_marginal) {
        // upper tail through the complement for precision; symmetric marginal
        const double p = boost::math::cdf(std_normal, -std::abs(g));
        const double v = -boost::math::quantile(tdist, p);
        out(i, l) = g >= 0.0 ? v : -v;
      } else {
        out(i, l) = s.noise_sd * g;
      }
    }
  }
  return out;
}

class TruthFunctions;

struct SimDataset {
  FunctionalDataset data;
  SimScenario scenario;
};

inline SimDataset gen_continuous(const SimScenario& s, std::uint64_t seed) {
  if (s.kind != ScenarioKind::continuous) throw Error("gen_continuous needs a continuous scenario");
  s.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  const SamplingGrid grid = s.grid();
  Matrix X(s.n, 3);
  for (Eigen::Index i = 0; i < s.n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = z(rng);
    X(i, 2) = z(rng);
  }
  Matrix Y = ar1_noise(s, s.n, rng);
  for (std::size_t k = 0; k < s.continuous_peaks.size(); ++k) {
    const auto& p = s.continuous_peaks[k];
    const Eigen::Index col = static_cast<Eigen::Index>(std::min<std::size_t>(k + 1, 2));
    for (Eigen::Index l = 0; l < s.T; ++l) {
      const double shape = p.c * normal_pdf(grid[l], p.mu, p.sigma);
      Y.col(l) += shape * X.col(col);
    }
  }
  return {FunctionalDataset(std::move(Y), std::move(X), grid), s};
}

inline SimDataset gen_binary(const SimScenario& s, std::uint64_t seed) {
  if (s.kind != ScenarioKind::binary) throw Error("gen_binary needs a binary scenario");
  s.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u;
  const SamplingGrid grid = s.grid();
  Matrix X(s.n, 2);
  Matrix C(s.n, static_cast<Eigen::Index>(s.binary_peaks.size()));
  for (Eigen::Index i = 0; i < s.n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = u(rng) < 0.5 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < s.binary_peaks.size(); ++k) {
      const auto& p = s.binary_peaks[k];
      C(i, static_cast<Eigen::Index>(k)) = (X(i, 1) < 0 ? p.group_minus : p.group_plus).sample(rng);
    }
  }
  Matrix Y = ar1_noise(s, s.n, rng);
  for (std::size_t k = 0; k < s.binary_peaks.size(); ++k) {
    const auto& p = s.binary_peaks[k];
    for (Eigen::Index l = 0; l < s.T; ++l) {
      Y.col(l) += normal_pdf(grid[l], p.mu, p.sigma) * C.col(static_cast<Eigen::Index>(k));
    }
  }
  return {FunctionalDataset(std::move(Y), std::move(X), grid), s};
}

inline SimDataset generate(const SimScenario& s, std::uint64_t seed) {
  return s.kind == ScenarioKind::continuous ? gen_continuous(s, seed) : gen_binary(s, seed);
}

namespace detail {

/// Tanh-sinh nodes and weights on (0,1), with the complements 1 - u kept
/// separately so that tail quantiles stay accurate.
struct UnitQuadrature {
  std::vector<double> u, q, w;

  UnitQuadrature(double h = 1.0 / 32.0, double range = 3.5) {
    const double half_pi = 0.5 * std::numbers::pi;
    for (double x = -range; x <= range + 1e-12; x += h) {
      const double s = half_pi * std::sinh(x);
      const double e = std::exp(-2.0 * std::abs(s));
      // u = (1 + tanh(s)) / 2 written through e = exp(-2|s|)
      const double small = e / (1.0 + e);
      const double weight = h * half_pi * std::cosh(x) * 4.0 * e / ((1.0 + e) * (1.0 + e)) * 0.5;
      if (small <= 0.0 || weight <= 0.0) continue;
      u.push_back(s < 0 ? small : 1.0 - small);
      q.push_back(s < 0 ? 1.0 - small : small);
      w.push_back(weight);
    }
  }
};

/// Law of one group's Y(t): N(mean, var) plus weight * c with c non-Gaussian (optional).
struct GroupLaw {
  double mean = 0.0, var = 0.0;
  double weight = 0.0;
  std::vector<double> c_nodes;  // quantiles of c at the quadrature nodes
};

inline double group_quantile(const GroupLaw& g, double tau, const UnitQuadrature& quad) {
  const double sd = std::sqrt(g.var);
  const double z = normal_quantile(tau);
  if (g.c_nodes.empty() || g.weight == 0.0) return g.mean + sd * z;
  auto cdf = [&](double y) {
    double total = 0.0;
    for (std::size_t k = 0; k < quad.w.size(); ++k) {
      total += quad.w[k] * 0.5 * std::erfc(-(y - g.mean - g.weight * g.c_nodes[k]) / (sd * std::numbers::sqrt2));
    }
    return total - tau;
  };
  // bracket around the Gaussian part shifted by the median contribution of c
  const double centre = g.mean + g.weight * g.c_nodes[g.c_nodes.size() / 2] + sd * z;
  double step = sd;
  double lo = centre - step, hi = centre + step;
  while (cdf(lo) > 0.0) lo -= (step *= 2.0);
  step = sd;
  while (cdf(hi) < 0.0) hi += (step *= 2.0);
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(cdf, lo, hi, boost::math::tools::eps_tolerance<double>(48), iters);
  return 0.5 * (r.first + r.second);
}

inline GroupLaw group_law(const SimScenario& s, double t, bool plus, const UnitQuadrature& quad) {
  GroupLaw g;
  g.var = s.noise_sd * s.noise_sd;
  int non_gaussian = 0;
  for (const auto& p : s.binary_peaks) {
    const double w = normal_pdf(t, p.mu, p.sigma);
    const PeakDistribution& d = plus ? p.group_plus : p.group_minus;
    if (d.gaussian()) {
      g.mean += w * d.a;
      g.var += w * w * d.b * d.b;
    } else if (w > 0.0) {
      if (++non_gaussian > 1) throw Error("exact truth supports one non-Gaussian peak magnitude per group");
      g.weight = w;
      g.c_nodes.resize(quad.u.size());
      for (std::size_t k = 0; k < quad.u.size(); ++k) g.c_nodes[k] = d.quantile(quad.u[k], quad.q[k]);
    }
  }
  return g;
}

}  // namespace detail

/// Group-wise tau-quantiles of Y(t) in the binary scenario. Gaussian peak
/// magnitudes and noise combine into one normal; the remaining non-Gaussian
/// magnitude is integrated by tanh-sinh quadrature and the quantile solved
/// by bracketing. Returns (q_minus, q_plus) per point.
inline std::pair<Vector, Vector> binary_group_quantiles(const SimScenario& s, double tau,
                                                        const std::vector<double>& t_grid) {
  if (s.kind != ScenarioKind::binary) throw Error("group quantiles need a binary scenario");
  QuantileLevel check(tau);
  static const detail::UnitQuadrature quad;
  Vector lo(static_cast<Eigen::Index>(t_grid.size())), hi(static_cast<Eigen::Index>(t_grid.size()));
  for (std::size_t k = 0; k < t_grid.size(); ++k) {
    lo(static_cast<Eigen::Index>(k)) = detail::group_quantile(detail::group_law(s, t_grid[k], false, quad), tau, quad);
    hi(static_cast<Eigen::Index>(k)) = detail::group_quantile(detail::group_law(s, t_grid[k], true, quad), tau, quad);
  }
  return {lo, hi};
}

/// Monte Carlo oracle for the binary group quantiles: `draws` samples per
/// group shared across all t (common random numbers).
inline std::pair<Vector, Vector> binary_group_quantiles_mc(const SimScenario& s, double tau,
                                                           const std::vector<double>& t_grid, std::size_t draws,
                                                           std::uint64_t seed) {
  if (s.kind != ScenarioKind::binary) throw Error("group quantiles need a binary scenario");
  QuantileLevel check(tau);
  const std::size_t K = s.binary_peaks.size();
  std::pair<Vector, Vector> out{Vector(static_cast<Eigen::Index>(t_grid.size())),
                                Vector(static_cast<Eigen::Index>(t_grid.size()))};
  for (int group = 0; group < 2; ++group) {
    // noise draws are shared by both groups so that differences cancel away from peaks
    std::mt19937_64 noise_rng(derive_seed(seed, 0));
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(group) + 1));
    std::normal_distribution<double> z(0.0, s.noise_sd);
    std::vector<double> eps(draws), c(draws * K);
    for (std::size_t j = 0; j < draws; ++j) {
      eps[j] = z(noise_rng);
      for (std::size_t k = 0; k < K; ++k) {
        const auto& p = s.binary_peaks[k];
        c[j * K + k] = (group == 0 ? p.group_minus : p.group_plus).sample(rng);
      }
    }
    std::vector<double> y(draws);
    const std::size_t rank =
        static_cast<std::size_t>(std::ceil(tau * static_cast<double>(draws))) - 1;  // lower empirical quantile
    for (std::size_t l = 0; l < t_grid.size(); ++l) {
      std::vector<double> w(K);
      for (std::size_t k = 0; k < K; ++k) w[k] = normal_pdf(t_grid[l], s.binary_peaks[k].mu, s.binary_peaks[k].sigma);
      for (std::size_t j = 0; j < draws; ++j) {
        double v = eps[j];
        for (std::size_t k = 0; k < K; ++k) v += w[k] * c[j * K + k];
        y[j] = v;
      }
      std::nth_element(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(rank), y.end());
      (group == 0 ? out.first : out.second)(static_cast<Eigen::Index>(l)) = y[rank];
    }
  }
  return out;
}

/// beta_j^tau(t) on t_grid. Continuous: closed form (intercept is the noise
/// quantile). Binary with x1 in {-1, 1}: intercept (q+ + q-)/2, slope (q+ - q-)/2.
inline Vector true_quantile_curve(const SimScenario& s, double tau, Eigen::Index coefficient,
                                  const std::vector<double>& t_grid) {
  QuantileLevel level(tau);
  if (coefficient < 0 || coefficient >= s.d()) {
    throw Error("coefficient index " + std::to_string(coefficient) + " out of range for scenario " + s.name);
  }
  Vector out(static_cast<Eigen::Index>(t_grid.size()));
  if (s.kind == ScenarioKind::continuous) {
    double intercept = 0.0;
    if (coefficient == 0) {
      intercept = s.t_marginal ? boost::math::quantile(boost::math::students_t_distribution<>(s.t_df), tau)
                               : s.noise_sd * normal_quantile(tau);
    }
    for (std::size_t l = 0; l < t_grid.size(); ++l) {
      double v = intercept;
      if (coefficient > 0 && static_cast<std::size_t>(coefficient) <= s.continuous_peaks.size()) {
        const auto& p = s.continuous_peaks[static_cast<std::size_t>(coefficient - 1)];
        v = p.c * normal_pdf(t_grid[l], p.mu, p.sigma);
      }
      out(static_cast<Eigen::Index>(l)) = v;
    }
    return out;
  }
  const auto [minus, plus] = binary_group_quantiles(s, tau, t_grid);
  return coefficient == 0 ? Vector((plus + minus) / 2.0) : Vector((plus - minus) / 2.0);
}

/// Evaluator of the true coefficient functions, caching binary curves per
/// (tau, coefficient, grid).
class TruthFunctions {
 public:
  explicit TruthFunctions(SimScenario s) : scenario_(std::move(s)) {}

  const Vector& beta(double tau, Eigen::Index coefficient, const SamplingGrid& grid) const {
    const Key key{tau, coefficient, grid.points()};
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, true_quantile_curve(scenario_, tau, coefficient, grid.points())).first;
    }
    return it->second;
  }

  const SimScenario& scenario() const { return scenario_; }

 private:
  using Key = std::tuple<double, Eigen::Index, std::vector<double>>;
  SimScenario scenario_;
  mutable std::mutex mutex_;
  mutable std::map<Key, Vector> cache_;
};

// ---- metrics ---------------------------------------------------------------

enum class ImseScale {
  domain_length,  // mean squared error over the grid times the domain length
  node_sum        // mean squared error times the number of sampling nodes
};

inline std::string to_string(ImseScale s) { return s == ImseScale::domain_length ? "domain-length" : "node-sum"; }

inline ImseScale parse_imse_scale(const std::string& s) {
  if (s == "domain-length") return ImseScale::domain_length;
  if (s == "node-sum") return ImseScale::node_sum;
  throw Error("unknown IMSE scale '" + s + "' (expected domain-length or node-sum)");
}

struct ImseConvention {
  ImseScale scale = ImseScale::domain_length;
  /// Node count for node_sum; 0 means the evaluation grid size.
  std::size_t nodes = 0;
};

struct ReplicateMetrics {
  double imse = 0.0;
  double pointwise_coverage = 0.0;
  double pointwise_width = 0.0;
  double joint_coverage = 0.0;
  double joint_width = 0.0;
};

inline ReplicateMetrics metrics(const BandResult& band, const Vector& truth, const ImseConvention& conv = {}) {
  const Vector& est = band.estimate.values;
  const Eigen::Index T = est.size();
  if (truth.size() != T || band.joint_lo.size() != T || band.pointwise_lo.size() != T) {
    throw Error("metrics: estimate, band and truth grids differ in length");
  }
  ReplicateMetrics m;
  const double mse = (est - truth).squaredNorm() / static_cast<double>(T);
  m.imse = conv.scale == ImseScale::domain_length
               ? mse * band.estimate.eval_grid.length()
               : mse * static_cast<double>(conv.nodes == 0 ? static_cast<std::size_t>(T) : conv.nodes);
  int pw = 0;
  bool joint = true;
  for (Eigen::Index l = 0; l < T; ++l) {
    pw += band.pointwise_lo(l) <= truth(l) && truth(l) <= band.pointwise_hi(l);
    joint = joint && band.joint_lo(l) <= truth(l) && truth(l) <= band.joint_hi(l);
  }
  m.pointwise_coverage = static_cast<double>(pw) / static_cast<double>(T);
  m.joint_coverage = joint ? 1.0 : 0.0;
  m.pointwise_width = (band.pointwise_hi - band.pointwise_lo).mean();
  m.joint_width = (band.joint_hi - band.joint_lo).mean();
  return m;
}

// ---- studies ----------------------------------------------------------------

struct StudyConfig {
  SimScenario scenario = continuous_scenario();
  std::vector<Method> methods{Method::li, Method::bayes_gp, Method::presmooth_li};
  std::vector<double> taus{0.5};
  std::uint64_t seed = 1;
  int threads = 1;
  /// Per-replicate analysis settings; method, threads and output grid are set by the study.
  AnalysisConfig analysis;
  ImseConvention imse{ImseScale::node_sum, 0};
  /// Points of a common equally spaced metric grid; 0 means the sampling grid.
  std::size_t metric_points = 0;
  /// Reuse replicate 0's seeds for every replicate.
  bool identical_replicates = false;
};

struct ReplicateRecord {
  int replicate = 0;
  double tau = 0.5;
  Eigen::Index coefficient = 1;
  Method method = Method::li;
  bool ok = false;
  std::string error;
  ReplicateMetrics m;
};

struct StudyRow {
  Method method = Method::li;
  double tau = 0.5;
  Eigen::Index coefficient = 1;
  int replicates = 0;
  int failures = 0;
  ReplicateMetrics mean, se;
};

struct StudyReport {
  SimScenario scenario;
  std::vector<StudyRow> rows;
  std::vector<ReplicateRecord> records;
  int failures = 0;
  double seconds = 0.0;
  ImseConvention imse;

  const StudyRow& row(Method m, double tau, Eigen::Index coefficient) const {
    for (const auto& r : rows)
      if (r.method == m && r.tau == tau && r.coefficient == coefficient) return r;
    throw Error("no study row for " + to_string(m) + " tau=" + std::to_string(tau));
  }
};

inline std::uint64_t replicate_data_seed(std::uint64_t seed, int r) { return derive_seed(seed, 0x4441, static_cast<std::uint64_t>(r)); }
inline std::uint64_t replicate_analysis_seed(std::uint64_t seed, int r) {
  return derive_seed(seed, 0x414e, static_cast<std::uint64_t>(r));
}

namespace detail {

inline std::vector<ReplicateRecord> run_replicate(const StudyConfig& cfg, const TruthFunctions& truth,
                                                  const SamplingGrid& metric_grid, int r) {
  const int seed_index = cfg.identical_replicates ? 0 : r;
  const SimScenario& s = cfg.scenario;
  std::vector<ReplicateRecord> out;
  std::optional<SimDataset> sim;
  std::string data_error;
  try {
    sim.emplace(generate(s, replicate_data_seed(cfg.seed, seed_index)));
  } catch (const std::exception& e) {
    data_error = std::string("data generation: ") + e.what();
  }
  AnalysisConfig acfg = cfg.analysis;
  acfg.threads = 1;
  acfg.seed = replicate_analysis_seed(cfg.seed, seed_index);
  acfg.eval_grid = metric_grid;

  const bool need_raw = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                    [](Method m) { return m != Method::presmooth_li; });
  const bool need_smooth = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                       [](Method m) { return m == Method::presmooth_li; });
  std::optional<FunctionalDataset> smoothed;
  std::string smooth_error;
  if (sim && need_smooth) {
    try {
      AnalysisConfig p = acfg;
      p.method = Method::presmooth_li;
      smoothed.emplace(working_dataset(sim->data, p));
    } catch (const std::exception& e) {
      smooth_error = e.what();
    }
  }

  for (std::size_t k = 0; k < cfg.taus.size(); ++k) {
    const QuantileLevel tau(cfg.taus[k]);
    std::vector<PointwiseFit> raw_fits, smooth_fits;
    std::string raw_error = data_error, smooth_fit_error = data_error.empty() ? smooth_error : data_error;
    if (sim && need_raw) {
      try {
        raw_fits = fit_quantile_level(sim->data, tau, k, acfg);
      } catch (const std::exception& e) {
        raw_error = e.what();
      }
    }
    if (smoothed) {
      try {
        smooth_fits = fit_quantile_level(*smoothed, tau, k, acfg);
      } catch (const std::exception& e) {
        smooth_fit_error = e.what();
      }
    }
    for (Method m : cfg.methods) {
      const bool smooth = m == Method::presmooth_li;
      for (std::size_t c = 0; c < s.coefficients().size(); ++c) {
        const Eigen::Index j = s.coefficients()[c];
        ReplicateRecord rec;
        rec.replicate = r;
        rec.tau = tau.value();
        rec.coefficient = j;
        rec.method = m;
        const std::string& err = smooth ? smooth_fit_error : raw_error;
        if (!err.empty()) {
          rec.error = err;
          out.push_back(rec);
          continue;
        }
        try {
          AnalysisConfig mc = acfg;
          mc.method = m;
          const CurveResult res = analyze_contrast(smooth ? *smoothed : sim->data, smooth ? smooth_fits : raw_fits, tau,
                                                   Contrast::unit(s.d(), j), k, c, mc);
          ImseConvention conv = cfg.imse;
          if (conv.scale == ImseScale::node_sum && conv.nodes == 0) conv.nodes = static_cast<std::size_t>(s.T);
          rec.m = metrics(res.curve, truth.beta(tau.value(), j, metric_grid), conv);
          rec.ok = true;
        } catch (const std::exception& e) {
          rec.error = e.what();
        }
        out.push_back(rec);
      }
    }
  }
  return out;
}

}  // namespace detail

inline StudyReport run_study(const StudyConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const SimScenario& s = cfg.scenario;
  s.validate();
  if (s.replicates < 2) throw Error("a study needs at least 2 replicates");
  if (cfg.methods.empty() || cfg.taus.empty()) throw Error("a study needs at least one method and one tau");
  for (double t : cfg.taus) QuantileLevel check(t);
  cfg.analysis.validate();
  const SamplingGrid metric_grid =
      cfg.metric_points == 0 ? s.grid() : SamplingGrid::equally_spaced(s.lo, s.hi, cfg.metric_points);
  const TruthFunctions truth(s);
  // fill the truth cache before the parallel section
  for (double t : cfg.taus)
    for (Eigen::Index j : s.coefficients()) truth.beta(t, j, metric_grid);

  std::vector<std::vector<ReplicateRecord>> per_rep(static_cast<std::size_t>(s.replicates));
  parallel_for(per_rep.size(), cfg.threads, [&](std::size_t r) {
    per_rep[r] = detail::run_replicate(cfg, truth, metric_grid, static_cast<int>(r));
  });

  StudyReport rep;
  rep.scenario = s;
  rep.imse = cfg.imse;
  for (auto& v : per_rep)
    for (auto& rec : v) rep.records.push_back(std::move(rec));

  for (double tau : cfg.taus) {
    for (Eigen::Index j : s.coefficients()) {
      for (Method m : cfg.methods) {
        StudyRow row;
        row.method = m;
        row.tau = tau;
        row.coefficient = j;
        std::vector<ReplicateMetrics> ok;
        for (const auto& rec : rep.records) {
          if (rec.method != m || rec.tau != tau || rec.coefficient != j) continue;
          if (rec.ok) ok.push_back(rec.m);
          else ++row.failures;
        }
        row.replicates = static_cast<int>(ok.size());
        auto summarize = [&](double ReplicateMetrics::*field, double& mean, double& se) {
          if (ok.empty()) {
            mean = se = std::numeric_limits<double>::quiet_NaN();
            return;
          }
          double sum = 0.0, sq = 0.0;
          for (const auto& x : ok) sum += x.*field;
          mean = sum / static_cast<double>(ok.size());
          for (const auto& x : ok) sq += (x.*field - mean) * (x.*field - mean);
          se = ok.size() > 1 ? std::sqrt(sq / static_cast<double>(ok.size() - 1) / static_cast<double>(ok.size())) : 0.0;
        };
        summarize(&ReplicateMetrics::imse, row.mean.imse, row.se.imse);
        summarize(&ReplicateMetrics::pointwise_coverage, row.mean.pointwise_coverage, row.se.pointwise_coverage);
        summarize(&ReplicateMetrics::pointwise_width, row.mean.pointwise_width, row.se.pointwise_width);
        summarize(&ReplicateMetrics::joint_coverage, row.mean.joint_coverage, row.se.joint_coverage);
        summarize(&ReplicateMetrics::joint_width, row.mean.joint_width, row.se.joint_width);
        rep.failures += row.failures;
        rep.rows.push_back(row);
      }
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline std::string coefficient_name(Eigen::Index j) { return "beta" + std::to_string(j); }

/// Table-shaped summary: one row per (tau, coefficient, method).
inline void write_study_csv(const StudyReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << std::setprecision(10);
  out << "scenario,n,T,tau,coefficient,method,replicates,failures,imse,imse_se,pw_coverage,pw_coverage_se,"
         "pw_width,pw_width_se,joint_coverage,joint_coverage_se,joint_width,joint_width_se\n";
  for (const auto& r : rep.rows) {
    out << rep.scenario.name << ',' << rep.scenario.n << ',' << rep.scenario.T << ',' << r.tau << ','
        << coefficient_name(r.coefficient) << ',' << to_string(r.method) << ',' << r.replicates << ',' << r.failures
        << ',' << r.mean.imse << ',' << r.se.imse << ',' << r.mean.pointwise_coverage << ','
        << r.se.pointwise_coverage << ',' << r.mean.pointwise_width << ',' << r.se.pointwise_width << ','
        << r.mean.joint_coverage << ',' << r.se.joint_coverage << ',' << r.mean.joint_width << ','
        << r.se.joint_width << '\n';
  }
}

inline void write_replicates_csv(const StudyReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << std::setprecision(17);
  out << "replicate,tau,coefficient,method,ok,imse,pw_coverage,pw_width,joint_coverage,joint_width,error\n";
  for (const auto& r : rep.records) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.replicate << ',' << r.tau << ',' << coefficient_name(r.coefficient) << ',' << to_string(r.method) << ','
        << (r.ok ? 1 : 0) << ',' << r.m.imse << ',' << r.m.pointwise_coverage << ',' << r.m.pointwise_width << ','
        << r.m.joint_coverage << ',' << r.m.joint_width << ",\"" << err << "\"\n";
  }
}

}  // namespace fqr

#endif  // FQR_SIMLAB_HPP
