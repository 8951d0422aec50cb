// fqr command line: `analyze` runs the pipeline on CSV inputs, `simulate`
// runs the simulation study. Both write a JSON manifest plus CSV tables.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fqr/pipeline.hpp"
#include "fqr/simlab.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct AnalyzeOptions {
  std::string responses, design, grid;
  std::vector<double> taus;
  std::vector<std::string> contrasts;
  std::string method = "li";
  double alpha = 0.05;
  std::size_t mc_draws = 10000;
  bool wavelet_smooth = true;
  std::string diagonal_mode = "analytic";
  double fold_threshold = fqr::default_fold_threshold();
  std::uint64_t seed = 20240601;
  int eval_refine = 4;
  int chain_length = fqr::McmcConfig{}.chain_length;
  int burn_in = fqr::McmcConfig{}.burn_in;
  std::string gp_adjustment = "divide";
  std::optional<double> presmooth_df;
  bool dump_sigma = false;
};

struct SimulateOptions {
  std::string scenario;
  std::uint64_t seed = 0;
  std::optional<int> replicates;
  std::optional<long> n, T;
  std::vector<std::string> methods{"li", "bayes-gp", "presmooth-li"};
  std::vector<double> taus{0.5};
  bool drop_peaks = false;
  std::string imse_scale = "node-sum";
  std::size_t metric_points = 0;
  double alpha = 0.05;
  std::size_t mc_draws = 10000;
  bool wavelet_smooth = true;
  std::string gp_adjustment = "divide";
};

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json to_json(const fqr::Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

fqr::Contrast parse_contrast(const std::string& text, Eigen::Index d) {
  if (text.find(',') == std::string::npos) {
    std::size_t used = 0;
    long index = -1;
    try {
      index = std::stol(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != text.size()) throw fqr::Error("contrast '" + text + "' is neither a column index nor a vector");
    return fqr::Contrast::unit(d, index);
  }
  std::vector<double> w;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0.0;
    if (!fqr::csv::parse_double(item, v)) throw fqr::Error("contrast '" + text + "' has a non-numeric entry");
    w.push_back(v);
  }
  if (static_cast<Eigen::Index>(w.size()) != d) {
    throw fqr::Error("contrast '" + text + "' has " + std::to_string(w.size()) + " entries, design has " +
                     std::to_string(d) + " columns");
  }
  return fqr::Contrast(Eigen::Map<const fqr::Vector>(w.data(), static_cast<Eigen::Index>(w.size())));
}

json analyze_config_json(const AnalyzeOptions& o) {
  json c;
  c["command"] = "analyze";
  c["responses"] = o.responses;
  c["design"] = o.design;
  c["grid"] = o.grid;
  c["taus"] = o.taus;
  c["contrasts"] = o.contrasts;
  c["method"] = o.method;
  c["alpha"] = o.alpha;
  c["mc_draws"] = o.mc_draws;
  c["wavelet_smooth"] = o.wavelet_smooth;
  c["diagonal_mode"] = o.diagonal_mode;
  c["fold_threshold"] = o.fold_threshold;
  c["seed"] = o.seed;
  c["eval_refine"] = o.eval_refine;
  c["chain_length"] = o.chain_length;
  c["burn_in"] = o.burn_in;
  c["gp_adjustment"] = o.gp_adjustment;
  c["presmooth_df"] = o.presmooth_df ? json(*o.presmooth_df) : json(nullptr);
  c["dump_sigma"] = o.dump_sigma;
  return c;
}

AnalyzeOptions analyze_options_from_json(const json& c) {
  if (c.value("command", "") != "analyze") throw fqr::Error("manifest does not hold an analyze config");
  AnalyzeOptions o;
  o.responses = c.at("responses").get<std::string>();
  o.design = c.at("design").get<std::string>();
  o.grid = c.at("grid").get<std::string>();
  o.taus = c.at("taus").get<std::vector<double>>();
  o.contrasts = c.at("contrasts").get<std::vector<std::string>>();
  o.method = c.at("method").get<std::string>();
  o.alpha = c.at("alpha").get<double>();
  o.mc_draws = c.at("mc_draws").get<std::size_t>();
  o.wavelet_smooth = c.at("wavelet_smooth").get<bool>();
  o.diagonal_mode = c.at("diagonal_mode").get<std::string>();
  o.fold_threshold = c.at("fold_threshold").get<double>();
  o.seed = c.at("seed").get<std::uint64_t>();
  o.eval_refine = c.at("eval_refine").get<int>();
  o.chain_length = c.at("chain_length").get<int>();
  o.burn_in = c.at("burn_in").get<int>();
  o.gp_adjustment = c.at("gp_adjustment").get<std::string>();
  if (!c.at("presmooth_df").is_null()) o.presmooth_df = c.at("presmooth_df").get<double>();
  o.dump_sigma = c.at("dump_sigma").get<bool>();
  return o;
}

void write_curve_csv(const fqr::BandResult& b, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw fqr::Error("cannot write " + path);
  out << std::setprecision(17);
  out << "t,estimate,pw_lo,pw_hi,joint_lo,joint_hi,simbas,flag\n";
  const auto& t = b.estimate.eval_grid.points();
  for (std::size_t l = 0; l < t.size(); ++l) {
    const auto i = static_cast<Eigen::Index>(l);
    out << t[l] << ',' << b.estimate.values(i) << ',' << b.pointwise_lo(i) << ',' << b.pointwise_hi(i) << ','
        << b.joint_lo(i) << ',' << b.joint_hi(i) << ',' << b.simbas(i) << ',' << (b.flags[l] ? 1 : 0) << '\n';
  }
}

json gp_json(const fqr::GpHyper& h) {
  json g;
  g["theta_sigma"] = h.theta_sigma;
  g["theta_l"] = h.theta_l;
  g["theta_l_mmle"] = h.theta_l_mmle;
  g["adjusted"] = h.adjusted;
  g["adjustment"] = fqr::to_string(h.adjustment);
  g["loglik"] = h.loglik;
  return g;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw fqr::Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int run_analyze_command(AnalyzeOptions o, const std::string& from_manifest, const std::string& out_dir, int threads) {
  if (!from_manifest.empty()) {
    std::ifstream in(from_manifest);
    if (!in) throw fqr::Error("cannot read " + from_manifest);
    o = analyze_options_from_json(json::parse(in).at("config"));
  }
  if (o.responses.empty() || o.design.empty() || o.grid.empty()) {
    throw fqr::Error("--responses, --design and --grid are required");
  }
  if (o.taus.empty()) o.taus = {0.5};

  const fqr::FunctionalDataset ds = fqr::run_stage("load", [&] { return fqr::load_dataset(o.responses, o.design, o.grid); });
  if (o.contrasts.empty()) {
    for (Eigen::Index j = 0; j < ds.d(); ++j) o.contrasts.push_back(std::to_string(j));
  }
  std::vector<fqr::QuantileLevel> taus;
  for (double t : o.taus) taus.emplace_back(t);
  std::vector<fqr::Contrast> contrasts;
  for (const auto& c : o.contrasts) contrasts.push_back(parse_contrast(c, ds.d()));

  fqr::AnalysisConfig cfg;
  cfg.method = fqr::parse_method(o.method);
  cfg.alpha = o.alpha;
  cfg.mc_draws = o.mc_draws;
  cfg.wavelet_smooth = o.wavelet_smooth;
  cfg.diagonal_mode = fqr::parse_diagonal_mode(o.diagonal_mode);
  cfg.fold_threshold = o.fold_threshold;
  cfg.seed = o.seed;
  cfg.threads = threads;
  cfg.eval_refine = o.eval_refine;
  cfg.solver.mcmc.chain_length = o.chain_length;
  cfg.solver.mcmc.burn_in = o.burn_in;
  cfg.gp.adjustment = fqr::parse_length_adjustment(o.gp_adjustment);
  cfg.presmooth.df = o.presmooth_df;

  const fqr::AnalysisOutput result = fqr::run_analyze(ds, taus, contrasts, cfg);

  fs::create_directories(out_dir);
  json manifest;
  manifest["tool"] = "fqr";
  manifest["version"] = kVersion;
  manifest["config"] = analyze_config_json(o);
  manifest["dataset"] = {{"n", ds.n()}, {"T", ds.T()}, {"d", ds.d()},
                         {"t_min", ds.grid().front()}, {"t_max", ds.grid().back()}};
  manifest["warnings"] = result.warnings;
  json curves = json::array();
  json curve_seconds = json::array();
  for (const auto& r : result.curves) {
    const std::string stem = "curve_tau" + std::to_string(r.tau_index) + "_contrast" + std::to_string(r.contrast_index);
    write_curve_csv(r.curve, (fs::path(out_dir) / (stem + ".csv")).string());
    json c;
    c["tau"] = r.tau;
    c["tau_index"] = r.tau_index;
    c["contrast"] = to_json(r.contrast);
    c["contrast_index"] = r.contrast_index;
    c["method"] = fqr::to_string(r.method);
    c["file"] = stem + ".csv";
    c["seed"] = r.nodes.seed;
    c["c_n_alpha"] = r.nodes.c_n_alpha;
    c["z_alpha"] = r.nodes.z_alpha;
    c["mc_draws"] = r.nodes.mc_draws;
    c["psd_shift"] = r.nodes.psd_shift;
    c["wavelet_smoothed"] = r.sigma_used.smoothed;
    c["flagged_locations"] = std::count(r.curve.flags.begin(), r.curve.flags.end(), true);
    c["simbas_band_duality"] = fqr::duality_holds(r.nodes) && fqr::duality_holds(r.curve);
    c["gp"] = r.gp ? gp_json(*r.gp) : json(nullptr);
    c["warnings"] = r.warnings;
    if (o.dump_sigma) {
      fqr::dump_sigma_csv(r.sigma_raw, (fs::path(out_dir) / (stem + "_sigma_raw.csv")).string());
      fqr::dump_sigma_csv(r.sigma_used, (fs::path(out_dir) / (stem + "_sigma_used.csv")).string());
    }
    curves.push_back(std::move(c));
    curve_seconds.push_back(r.seconds);
  }
  manifest["curves"] = std::move(curves);
  manifest["runtime"] = {{"timestamp", timestamp()},
                         {"threads", threads},
                         {"fit_seconds", result.fit_seconds},
                         {"total_seconds", result.total_seconds},
                         {"curve_seconds", curve_seconds}};
  write_json(manifest, fs::path(out_dir) / "manifest.json");
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& r : result.curves)
    for (const auto& w : r.warnings) std::cerr << "warning (tau=" << r.tau << "): " << w << '\n';
  std::cout << "wrote " << result.curves.size() << " curve(s) to " << out_dir << '\n';
  return 0;
}

int run_simulate_command(const SimulateOptions& o, const std::string& out_dir, int threads) {
  fqr::ScenarioOverrides ov;
  if (o.n) ov.n = *o.n;
  if (o.T) ov.T = *o.T;
  ov.replicates = o.replicates;
  ov.drop_non_gaussian_peaks = o.drop_peaks;
  fqr::StudyConfig cfg;
  cfg.scenario = fqr::apply_overrides(fqr::scenario_by_name(o.scenario), ov);
  cfg.methods.clear();
  for (const auto& m : o.methods) cfg.methods.push_back(fqr::parse_method(m));
  if (cfg.methods.empty()) throw fqr::Error("at least one method is required");
  cfg.taus = o.taus;
  cfg.seed = o.seed;
  cfg.threads = threads;
  cfg.analysis.alpha = o.alpha;
  cfg.analysis.mc_draws = o.mc_draws;
  cfg.analysis.wavelet_smooth = o.wavelet_smooth;
  cfg.analysis.gp.adjustment = fqr::parse_length_adjustment(o.gp_adjustment);
  cfg.imse = {fqr::parse_imse_scale(o.imse_scale), 0};
  cfg.metric_points = o.metric_points;

  const fqr::StudyReport rep = fqr::run_study(cfg);
  fs::create_directories(out_dir);
  fqr::write_study_csv(rep, (fs::path(out_dir) / "study.csv").string());
  fqr::write_replicates_csv(rep, (fs::path(out_dir) / "replicates.csv").string());

  json manifest;
  manifest["tool"] = "fqr";
  manifest["version"] = kVersion;
  json c;
  c["command"] = "simulate";
  c["scenario"] = o.scenario;
  c["seed"] = o.seed;
  c["replicates"] = cfg.scenario.replicates;
  c["n"] = cfg.scenario.n;
  c["T"] = cfg.scenario.T;
  c["methods"] = o.methods;
  c["taus"] = o.taus;
  c["drop_peaks"] = o.drop_peaks;
  c["imse_scale"] = o.imse_scale;
  c["metric_points"] = o.metric_points;
  c["alpha"] = o.alpha;
  c["mc_draws"] = o.mc_draws;
  c["wavelet_smooth"] = o.wavelet_smooth;
  c["gp_adjustment"] = o.gp_adjustment;
  manifest["config"] = std::move(c);
  manifest["scenario"] = {{"name", cfg.scenario.name},
                          {"n", cfg.scenario.n},
                          {"T", cfg.scenario.T},
                          {"domain", {cfg.scenario.lo, cfg.scenario.hi}},
                          {"replicates", cfg.scenario.replicates},
                          {"noise_rho", cfg.scenario.rho},
                          {"t_marginal", cfg.scenario.t_marginal}};
  manifest["failures"] = rep.failures;
  json errors = json::array();
  for (const auto& r : rep.records)
    if (!r.ok) errors.push_back({{"replicate", r.replicate}, {"tau", r.tau}, {"method", fqr::to_string(r.method)},
                                 {"error", r.error}});
  manifest["errors"] = std::move(errors);
  manifest["files"] = {"study.csv", "replicates.csv"};
  manifest["runtime"] = {{"timestamp", timestamp()}, {"threads", threads}, {"seconds", rep.seconds}};
  write_json(manifest, fs::path(out_dir) / "manifest.json");
  if (rep.failures > 0) std::cerr << "warning: " << rep.failures << " replicate fit(s) failed; see manifest\n";
  std::cout << "wrote study of " << cfg.scenario.replicates << " replicates to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-on-scalar quantile regression with simultaneous inference"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  int threads = 0;
  std::string out_dir = "fqr_out";

  AnalyzeOptions ao;
  std::string from_manifest;
  auto* analyze = app.add_subcommand("analyze", "fit, estimate and build bands for a dataset");
  analyze->add_option("--responses", ao.responses, "n x T response CSV");
  analyze->add_option("--design", ao.design, "n x d design CSV");
  analyze->add_option("--grid", ao.grid, "T x 1 sampling grid CSV");
  analyze->add_option("--tau", ao.taus, "quantile level (repeatable, default 0.5)")->check(CLI::Range(0.0, 1.0));
  analyze->add_option("--contrast", ao.contrasts,
                      "design column index (0-based) or comma-separated weights (repeatable, default every column)");
  analyze->add_option("--method", ao.method, "li | spline2 | presmooth-li | bayes-gp")->capture_default_str();
  analyze->add_option("--alpha", ao.alpha, "band level is 1 - alpha")->capture_default_str();
  analyze->add_option("--mc-draws", ao.mc_draws, "Monte Carlo draws for critical values")->capture_default_str();
  analyze->add_flag("--wavelet-smooth,!--no-wavelet-smooth", ao.wavelet_smooth, "wavelet covariance smoothing (default on)");
  analyze->add_option("--diagonal-mode", ao.diagonal_mode, "analytic | empirical")->capture_default_str();
  analyze->add_option("--fold-threshold", ao.fold_threshold, "effect magnitude needed for a flag")->capture_default_str();
  analyze->add_option("--seed", ao.seed, "master seed")->capture_default_str();
  analyze->add_option("--eval-refine", ao.eval_refine, "output grid refinement factor")->capture_default_str();
  analyze->add_option("--chain-length", ao.chain_length, "sampler iterations per location")->capture_default_str();
  analyze->add_option("--burn-in", ao.burn_in, "discarded sampler iterations")->capture_default_str();
  analyze->add_option("--gp-adjustment", ao.gp_adjustment, "log(T) length-scale adjustment: divide | multiply | none")
      ->capture_default_str();
  analyze->add_option("--presmooth-df", ao.presmooth_df, "fixed smoothing-spline df for presmooth-li (default GCV)");
  analyze->add_flag("--dump-sigma", ao.dump_sigma, "also write raw and used covariance matrices");
  analyze->add_option("--from-manifest", from_manifest, "rerun the config embedded in a previous manifest");
  analyze->add_option("--threads", threads, "worker threads (default FQR_THREADS or 1)");
  analyze->add_option("--out", out_dir, "output directory")->capture_default_str();

  SimulateOptions so;
  auto* simulate = app.add_subcommand("simulate", "run the simulation study");
  simulate->add_option("--scenario", so.scenario, "continuous | binary")->required();
  simulate->add_option("--seed", so.seed, "master seed")->required();
  simulate->add_option("--replicates", so.replicates, "number of replicates");
  simulate->add_option("--n", so.n, "subjects per replicate");
  simulate->add_option("--T", so.T, "grid size");
  simulate->add_option("--methods", so.methods, "methods to compare")->delimiter(',')->capture_default_str();
  simulate->add_option("--taus", so.taus, "quantile levels")->delimiter(',')->check(CLI::Range(0.0, 1.0))->capture_default_str();
  simulate->add_flag("--drop-peaks", so.drop_peaks, "binary scenario: keep only Gaussian-magnitude peaks");
  simulate->add_option("--imse-scale", so.imse_scale, "node-sum | domain-length")->capture_default_str();
  simulate->add_option("--metric-points", so.metric_points, "common metric grid size (0: sampling grid)");
  simulate->add_option("--alpha", so.alpha, "band level is 1 - alpha")->capture_default_str();
  simulate->add_option("--mc-draws", so.mc_draws, "Monte Carlo draws for critical values")->capture_default_str();
  simulate->add_flag("--wavelet-smooth,!--no-wavelet-smooth", so.wavelet_smooth, "wavelet covariance smoothing (default on)");
  simulate->add_option("--gp-adjustment", so.gp_adjustment, "divide | multiply | none")->capture_default_str();
  simulate->add_option("--threads", threads, "worker threads (default FQR_THREADS or 1)");
  simulate->add_option("--out", out_dir, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    threads = fqr::resolve_threads(threads);
    if (analyze->parsed()) return run_analyze_command(ao, from_manifest, out_dir, threads);
    return run_simulate_command(so, out_dir, threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
