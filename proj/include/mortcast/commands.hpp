#ifndef MORTCAST_COMMANDS_HPP
#define MORTCAST_COMMANDS_HPP

// fit / forecast / backtest entry points shared by the CLI and the tests. Each
// command writes its outputs and a run_config.json into the output directory;
// running that config again reproduces the outputs byte for byte.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mortcast/backtest.hpp"
#include "mortcast/cbd_model.hpp"
#include "mortcast/design_kernels.hpp"
#include "mortcast/error.hpp"
#include "mortcast/mixed_model.hpp"
#include "mortcast/mortality_data.hpp"
#include "mortcast/numeric_format.hpp"
#include "mortcast/serialization.hpp"

namespace mortcast {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitNotConverged = 2 };

struct RunConfig {
  std::string command;  // fit | forecast | backtest
  std::string input;
  std::string format = "hmd_1x1";
  std::string deaths_input;    // optional HMD Deaths_1x1
  std::string exposure_input;  // optional HMD Exposures_1x1
  std::string sex = "total";   // backtest also accepts "both"
  IntRange ages{60, 89};
  std::optional<IntRange> years;
  std::optional<int> train_end;
  std::string model = "mixed";
  std::vector<std::string> models{"mixed", "cbd"};
  std::vector<int> horizons{5, 10, 15, 20};
  int windows = 10;
  int horizon = 10;
  double alpha = 0.05;
  std::string fit_path;
  std::string country = "unknown";
  std::string out = ".";
  std::uint64_t seed = 0;
  int restarts = 3;
  std::optional<double> clamp_q;
  std::string var_beta = "scaled";
  std::string rw_divisor = "n-1";
  std::optional<double> synth_exposure = 1e5;
  std::vector<std::string> dump_matrices;
};

inline std::string range_string(IntRange r) { return std::to_string(r.lo) + ":" + std::to_string(r.hi); }

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["command"] = c.command;
  j["input"] = c.input;
  j["format"] = c.format;
  j["deaths_input"] = c.deaths_input;
  j["exposure_input"] = c.exposure_input;
  j["sex"] = c.sex;
  j["ages"] = range_string(c.ages);
  j["years"] = c.years ? nlohmann::json(range_string(*c.years)) : nlohmann::json(nullptr);
  j["train_end"] = c.train_end ? nlohmann::json(*c.train_end) : nlohmann::json(nullptr);
  j["model"] = c.model;
  j["models"] = c.models;
  j["horizons"] = c.horizons;
  j["windows"] = c.windows;
  j["horizon"] = c.horizon;
  j["alpha"] = c.alpha;
  j["fit_path"] = c.fit_path;
  j["country"] = c.country;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["restarts"] = c.restarts;
  j["clamp_q"] = c.clamp_q ? nlohmann::json(*c.clamp_q) : nlohmann::json(nullptr);
  j["var_beta"] = c.var_beta;
  j["rw_divisor"] = c.rw_divisor;
  j["synth_exposure"] = c.synth_exposure ? nlohmann::json(*c.synth_exposure) : nlohmann::json(nullptr);
  j["dump_matrices"] = c.dump_matrices;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  auto opt_num = [&](const char* key, auto& field) {
    if (j.contains(key) && !j[key].is_null()) field = j[key].get<typename std::decay_t<decltype(field)>::value_type>();
  };
  try {
    c.command = j.at("command").get<std::string>();
    c.input = j.value("input", c.input);
    c.format = j.value("format", c.format);
    c.deaths_input = j.value("deaths_input", c.deaths_input);
    c.exposure_input = j.value("exposure_input", c.exposure_input);
    c.sex = j.value("sex", c.sex);
    if (j.contains("ages")) c.ages = parse_range(j["ages"].get<std::string>());
    if (j.contains("years") && !j["years"].is_null()) c.years = parse_range(j["years"].get<std::string>());
    opt_num("train_end", c.train_end);
    c.model = j.value("model", c.model);
    c.models = j.value("models", c.models);
    c.horizons = j.value("horizons", c.horizons);
    c.windows = j.value("windows", c.windows);
    c.horizon = j.value("horizon", c.horizon);
    c.alpha = j.value("alpha", c.alpha);
    c.fit_path = j.value("fit_path", c.fit_path);
    c.country = j.value("country", c.country);
    c.out = j.value("out", c.out);
    c.seed = j.value("seed", c.seed);
    c.restarts = j.value("restarts", c.restarts);
    c.clamp_q.reset();
    opt_num("clamp_q", c.clamp_q);
    c.var_beta = j.value("var_beta", c.var_beta);
    c.rw_divisor = j.value("rw_divisor", c.rw_divisor);
    if (j.contains("synth_exposure")) {
      c.synth_exposure.reset();
      opt_num("synth_exposure", c.synth_exposure);
    }
    c.dump_matrices = j.value("dump_matrices", c.dump_matrices);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed run config: ") + e.what());
  }
  return c;
}

namespace detail {

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open input file '" + path + "'");
  return in;
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << content;
  if (!out) fail(ErrorCode::Io, "write to '" + path.string() + "' failed");
}

inline std::string read_file(const std::string& path) {
  auto in = open_input(path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline fs::path prepare_out(const RunConfig& c) {
  const fs::path out(c.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorCode::Io, "cannot create output directory '" + c.out + "': " + ec.message());
  return out;
}

inline void write_run_config(const RunConfig& c, const fs::path& out) {
  write_file(out / "run_config.json", config_to_json(c).dump(2) + "\n");
}

inline std::vector<Sex> config_sexes(const RunConfig& c) {
  if (c.sex == "both") return {Sex::Female, Sex::Male};
  const auto s = sex_from_string(c.sex);
  if (!s) fail(ErrorCode::InvalidArgument, "unknown sex '" + c.sex + "' (expected female, male, total or both)");
  return {*s};
}

inline TableFormat config_format(const RunConfig& c) {
  const auto f = table_format_from_string(c.format);
  if (!f) fail(ErrorCode::InvalidArgument, "unknown format '" + c.format + "' (expected hmd_1x1 or csv)");
  return *f;
}

inline IntRange config_years(const RunConfig& c) {
  if (!c.years) fail(ErrorCode::InvalidArgument, "a year range (--years lo:hi) is required");
  return *c.years;
}

/// Surface over the configured window; D/E from HMD count files when given.
inline MortalitySurface load_surface(const RunConfig& c, Sex sex, IntRange years) {
  if (c.input.empty()) fail(ErrorCode::InvalidArgument, "no input file given");
  const TableFormat format = config_format(c);
  auto in = open_input(c.input);
  RawMortalityTable table = parse_table(in, format, sex);
  if (!c.deaths_input.empty() || !c.exposure_input.empty()) {
    if (c.deaths_input.empty() || c.exposure_input.empty()) {
      fail(ErrorCode::InvalidArgument, "deaths and exposure files must be given together");
    }
    auto din = open_input(c.deaths_input);
    auto ein = open_input(c.exposure_input);
    table = attach_deaths_exposure(table, parse_hmd_records(din), parse_hmd_records(ein), sex);
  }
  return build_surface(table, c.ages, years, SurfaceOptions{c.clamp_q});
}

inline FitOptions mixed_options(const RunConfig& c) {
  FitOptions opt;
  opt.restarts = c.restarts;
  opt.seed = c.seed;
  opt.var_beta = var_beta_from_string(c.var_beta);
  return opt;
}

inline CbdRunnerOptions cbd_options(const RunConfig& c) {
  CbdRunnerOptions opt;
  opt.divisor = rw_divisor_from_string(c.rw_divisor);
  opt.synth_exposure = c.synth_exposure;
  return opt;
}

inline std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) s += ',';
      s += format_full(m(i, j));
    }
    s += '\n';
  }
  return s;
}

inline void dump_matrices(const RunConfig& c, const MixedFit& f, const fs::path& out) {
  if (c.dump_matrices.empty()) return;
  const fs::path dir = out / "matrices";
  fs::create_directories(dir);
  const auto K = build_covariances(f.params, f.design);
  for (const auto& name : c.dump_matrices) {
    Eigen::MatrixXd m;
    if (name == "T") m = f.design.T;
    else if (name == "Z1") m = f.design.Z1;
    else if (name == "Z2") m = f.design.Z2;
    else if (name == "Z3") m = f.design.Z3;
    else if (name == "K1") m = K.K1;
    else if (name == "K2") m = K.K2;
    else if (name == "K3") m = K.K3;
    else if (name == "V") m = assemble_V(f.params, f.design, f.mask);
    else fail(ErrorCode::InvalidArgument, "unknown matrix '" + name + "' (T, Z1, Z2, Z3, K1, K2, K3, V)");
    write_file(dir / (name + ".csv"), matrix_csv(m));
  }
}

inline std::string cell(double v) { return std::isfinite(v) ? format_full(v) : "NA"; }

inline double empirical_logit(double D, double E) {
  const double q = -std::expm1(-D / E);
  return std::log(q / (1.0 - q));
}

}  // namespace detail

inline int cmd_fit(const RunConfig& c, std::ostream& out) {
  const auto sexes = detail::config_sexes(c);
  if (sexes.size() != 1) fail(ErrorCode::InvalidArgument, "fit takes a single sex");
  IntRange years = detail::config_years(c);
  if (c.train_end) {
    if (!years.contains(*c.train_end)) fail(ErrorCode::OutOfRange, "train-end outside the year range");
    years.hi = *c.train_end;
  }
  const auto surface = detail::load_surface(c, sexes[0], years);
  const fs::path dir = detail::prepare_out(c);
  bool converged = false;

  if (c.model == "mixed") {
    const auto design = build_design(surface.ages(), surface.years());
    const auto f = fit(surface.stacked(), design, detail::mixed_options(c));
    detail::write_file(dir / "fit.json", mixed_fit_to_json(f).dump(2) + "\n");
    detail::dump_matrices(c, f, dir);
    converged = f.converged;
    out << "model: mixed\n";
    out << "window: ages " << range_string(c.ages) << ", years " << range_string(years) << "\n";
    out << "log-likelihood: " << format_short(f.loglik()) << "\n";
    const auto a = f.params.to_array();
    for (std::size_t k = 0; k < KernelParams::size; ++k)
      out << KernelParams::names()[k] << ": " << format_short(a[k]) << "\n";
    out << "beta: " << format_short(f.fixed.beta1) << ", " << format_short(f.fixed.beta2) << "\n";
    out << "converged: " << (f.converged ? "yes" : "no") << " (" << f.iterations << " iterations, restart "
        << f.best_restart << ")\n";
    if (!f.at_bound.empty()) {
      out << "at bound:";
      for (const auto& b : f.at_bound) out << ' ' << b;
      out << "\n";
    }
  } else if (c.model == "cbd") {
    const auto opts = detail::cbd_options(c);
    const auto [D, E] = cbd_counts(surface, opts.synth_exposure);
    CbdArtifact art{fit_cbd(D, E, surface.ages(), surface.years(), opts.fit), D, E,
                    !(surface.deaths() && surface.exposure())};
    detail::write_file(dir / "fit.json", cbd_fit_to_json(art).dump(2) + "\n");
    converged = art.fit.converged;
    out << "model: cbd\n";
    out << "window: ages " << range_string(c.ages) << ", years " << range_string(years) << "\n";
    out << "log-likelihood: " << format_short(art.fit.loglik) << "\n";
    out << "constraint residuals: " << format_short(art.fit.sum_gamma, 10) << ", "
        << format_short(art.fit.sum_cohort_gamma, 10) << "\n";
    out << "exposure: " << (art.synthetic_exposure ? "synthetic" : "observed") << "\n";
    out << "converged: " << (converged ? "yes" : "no") << " (" << art.fit.sweeps << " sweeps)\n";
  } else {
    fail(ErrorCode::InvalidArgument, "unknown model '" + c.model + "' (expected mixed or cbd)");
  }
  detail::write_run_config(c, dir);
  return converged ? kExitOk : kExitNotConverged;
}

inline int cmd_forecast(const RunConfig& c, std::ostream& out) {
  if (c.horizon <= 0) fail(ErrorCode::InvalidArgument, "forecast horizon must be >= 1");
  if (c.fit_path.empty()) fail(ErrorCode::InvalidArgument, "no fit artifact given (--fit)");
  nlohmann::json artifact;
  try {
    artifact = nlohmann::json::parse(detail::read_file(c.fit_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, "fit artifact '" + c.fit_path + "' is not valid JSON: " + e.what());
  }
  const std::string tag = artifact_model(artifact);
  if (tag != c.model) {
    fail(ErrorCode::InvalidArgument, "artifact model '" + tag + "' does not match requested model '" + c.model + "'");
  }

  Forecast fc;                // out-of-sample years
  Eigen::MatrixXd fitted;     // training years
  Eigen::MatrixXd fitted_var;  // NaN when the model has no in-sample variance
  Eigen::MatrixXd observed;
  std::vector<int> train_years;
  if (tag == "mixed") {
    const MixedFit f = mixed_fit_from_json(artifact);
    const int last = f.design.years[f.design.n_train - 1];
    const Forecast full = forecast(f, c.horizon, c.alpha);
    fc = full.out_of_sample(last);
    fitted = full.mean.topRows(f.design.n_train);
    fitted_var = full.variance.topRows(f.design.n_train);
    train_years.assign(f.design.years.begin(), f.design.years.begin() + f.design.n_train);
    observed.resize(f.design.n_train, f.design.n_ages());
    for (int r = 0; r < f.design.n_rows(); ++r) observed(f.design.row_year[r], f.design.row_age[r]) = f.y[r];
  } else {
    const CbdArtifact art = cbd_fit_from_json(artifact);
    const auto rw = estimate_rw(art.fit, rw_divisor_from_string(c.rw_divisor));
    fc = forecast_cbd(art.fit, rw, c.horizon, c.alpha);
    const auto& p = art.fit.params;
    train_years = p.years;
    fitted.resize(p.n_years(), p.n_ages());
    observed.resize(p.n_years(), p.n_ages());
    for (int i = 0; i < p.n_years(); ++i)
      for (int j = 0; j < p.n_ages(); ++j) {
        fitted(i, j) = p.eta(i, j);
        observed(i, j) = detail::empirical_logit(art.deaths(i, j), art.exposure(i, j));
      }
    fitted_var = Eigen::MatrixXd::Constant(fitted.rows(), fitted.cols(), std::numeric_limits<double>::quiet_NaN());
  }

  const fs::path dir = detail::prepare_out(c);
  const Interval iv = fc.intervals(c.alpha);
  std::string csv = "year,age,mean_logit,q_mean,lo95,hi95\n";
  for (std::size_t i = 0; i < fc.years.size(); ++i)
    for (std::size_t j = 0; j < fc.ages.size(); ++j) {
      const double mu = fc.mean(i, j);
      csv += std::to_string(fc.years[i]) + ',' + std::to_string(fc.ages[j]) + ',' + format_full(mu) + ',' +
             format_full(inv_logit(mu)) + ',' + format_full(iv.lower(i, j)) + ',' + format_full(iv.upper(i, j)) +
             '\n';
    }
  detail::write_file(dir / "forecast.csv", csv);

  const double z = normal_quantile_two_sided(c.alpha);
  std::string plot = "age,year,segment,observed_logit,mean_logit,lo95,hi95\n";
  for (std::size_t j = 0; j < fc.ages.size(); ++j) {
    for (std::size_t i = 0; i < train_years.size(); ++i) {
      const double mu = fitted(i, j), sd = std::sqrt(std::max(fitted_var(i, j), 0.0));
      const bool has_var = std::isfinite(fitted_var(i, j));
      plot += std::to_string(fc.ages[j]) + ',' + std::to_string(train_years[i]) + ",fitted," +
              detail::cell(observed(i, j)) + ',' + format_full(mu) + ',' +
              (has_var ? format_full(mu - z * sd) : "NA") + ',' + (has_var ? format_full(mu + z * sd) : "NA") + '\n';
    }
    for (std::size_t i = 0; i < fc.years.size(); ++i) {
      plot += std::to_string(fc.ages[j]) + ',' + std::to_string(fc.years[i]) + ",forecast,NA," +
              format_full(fc.mean(i, j)) + ',' + format_full(iv.lower(i, j)) + ',' + format_full(iv.upper(i, j)) +
              '\n';
    }
  }
  detail::write_file(dir / "plot_data.csv", plot);
  detail::write_run_config(c, dir);
  out << "forecast: " << tag << ", years " << fc.years.front() << ":" << fc.years.back() << ", "
      << fc.years.size() * fc.ages.size() << " rows\n";
  return kExitOk;
}

inline int cmd_backtest(const RunConfig& c, std::ostream& out) {
  const IntRange years = detail::config_years(c);
  BacktestPlan plan;
  plan.country = c.country;
  plan.ages = c.ages;
  plan.years = years;
  plan.horizons = c.horizons;
  plan.windows = c.windows;
  plan.models = c.models;
  plan.validate();
  const std::vector<ModelRunner> runners{mixed_runner(detail::mixed_options(c)), cbd_runner(detail::cbd_options(c))};

  std::vector<BacktestReport> reports;
  int excluded = 0;
  for (Sex sex : detail::config_sexes(c)) {
    plan.sex = sex;
    const auto surface = detail::load_surface(c, sex, years);
    reports.push_back(run_backtest(plan, surface, runners, c.seed));
    for (const auto& w : reports.back().windows)
      if (!w.ok) {
        ++excluded;
        out << "excluded: " << w.model << " " << to_string(sex) << " h=" << w.horizon << " window " << w.window
            << ": " << w.error << "\n";
      }
  }
  const fs::path dir = detail::prepare_out(c);
  detail::write_file(dir / "backtest.csv", emit_report(reports, ReportFormat::Csv));
  detail::write_file(dir / "backtest.md", emit_report(reports, ReportFormat::Markdown));
  detail::write_file(dir / "backtest.json", emit_report(reports, ReportFormat::Json));
  detail::write_run_config(c, dir);
  out << emit_report(reports, ReportFormat::Markdown);
  return excluded ? kExitNotConverged : kExitOk;
}

/// Dispatches on config.command; errors propagate as exceptions.
inline int run_command(const RunConfig& c, std::ostream& out) {
  if (c.command == "fit") return cmd_fit(c, out);
  if (c.command == "forecast") return cmd_forecast(c, out);
  if (c.command == "backtest") return cmd_backtest(c, out);
  fail(ErrorCode::InvalidArgument, "unknown command '" + c.command + "'");
}

inline RunConfig load_run_config(const std::string& path) {
  try {
    return config_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, "config '" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace mortcast

#endif  // MORTCAST_COMMANDS_HPP
