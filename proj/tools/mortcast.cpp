// mortcast: fit, forecast and backtest old-age mortality models.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "mortcast/commands.hpp"

namespace {

using mortcast::RunConfig;

struct RawFlags {
  std::string ages = "60:89";
  std::string years;
  std::string clamp_q;
  bool clamp_given = false;
  double synth_exposure = 1e5;
  bool no_synth = false;
  std::vector<std::string> dump;
};

void add_data_flags(CLI::App* app, RunConfig& c, RawFlags& f) {
  app->add_option("--input", c.input, "Rate table (HMD Mx_1x1/qx_1x1 or CSV)")->required();
  app->add_option("--format", c.format, "hmd_1x1 or csv")->capture_default_str();
  app->add_option("--sex", c.sex, "female, male or total")->capture_default_str();
  app->add_option("--deaths", c.deaths_input, "HMD Deaths_1x1 file");
  app->add_option("--exposure", c.exposure_input, "HMD Exposures_1x1 file");
  app->add_option("--ages", f.ages, "Age range lo:hi")->capture_default_str();
  app->add_option("--years", f.years, "Year range lo:hi")->required();
  app->add_option("--clamp-q", f.clamp_q, "Replace q = 0 cells by eps (default 1e-6)")->expected(0, 1);
  app->add_option("--synth-exposure", f.synth_exposure, "Constant exposure used by CBD when counts are absent")
      ->capture_default_str();
  app->add_flag("--no-synth-exposure", f.no_synth, "Require observed deaths/exposure for CBD");
  app->add_option("--var-beta", c.var_beta, "Fixed-effect covariance: scaled or gls")->capture_default_str();
  app->add_option("--rw-divisor", c.rw_divisor, "Random-walk covariance divisor: n-1 or n-2")->capture_default_str();
  app->add_option("--restarts", c.restarts, "Optimizer restarts for the mixed model")->capture_default_str();
  app->add_option("--seed", c.seed, "Seed for randomized restarts")->capture_default_str();
}

void finish_data_flags(CLI::App* app, RunConfig& c, const RawFlags& f) {
  c.ages = mortcast::parse_range(f.ages);
  c.years = mortcast::parse_range(f.years);
  if (app->count("--clamp-q")) {
    double eps = 1e-6;
    if (!f.clamp_q.empty() && !mortcast::parse_double(f.clamp_q, eps)) {
      mortcast::fail(mortcast::ErrorCode::InvalidArgument, "--clamp-q expects a number, got '" + f.clamp_q + "'");
    }
    if (!(eps > 0.0 && eps < 1.0)) mortcast::fail(mortcast::ErrorCode::InvalidArgument, "--clamp-q must lie in (0, 1)");
    c.clamp_q = eps;
  }
  c.synth_exposure = f.no_synth ? std::nullopt : std::optional<double>(f.synth_exposure);
  c.dump_matrices = f.dump;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Old-age mortality forecasting with a mixed-effects cohort model and a CBD baseline"};
  app.require_subcommand(1);

  RunConfig c;
  RawFlags f;
  std::string config_path, out_override;

  auto* fit = app.add_subcommand("fit", "Fit a model and write <out>/fit.json");
  add_data_flags(fit, c, f);
  fit->add_option("--model", c.model, "mixed or cbd")->capture_default_str();
  fit->add_option("--train-end", c.train_end, "Last training year (defaults to the end of --years)");
  fit->add_option("--dump-matrix", f.dump, "Write T, Z1, Z2, Z3, K1, K2, K3 or V to <out>/matrices")->delimiter(',');
  fit->add_option("--out", c.out, "Output directory")->capture_default_str();

  auto* fc = app.add_subcommand("forecast", "Forecast from a fit artifact");
  fc->add_option("--fit", c.fit_path, "fit.json written by the fit command")->required();
  fc->add_option("--model", c.model, "Model tag expected in the artifact")->capture_default_str();
  fc->add_option("--horizon", c.horizon, "Years ahead")->capture_default_str();
  fc->add_option("--alpha", c.alpha, "Two-sided interval level")->capture_default_str();
  fc->add_option("--rw-divisor", c.rw_divisor, "CBD random-walk covariance divisor")->capture_default_str();
  fc->add_option("--out", c.out, "Output directory")->capture_default_str();

  auto* bt = app.add_subcommand("backtest", "Rolling-window RMSE comparison");
  add_data_flags(bt, c, f);
  bt->add_option("--models", c.models, "Comma-separated subset of mixed,cbd")->delimiter(',');
  bt->add_option("--horizons", c.horizons, "Comma-separated horizons")->delimiter(',');
  bt->add_option("--windows", c.windows, "Rolling windows per horizon")->capture_default_str();
  bt->add_option("--country", c.country, "Dataset label for the report")->capture_default_str();
  bt->add_option("--out", c.out, "Output directory")->capture_default_str();

  auto* run = app.add_subcommand("run", "Re-run a saved run_config.json");
  run->add_option("--config", config_path, "Path to run_config.json")->required();
  run->add_option("--out", out_override, "Override the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mortcast::kExitOk : mortcast::kExitError;
  }

  try {
    if (run->parsed()) {
      c = mortcast::load_run_config(config_path);
      if (!out_override.empty()) c.out = out_override;
    } else if (fit->parsed()) {
      c.command = "fit";
      finish_data_flags(fit, c, f);
    } else if (bt->parsed()) {
      c.command = "backtest";
      finish_data_flags(bt, c, f);
    } else {
      c.command = "forecast";
    }
    return mortcast::run_command(c, std::cout);
  } catch (const mortcast::Error& e) {
    std::cerr << "error [" << mortcast::to_string(e.code()) << "]: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return mortcast::kExitError;
}
