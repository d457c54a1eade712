#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mortcast/commands.hpp"
#include "oracles.hpp"

using namespace mortcast;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mortcast_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Rate table with a log-linear age/period shape and some noise.
fs::path write_rates(const fs::path& dir) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z;
  std::ostringstream s;
  s << "year,age,mx\n";
  for (int t = 1990; t <= 2009; ++t)
    for (int x = 60; x <= 64; ++x)
      s << t << ',' << x << ',' << format_full(0.01 * std::exp(0.09 * (x - 60) - 0.015 * (t - 1990) + 0.02 * z(rng)))
        << '\n';
  const fs::path p = dir / "rates.csv";
  std::ofstream(p) << s.str();
  return p;
}

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string("\"") + MORTCAST_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string c;
    std::istringstream ls(line);
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

MortalitySurface small_surface() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  Eigen::MatrixXd y(15, 4);
  for (int i = 0; i < 15; ++i)
    for (int j = 0; j < 4; ++j) y(i, j) = -4.0 + 0.1 * j - 0.02 * i + 0.03 * z(rng);
  return MortalitySurface::from_logits(oracle::seq(70, 4), oracle::seq(2000, 15), y);
}

}  // namespace

TEST_CASE("mixed artifact round-trips to identical forecasts") {
  const auto s = small_surface();
  FitOptions opt;
  opt.restarts = 1;
  const auto f = fit(s.stacked(), build_design(s.ages(), s.years()), opt);
  const auto text = mixed_fit_to_json(f).dump(2);
  const auto g = mixed_fit_from_json(nlohmann::json::parse(text));
  CHECK(g.params.to_array() == f.params.to_array());
  CHECK(g.loglik() == f.loglik());
  CHECK(g.loglik_trace == f.loglik_trace);
  const auto a = forecast(f, 6), b = forecast(g, 6);
  CHECK(a.mean == b.mean);
  CHECK(a.variance == b.variance);
  CHECK(mixed_fit_to_json(g).dump(2) == text);

  auto wrong = nlohmann::json::parse(text);
  wrong["model"] = "cbd";
  CHECK_THROWS_AS(mixed_fit_from_json(wrong), Error);
}

TEST_CASE("CBD artifact round-trips to identical forecasts") {
  const auto s = small_surface();
  const auto [D, E] = cbd_counts(s, 1e5);
  const CbdArtifact art{fit_cbd(D, E, s.ages(), s.years()), D, E, true};
  const auto text = cbd_fit_to_json(art).dump(2);
  const auto back = cbd_fit_from_json(nlohmann::json::parse(text));
  CHECK(back.fit.params.kappa1 == art.fit.params.kappa1);
  CHECK(back.fit.cohort_included == art.fit.cohort_included);
  CHECK(back.deaths == D);
  const auto a = forecast_cbd(art.fit, estimate_rw(art.fit), 5);
  const auto b = forecast_cbd(back.fit, estimate_rw(back.fit), 5);
  CHECK(a.mean == b.mean);
  CHECK(a.variance == b.variance);
  CHECK(cbd_fit_to_json(back).dump(2) == text);
}

TEST_CASE("run config serializes losslessly") {
  RunConfig c;
  c.command = "backtest";
  c.input = "x.txt";
  c.years = IntRange{1950, 2000};
  c.train_end = 1990;
  c.horizons = {5, 10};
  c.clamp_q = 1e-7;
  c.synth_exposure.reset();
  c.seed = 99;
  const auto j = config_to_json(c);
  CHECK(config_to_json(config_from_json(j)) == j);
  CHECK(j["years"] == "1950:2000");
}

TEST_CASE("CLI input and range errors exit 1") {
  const auto dir = scratch("errors");
  const auto missing = dir / "nope.txt";
  auto r = cli("fit --input \"" + missing.string() + "\" --years 1947:2006 --out \"" + dir.string() + "\"", dir);
  CHECK(r.code == 1);
  CHECK(r.output.find(missing.string()) != std::string::npos);

  const auto rates = write_rates(dir);
  r = cli("fit --format csv --input \"" + rates.string() + "\" --ages 60:64 --years 2006:1947 --out \"" +
              dir.string() + "\"",
          dir);
  CHECK(r.code == 1);
  CHECK(r.output.find("2006:1947") != std::string::npos);

  r = cli("backtest --format csv --input \"" + rates.string() +
              "\" --ages 60:64 --years 1990:2009 --horizons 20 --windows 10 --out \"" + dir.string() + "\"",
          dir);
  CHECK(r.code == 1);
  CHECK(r.output.find("t_l - t_1 + 1") != std::string::npos);
}

TEST_CASE("CLI fit, forecast and re-run") {
  const auto dir = scratch("pipeline");
  const auto rates = write_rates(dir);
  const auto a = dir / "a";
  const std::string data = "--format csv --input \"" + rates.string() + "\" --ages 60:64 --years 1990:2009 ";
  auto r = cli("fit --model mixed " + data + "--train-end 2004 --restarts 1 --out \"" + a.string() + "\"", a.parent_path());
  REQUIRE(r.code == 0);
  CHECK(r.output.find("log-likelihood:") != std::string::npos);
  const auto artifact = nlohmann::json::parse(slurp(a / "fit.json"));
  CHECK(artifact["converged"] == true);

  r = cli("forecast --model cbd --fit \"" + (a / "fit.json").string() + "\" --horizon 5 --out \"" + a.string() + "\"",
          dir);
  CHECK(r.code == 1);
  CHECK(r.output.find("does not match") != std::string::npos);

  r = cli("forecast --model mixed --fit \"" + (a / "fit.json").string() + "\" --horizon 5 --out \"" + a.string() + "\"",
          dir);
  REQUIRE(r.code == 0);
  const auto rows = read_csv(a / "forecast.csv");
  REQUIRE(rows.size() == 1 + 5 * 5);
  CHECK(rows[0] == std::vector<std::string>{"year", "age", "mean_logit", "q_mean", "lo95", "hi95"});
  CHECK(rows[1][0] == "2005");
  CHECK(rows.back()[0] == "2009");

  const auto f = mixed_fit_from_json(artifact);
  const auto fc = forecast(f, 5).out_of_sample(2004);
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const int i = std::stoi(rows[k][0]) - 2005, j = std::stoi(rows[k][1]) - 60;
    const double mean = std::stod(rows[k][2]), q = std::stod(rows[k][3]);
    const double lo = std::stod(rows[k][4]), hi = std::stod(rows[k][5]);
    CHECK(mean == fc.mean(i, j));
    CHECK(std::abs(q - 1.0 / (1.0 + std::exp(-mean))) <= 1e-15);
    const double sd = std::sqrt(fc.variance(i, j));
    CHECK(std::abs(hi - (mean + 1.959964 * sd)) <= 1e-6 * sd);
    CHECK(std::abs(lo - (mean - 1.959964 * sd)) <= 1e-6 * sd);
  }
  const auto plot = read_csv(a / "plot_data.csv");
  CHECK(plot.size() == 1 + 5 * (15 + 5));
  CHECK(plot[1][2] == "fitted");
  CHECK(plot[16][2] == "forecast");

  // A saved config reproduces the outputs byte for byte.
  const auto b = dir / "b";
  r = cli("run --config \"" + (a / "run_config.json").string() + "\" --out \"" + b.string() + "\"", dir);
  REQUIRE(r.code == 0);
  CHECK(slurp(b / "forecast.csv") == slurp(a / "forecast.csv"));
  CHECK(slurp(b / "plot_data.csv") == slurp(a / "plot_data.csv"));

  const auto c = dir / "c";
  r = cli("fit --model cbd " + data + "--out \"" + c.string() + "\"", dir);
  REQUIRE(r.code == 0);
  r = cli("forecast --model cbd --fit \"" + (c / "fit.json").string() + "\" --horizon 3 --out \"" + c.string() + "\"",
          dir);
  REQUIRE(r.code == 0);
  CHECK(read_csv(c / "forecast.csv").size() == 1 + 3 * 5);
}

TEST_CASE("CLI backtest output is deterministic") {
  const auto dir = scratch("backtest");
  const auto rates = write_rates(dir);
  const std::string args = "backtest --format csv --input \"" + rates.string() +
                           "\" --ages 60:64 --years 1990:2009 --horizons 1,3 --windows 2 --models cbd,mixed "
                           "--restarts 1 --country Synth --out ";
  const auto r1 = cli(args + "\"" + (dir / "one").string() + "\"", dir);
  const auto r2 = cli(args + "\"" + (dir / "two").string() + "\"", dir);
  REQUIRE(r1.code == 0);
  REQUIRE(r2.code == 0);
  const auto csv = slurp(dir / "one" / "backtest.csv");
  CHECK(csv == slurp(dir / "two" / "backtest.csv"));
  CHECK(slurp(dir / "one" / "backtest.json") == slurp(dir / "two" / "backtest.json"));
  CHECK(csv.find("cbd,Synth,total,1,all,") != std::string::npos);
  CHECK(csv.find("mixed,Synth,total,3,all,") != std::string::npos);
  CHECK(r1.output.find("| h | Country |") != std::string::npos);

  const auto r3 = cli("run --config \"" + (dir / "one" / "run_config.json").string() + "\" --out \"" +
                          (dir / "three").string() + "\"",
                      dir);
  REQUIRE(r3.code == 0);
  CHECK(slurp(dir / "three" / "backtest.csv") == csv);
}
