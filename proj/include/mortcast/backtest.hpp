#ifndef MORTCAST_BACKTEST_HPP
#define MORTCAST_BACKTEST_HPP

// Rolling-window out-of-sample evaluation. For horizon h and windows
// w = 0..W-1 the model is fit on t_1..t_{l+w} and scored on t_{l+w+h}, with
// t_l = t_n - h - (W - 1) so that the last target is the last data year.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mortcast/cbd_model.hpp"
#include "mortcast/error.hpp"
#include "mortcast/mixed_model.hpp"
#include "mortcast/mortality_data.hpp"
#include "mortcast/numeric_format.hpp"

namespace mortcast {

inline double rmse_curve(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual) {
  if (pred.size() != actual.size() || pred.size() == 0) {
    fail(ErrorCode::InvalidArgument, "rmse_curve: prediction has " + std::to_string(pred.size()) +
                                         " ages, actual has " + std::to_string(actual.size()));
  }
  return std::sqrt((pred - actual).squaredNorm() / static_cast<double>(pred.size()));
}

struct BacktestPlan {
  std::string country = "unknown";
  Sex sex = Sex::Total;
  IntRange ages{60, 89};
  IntRange years{1947, 2016};
  std::vector<int> horizons{5, 10, 15, 20};
  int windows = 10;
  std::vector<std::string> models{"mixed", "cbd"};
  int min_train_years = 3;

  int first_train_end(int h) const { return years.hi - h - (windows - 1); }

  void validate() const {
    if (windows < 1) fail(ErrorCode::InfeasiblePlan, "windows must be >= 1");
    if (horizons.empty()) fail(ErrorCode::InfeasiblePlan, "no horizons requested");
    if (models.empty()) fail(ErrorCode::InfeasiblePlan, "no models requested");
    for (int h : horizons) {
      if (h < 1) fail(ErrorCode::InfeasiblePlan, "horizon " + std::to_string(h) + " < 1");
      const int tl = first_train_end(h);
      if (tl - years.lo + 1 < min_train_years) {
        fail(ErrorCode::InfeasiblePlan,
             "horizon " + std::to_string(h) + ": first training window ends " + std::to_string(tl) +
                 ", violating t_l - t_1 + 1 >= " + std::to_string(min_train_years) + " (t_1 = " +
                 std::to_string(years.lo) + ", t_l = t_n - h - (windows - 1) = " + std::to_string(years.hi) +
                 " - " + std::to_string(h) + " - " + std::to_string(windows - 1) + ")");
      }
    }
  }
};

/// Forecasts the logit curve (one value per age) for year last_train_year + h.
using CurveForecaster = std::function<Eigen::VectorXd(const MortalitySurface& train, int h)>;

struct ModelRunner {
  std::string name;
  CurveForecaster forecast;
};

struct WindowResult {
  std::string model;
  int horizon = 0;
  int window = 0;
  int train_end = 0;
  int target_year = 0;
  bool ok = false;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd errors;  // actual - predicted per age
  std::string error;
};

struct PooledResult {
  std::string model;
  int horizon = 0;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  int windows_used = 0;
  int windows_excluded = 0;
};

struct BacktestReport {
  std::string country;
  Sex sex = Sex::Total;
  IntRange ages;
  IntRange years;
  std::uint64_t seed = 0;
  std::vector<WindowResult> windows;  // ordered (model, horizon, window)
  std::vector<PooledResult> pooled;   // ordered (model, horizon)
  double wall_seconds = 0.0;

  const PooledResult* find_pooled(const std::string& model, int h) const {
    for (const auto& p : pooled)
      if (p.model == model && p.horizon == h) return &p;
    return nullptr;
  }
};

/// Worker count from MORTCAST_THREADS, else hardware concurrency.
inline int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MORTCAST_THREADS")) {
    int v = 0;
    if (parse_int(trim(env), v) && v > 0) n = v;
  }
  return std::max(n, 1);
}

/// Root of the mean squared error pooled over every age of every usable window.
inline PooledResult pool_windows(const std::vector<WindowResult>& ws, const std::string& model, int h) {
  PooledResult p{model, h};
  double sse = 0.0;
  Eigen::Index cells = 0;
  for (const auto& w : ws) {
    if (w.model != model || w.horizon != h) continue;
    if (!w.ok) {
      ++p.windows_excluded;
      continue;
    }
    ++p.windows_used;
    sse += w.errors.squaredNorm();
    cells += w.errors.size();
  }
  if (cells > 0) p.rmse = std::sqrt(sse / static_cast<double>(cells));
  return p;
}

inline BacktestReport run_backtest(const BacktestPlan& plan, const MortalitySurface& surface,
                                   const std::vector<ModelRunner>& runners, std::uint64_t seed = 0,
                                   int threads = worker_count()) {
  plan.validate();
  if (surface.years().front() > plan.years.lo || surface.years().back() < plan.years.hi) {
    fail(ErrorCode::InfeasiblePlan, "data years do not cover the plan years " + std::to_string(plan.years.lo) +
                                        ":" + std::to_string(plan.years.hi));
  }
  if (surface.ages().front() != plan.ages.lo || surface.ages().back() != plan.ages.hi) {
    fail(ErrorCode::InfeasiblePlan, "surface ages do not match the plan ages");
  }
  const MortalitySurface data = surface.slice_years(plan.years.lo, plan.years.hi);

  std::vector<const ModelRunner*> selected;
  for (const auto& name : plan.models) {
    auto it = std::find_if(runners.begin(), runners.end(), [&](const ModelRunner& r) { return r.name == name; });
    if (it == runners.end()) fail(ErrorCode::InvalidArgument, "no runner for model '" + name + "'");
    selected.push_back(&*it);
  }
  std::sort(selected.begin(), selected.end(),
            [](const ModelRunner* a, const ModelRunner* b) { return a->name < b->name; });
  std::vector<int> horizons = plan.horizons;
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());

  std::vector<WindowResult> results;
  std::vector<const ModelRunner*> task_runner;
  for (const auto* r : selected)
    for (int h : horizons)
      for (int w = 0; w < plan.windows; ++w) {
        WindowResult res;
        res.model = r->name;
        res.horizon = h;
        res.window = w;
        res.train_end = plan.first_train_end(h) + w;
        res.target_year = res.train_end + h;
        results.push_back(res);
        task_runner.push_back(r);
      }

  // Each task owns one slot in `results`; the counter is the only shared state.
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k = next++; k < results.size(); k = next++) {
      auto& res = results[k];
      try {
        const auto train = data.slice_years(plan.years.lo, res.train_end);
        const Eigen::VectorXd pred = task_runner[k]->forecast(train, res.horizon);
        const Eigen::VectorXd actual = data.y().row(data.year_index(res.target_year)).transpose();
        res.rmse = rmse_curve(pred, actual);
        if (!std::isfinite(res.rmse)) fail(ErrorCode::NonFiniteValue, "non-finite forecast");
        res.errors = actual - pred;
        res.ok = true;
      } catch (const std::exception& e) {
        res.ok = false;
        res.error = e.what();
      }
    }
  };
  const int nthreads = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(results.size(), 1)));
  if (nthreads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
  }

  BacktestReport report;
  report.country = plan.country;
  report.sex = plan.sex;
  report.ages = plan.ages;
  report.years = plan.years;
  report.seed = seed;
  report.windows = std::move(results);
  for (const auto* r : selected)
    for (int h : horizons) report.pooled.push_back(pool_windows(report.windows, r->name, h));
  return report;
}

/// Runner for the mixed-effects model; forecasts the target-year curve.
inline ModelRunner mixed_runner(FitOptions opt) {
  return {"mixed", [opt](const MortalitySurface& train, int h) {
            const auto design = build_design(train.ages(), train.years());
            const auto f = fit(train.stacked(), design, opt);
            const auto fc = forecast(f, h);
            return fc.curve(train.years().back() + h);
          }};
}

struct CbdRunnerOptions {
  CbdOptions fit{};
  RwDivisor divisor = RwDivisor::Differences;
  std::optional<double> synth_exposure = 1e5;  // used when the surface has no counts
};

/// Deaths and exposures for a CBD fit: observed counts when present, otherwise
/// a constant exposure with deaths implied by the central rate.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> cbd_counts(const MortalitySurface& s,
                                                              std::optional<double> synth_exposure) {
  if (s.deaths() && s.exposure()) return {*s.deaths(), *s.exposure()};
  if (!synth_exposure) fail(ErrorCode::InvalidArgument, "CBD fit needs deaths/exposure or exposure synthesis");
  Eigen::MatrixXd E = Eigen::MatrixXd::Constant(s.n_years(), s.n_ages(), *synth_exposure);
  Eigen::MatrixXd D = (-(1.0 - s.q().array()).log()).matrix().cwiseProduct(E);
  return {D, E};
}

inline ModelRunner cbd_runner(CbdRunnerOptions opt = {}) {
  return {"cbd", [opt](const MortalitySurface& train, int h) {
            const auto [D, E] = cbd_counts(train, opt.synth_exposure);
            const auto f = fit_cbd(D, E, train.ages(), train.years(), opt.fit);
            const auto rw = estimate_rw(f, opt.divisor);
            return Eigen::VectorXd(forecast_cbd(f, rw, h).mean.row(h - 1).transpose());
          }};
}

enum class ReportFormat { Csv, Json, Markdown };

namespace detail {

inline std::string rmse_cell(double v) { return std::isfinite(v) ? format_full(v) : "NA"; }

inline std::string display_model(const std::string& m) {
  if (m == "cbd") return "CBD";
  if (m == "mixed") return "Mixed";
  return m;
}

}  // namespace detail

inline void emit_csv(const std::vector<BacktestReport>& reports, std::ostream& out) {
  out << "model,country,sex,horizon,window,rmse\n";
  std::vector<const BacktestReport*> ordered;
  for (const auto& r : reports) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) {
    return std::pair{a->country, to_string(a->sex)} < std::pair{b->country, to_string(b->sex)};
  });
  std::vector<std::string> models;
  std::vector<int> horizons;
  for (const auto* r : ordered)
    for (const auto& p : r->pooled) {
      if (std::find(models.begin(), models.end(), p.model) == models.end()) models.push_back(p.model);
      if (std::find(horizons.begin(), horizons.end(), p.horizon) == horizons.end()) horizons.push_back(p.horizon);
    }
  std::sort(models.begin(), models.end());
  std::sort(horizons.begin(), horizons.end());
  for (const auto& model : models)
    for (int h : horizons)
      for (const auto* r : ordered) {
        const auto* pooled = r->find_pooled(model, h);
        if (!pooled) continue;
        for (const auto& w : r->windows) {
          if (w.model != model || w.horizon != h) continue;
          out << model << ',' << r->country << ',' << to_string(r->sex) << ',' << h << ',' << w.window << ','
              << (w.ok ? detail::rmse_cell(w.rmse) : "NA") << '\n';
        }
        out << model << ',' << r->country << ',' << to_string(r->sex) << ',' << h << ",all,"
            << detail::rmse_cell(pooled->rmse) << '\n';
      }
}

inline nlohmann::json report_to_json(const BacktestReport& r) {
  nlohmann::json j;
  j["country"] = r.country;
  j["sex"] = std::string(to_string(r.sex));
  j["ages"] = {r.ages.lo, r.ages.hi};
  j["years"] = {r.years.lo, r.years.hi};
  j["seed"] = r.seed;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j["windows"] = nlohmann::json::array();
  for (const auto& w : r.windows) {
    nlohmann::json e{{"model", w.model},       {"horizon", w.horizon},         {"window", w.window},
                     {"train_end", w.train_end}, {"target_year", w.target_year}, {"ok", w.ok},
                     {"rmse", w.ok ? num(w.rmse) : nlohmann::json(nullptr)}};
    if (!w.ok) e["error"] = w.error;
    j["windows"].push_back(e);
  }
  j["pooled"] = nlohmann::json::array();
  for (const auto& p : r.pooled) {
    j["pooled"].push_back({{"model", p.model},
                           {"horizon", p.horizon},
                           {"rmse", num(p.rmse)},
                           {"windows_used", p.windows_used},
                           {"windows_excluded", p.windows_excluded}});
  }
  return j;
}

/// Layout of the comparison table: one block per horizon, one row per country,
/// and for each model the male, female and (M+F)/2 pooled RMSEs. The smallest
/// value across models in each column kind is bolded.
inline void emit_markdown(const std::vector<BacktestReport>& reports, std::ostream& out) {
  std::vector<std::string> models, countries;
  std::vector<int> horizons;
  for (const auto& r : reports) {
    if (std::find(countries.begin(), countries.end(), r.country) == countries.end()) countries.push_back(r.country);
    for (const auto& p : r.pooled) {
      if (std::find(models.begin(), models.end(), p.model) == models.end()) models.push_back(p.model);
      if (std::find(horizons.begin(), horizons.end(), p.horizon) == horizons.end()) horizons.push_back(p.horizon);
    }
  }
  std::sort(models.begin(), models.end());
  std::sort(countries.begin(), countries.end());
  std::sort(horizons.begin(), horizons.end());

  auto lookup = [&](const std::string& country, Sex sex, const std::string& model, int h) -> std::optional<double> {
    for (const auto& r : reports)
      if (r.country == country && r.sex == sex)
        if (const auto* p = r.find_pooled(model, h); p && std::isfinite(p->rmse)) return p->rmse;
    return std::nullopt;
  };

  out << "| h | Country |";
  for (const auto& m : models) {
    const auto d = detail::display_model(m);
    out << ' ' << d << " M | " << d << " F | " << d << " (M+F)/2 |";
  }
  out << "\n|---|---|";
  for (std::size_t k = 0; k < models.size(); ++k) out << "---:|---:|---:|";
  out << '\n';
  for (int h : horizons) {
    for (const auto& country : countries) {
      std::vector<std::array<std::optional<double>, 3>> vals;
      for (const auto& m : models) {
        const auto male = lookup(country, Sex::Male, m, h);
        const auto female = lookup(country, Sex::Female, m, h);
        std::optional<double> avg;
        if (male && female) avg = 0.5 * (*male + *female);
        vals.push_back({male, female, avg});
      }
      std::array<std::optional<double>, 3> best;
      for (int c = 0; c < 3; ++c)
        for (const auto& v : vals)
          if (v[c] && (!best[c] || *v[c] < *best[c])) best[c] = v[c];
      out << "| " << h << " | " << country << " |";
      for (const auto& v : vals) {
        for (int c = 0; c < 3; ++c) {
          if (!v[c]) {
            out << " - |";
          } else if (vals.size() > 1 && best[c] && *v[c] == *best[c]) {
            out << " **" << format_short(*v[c]) << "** |";
          } else {
            out << ' ' << format_short(*v[c]) << " |";
          }
        }
      }
      out << '\n';
    }
  }
}

inline std::string emit_report(const std::vector<BacktestReport>& reports, ReportFormat format) {
  std::ostringstream out;
  switch (format) {
    case ReportFormat::Csv: emit_csv(reports, out); break;
    case ReportFormat::Markdown: emit_markdown(reports, out); break;
    case ReportFormat::Json: {
      nlohmann::json doc{{"schema", "mortcast.backtest.v1"}, {"reports", nlohmann::json::array()}};
      for (const auto& r : reports) doc["reports"].push_back(report_to_json(r));
      out << doc.dump(2) << '\n';
      break;
    }
  }
  return out.str();
}

inline std::string emit_report(const BacktestReport& report, ReportFormat format) {
  return emit_report(std::vector<BacktestReport>{report}, format);
}

}  // namespace mortcast

#endif  // MORTCAST_BACKTEST_HPP
