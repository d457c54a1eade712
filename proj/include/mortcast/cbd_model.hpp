#ifndef MORTCAST_CBD_MODEL_HPP
#define MORTCAST_CBD_MODEL_HPP

// Three-factor CBD baseline: logit q = kappa1_t + kappa2_t (x - xbar) + gamma_{t-x},
// fitted by Poisson maximum likelihood and extrapolated with random walks.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mortcast/error.hpp"
#include "mortcast/forecast.hpp"
#include "mortcast/numeric_format.hpp"

namespace mortcast {

/// Parameter set on an n-year x m-age grid; gamma3 runs over cohorts
/// first_cohort .. first_cohort + n + m - 2.
struct CbdParams {
  std::vector<int> ages;
  std::vector<int> years;
  Eigen::VectorXd kappa1;
  Eigen::VectorXd kappa2;
  Eigen::VectorXd gamma3;
  double x_bar = 0.0;

  int n_years() const { return static_cast<int>(years.size()); }
  int n_ages() const { return static_cast<int>(ages.size()); }
  int first_cohort() const { return years.front() - ages.back(); }
  int n_cohorts() const { return n_years() + n_ages() - 1; }
  int cohort_col(int i, int j) const { return i + (n_ages() - 1 - j); }
  int cohort_label(int col) const { return first_cohort() + col; }

  double eta(int i, int j) const {
    return kappa1[i] + kappa2[i] * (ages[j] - x_bar) + gamma3[cohort_col(i, j)];
  }
};

inline CbdParams make_cbd_params(const std::vector<int>& ages, const std::vector<int>& years) {
  if (ages.empty() || years.empty()) fail(ErrorCode::InvalidArgument, "CBD grid needs ages and years");
  CbdParams p;
  p.ages = ages;
  p.years = years;
  p.kappa1 = Eigen::VectorXd::Zero(years.size());
  p.kappa2 = Eigen::VectorXd::Zero(years.size());
  p.gamma3 = Eigen::VectorXd::Zero(years.size() + ages.size() - 1);
  double s = 0.0;
  for (int x : ages) s += x;
  p.x_bar = s / static_cast<double>(ages.size());
  return p;
}

/// m(theta) = log(1 + exp(eta)), the central rate implied by logit q = eta.
inline double cbd_rate(double eta) { return eta > 30.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

inline Eigen::MatrixXd cbd_rates(const CbdParams& p) {
  Eigen::MatrixXd r(p.n_years(), p.n_ages());
  for (int i = 0; i < p.n_years(); ++i)
    for (int j = 0; j < p.n_ages(); ++j) r(i, j) = cbd_rate(p.eta(i, j));
  return r;
}

/// The invariance map of the model: every fitted rate is unchanged.
inline CbdParams apply_identifiability_transform(const CbdParams& p, double phi1, double phi2) {
  CbdParams out = p;
  for (int i = 0; i < p.n_years(); ++i) {
    out.kappa1[i] = p.kappa1[i] + phi1 + phi2 * (p.years[i] - p.x_bar);
    out.kappa2[i] = p.kappa2[i] - phi2;
  }
  for (int c = 0; c < p.n_cohorts(); ++c) out.gamma3[c] = p.gamma3[c] - phi1 - phi2 * p.cohort_label(c);
  return out;
}

namespace detail {

inline double poisson_cell(double D, double E, double eta) {
  const double m = cbd_rate(eta);
  if (!std::isfinite(m)) fail(ErrorCode::NonFiniteValue, "non-finite CBD rate for eta = " + format_full(eta));
  const double log_term = D > 0.0 ? D * std::log(E * m) : 0.0;
  return log_term - E * m - std::lgamma(D + 1.0);
}

inline void check_counts(const CbdParams& p, const Eigen::MatrixXd& D, const Eigen::MatrixXd& E) {
  if (D.rows() != p.n_years() || D.cols() != p.n_ages() || E.rows() != p.n_years() || E.cols() != p.n_ages()) {
    fail(ErrorCode::InvalidArgument, "deaths/exposure grids do not match the parameter grid");
  }
  for (Eigen::Index i = 0; i < E.rows(); ++i)
    for (Eigen::Index j = 0; j < E.cols(); ++j) {
      if (!(E(i, j) > 0.0) || !std::isfinite(E(i, j))) {
        fail(ErrorCode::InvalidArgument, "zero or invalid exposure at year " + std::to_string(p.years[i]) +
                                             ", age " + std::to_string(p.ages[j]));
      }
      if (!(D(i, j) >= 0.0) || !std::isfinite(D(i, j))) {
        fail(ErrorCode::InvalidArgument, "negative or invalid deaths at year " + std::to_string(p.years[i]) +
                                             ", age " + std::to_string(p.ages[j]));
      }
    }
}

}  // namespace detail

/// Poisson log-likelihood sum D log(E m) - E m - log D!; `weights` (0/1 per
/// cell) drops cells from the sum when given.
inline double cbd_poisson_loglik(const CbdParams& p, const Eigen::MatrixXd& D, const Eigen::MatrixXd& E,
                                 const Eigen::MatrixXd* weights = nullptr) {
  detail::check_counts(p, D, E);
  double ll = 0.0;
  for (int i = 0; i < p.n_years(); ++i)
    for (int j = 0; j < p.n_ages(); ++j) {
      if (weights && (*weights)(i, j) == 0.0) continue;
      ll += detail::poisson_cell(D(i, j), E(i, j), p.eta(i, j));
    }
  return ll;
}

struct CbdOptions {
  int max_sweeps = 1000;
  double tolerance = 1e-8;
  int min_cohort_cells = 3;  // sparser cohorts are dropped from the likelihood, gamma = 0
};

struct CbdFit {
  CbdParams params;
  std::vector<bool> cohort_included;  // membership of the constraint set C
  double loglik = 0.0;
  std::vector<double> loglik_trace;
  std::vector<std::array<double, 2>> constraint_trace;  // residuals after every sweep
  double sum_gamma = 0.0;           // sum over C of gamma
  double sum_cohort_gamma = 0.0;    // sum over C of (t - x) gamma
  bool converged = false;
  int sweeps = 0;

  int last_included_cohort_col() const {
    for (int c = static_cast<int>(cohort_included.size()) - 1; c >= 0; --c)
      if (cohort_included[c]) return c;
    return -1;
  }
  int first_included_cohort_col() const {
    for (int c = 0; c < static_cast<int>(cohort_included.size()); ++c)
      if (cohort_included[c]) return c;
    return -1;
  }
};

namespace detail {

// Subtracts the least-squares line in the cohort label from gamma over C and
// moves it into kappa via the invariance map.
inline void impose_cohort_constraints(CbdParams& p, const std::vector<bool>& included) {
  double n = 0.0, sc = 0.0;
  for (int c = 0; c < p.n_cohorts(); ++c)
    if (included[c]) { n += 1.0; sc += p.cohort_label(c); }
  if (n < 2.0) return;
  const double c_mean = sc / n;
  double sxx = 0.0, sxy = 0.0, sy = 0.0;
  for (int c = 0; c < p.n_cohorts(); ++c) {
    if (!included[c]) continue;
    const double dc = p.cohort_label(c) - c_mean;
    sxx += dc * dc;
    sxy += dc * p.gamma3[c];
    sy += p.gamma3[c];
  }
  const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
  const double intercept = sy / n - slope * c_mean;
  p = apply_identifiability_transform(p, intercept, slope);
  for (int c = 0; c < p.n_cohorts(); ++c)
    if (!included[c]) p.gamma3[c] = 0.0;
}

inline std::array<double, 2> constraint_residuals(const CbdParams& p, const std::vector<bool>& included) {
  double s0 = 0.0, s1 = 0.0;
  for (int c = 0; c < p.n_cohorts(); ++c)
    if (included[c]) {
      s0 += p.gamma3[c];
      s1 += p.cohort_label(c) * p.gamma3[c];
    }
  return {s0, s1};
}

// Score and a positive curvature for one cell, with respect to eta.
struct CellDerivs {
  double score;
  double info;
};

inline CellDerivs cell_derivs(double D, double E, double eta) {
  const double m = cbd_rate(eta);
  const double s = 1.0 / (1.0 + std::exp(-eta));  // dm/deta
  const double resid = D / m - E;
  const double observed = D * s * s / (m * m) - resid * s * (1.0 - s);
  const double fisher = E * s * s / m;
  return {resid * s, observed > 0.0 ? observed : fisher};
}

}  // namespace detail

/// Blockwise Newton maximization of the Poisson likelihood: per-year
/// (kappa1, kappa2) blocks, then per-cohort gamma, then the two cohort
/// constraints are re-imposed after every sweep.
inline CbdFit fit_cbd(const Eigen::MatrixXd& D, const Eigen::MatrixXd& E, const std::vector<int>& ages,
                      const std::vector<int>& years, const CbdOptions& opt = {}) {
  CbdParams p = make_cbd_params(ages, years);
  detail::check_counts(p, D, E);
  const int n = p.n_years(), m = p.n_ages(), nc = p.n_cohorts();

  std::vector<int> cells_per_cohort(nc, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) ++cells_per_cohort[p.cohort_col(i, j)];
  std::vector<bool> included(nc);
  for (int c = 0; c < nc; ++c) included[c] = cells_per_cohort[c] >= opt.min_cohort_cells;
  Eigen::MatrixXd w(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) w(i, j) = included[p.cohort_col(i, j)] ? 1.0 : 0.0;

  // Start from per-year least squares on the empirical logits.
  for (int i = 0; i < n; ++i) {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, cnt = 0.0;
    for (int j = 0; j < m; ++j) {
      const double rate = std::max(D(i, j), 0.5) / E(i, j);
      const double q = std::clamp(-std::expm1(-rate), 1e-10, 1.0 - 1e-10);
      const double yv = std::log(q / (1.0 - q));
      const double xc = ages[j] - p.x_bar;
      sx += xc; sy += yv; sxx += xc * xc; sxy += xc * yv; cnt += 1.0;
    }
    const double denom = sxx - sx * sx / cnt;
    p.kappa2[i] = denom > 0.0 ? (sxy - sx * sy / cnt) / denom : 0.0;
    p.kappa1[i] = (sy - p.kappa2[i] * sx) / cnt;
  }

  auto year_ll = [&](const CbdParams& q, int i) {
    double s = 0.0;
    for (int j = 0; j < m; ++j)
      if (w(i, j) != 0.0) s += detail::poisson_cell(D(i, j), E(i, j), q.eta(i, j));
    return s;
  };
  std::vector<std::vector<std::pair<int, int>>> cohort_cells(nc);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) cohort_cells[p.cohort_col(i, j)].push_back({i, j});
  auto cohort_ll = [&](const CbdParams& q, int c) {
    double s = 0.0;
    for (auto [i, j] : cohort_cells[c]) s += detail::poisson_cell(D(i, j), E(i, j), q.eta(i, j));
    return s;
  };

  CbdFit out;
  out.cohort_included = included;
  double ll = cbd_poisson_loglik(p, D, E, &w);
  out.loglik_trace.push_back(ll);

  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    for (int i = 0; i < n; ++i) {
      double g1 = 0.0, g2 = 0.0, h11 = 0.0, h12 = 0.0, h22 = 0.0;
      for (int j = 0; j < m; ++j) {
        if (w(i, j) == 0.0) continue;
        const auto dv = detail::cell_derivs(D(i, j), E(i, j), p.eta(i, j));
        const double xc = ages[j] - p.x_bar;
        g1 += dv.score; g2 += dv.score * xc;
        h11 += dv.info; h12 += dv.info * xc; h22 += dv.info * xc * xc;
      }
      const double det = h11 * h22 - h12 * h12;
      double d1 = 0.0, d2 = 0.0;
      if (det > 1e-300 * std::max(1.0, h11 * h22)) {
        d1 = (h22 * g1 - h12 * g2) / det;
        d2 = (h11 * g2 - h12 * g1) / det;
      } else if (h11 > 0.0) {
        d1 = g1 / h11;
      }
      const double before = year_ll(p, i);
      const double k1 = p.kappa1[i], k2 = p.kappa2[i];
      for (double step = 1.0; step > 1e-10; step *= 0.5) {
        p.kappa1[i] = k1 + step * d1;
        p.kappa2[i] = k2 + step * d2;
        const double after = year_ll(p, i);
        if (std::isfinite(after) && after >= before) break;
        p.kappa1[i] = k1;
        p.kappa2[i] = k2;
      }
    }
    for (int c = 0; c < nc; ++c) {
      if (!included[c]) continue;
      double g = 0.0, h = 0.0;
      for (auto [i, j] : cohort_cells[c]) {
        const auto dv = detail::cell_derivs(D(i, j), E(i, j), p.eta(i, j));
        g += dv.score;
        h += dv.info;
      }
      if (!(h > 0.0)) continue;
      const double delta = g / h;
      const double before = cohort_ll(p, c);
      const double g0 = p.gamma3[c];
      for (double step = 1.0; step > 1e-10; step *= 0.5) {
        p.gamma3[c] = g0 + step * delta;
        const double after = cohort_ll(p, c);
        if (std::isfinite(after) && after >= before) break;
        p.gamma3[c] = g0;
      }
    }
    detail::impose_cohort_constraints(p, included);
    out.constraint_trace.push_back(detail::constraint_residuals(p, included));

    const double ll_new = cbd_poisson_loglik(p, D, E, &w);
    out.loglik_trace.push_back(ll_new);
    out.sweeps = sweep + 1;
    const double rel = std::abs(ll_new - ll) / std::max(std::abs(ll), 1.0);
    ll = ll_new;
    if (rel < opt.tolerance) {
      out.converged = true;
      break;
    }
  }

  out.params = std::move(p);
  out.loglik = ll;
  const auto res = detail::constraint_residuals(out.params, included);
  out.sum_gamma = res[0];
  out.sum_cohort_gamma = res[1];
  return out;
}

enum class RwDivisor { Differences, DifferencesMinusOne };

/// Random-walk-with-drift estimates: bivariate for (kappa1, kappa2),
/// univariate for the cohort effects over C.
struct RwDrift {
  Eigen::Vector2d d = Eigen::Vector2d::Zero();
  Eigen::Matrix2d V = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d K = Eigen::Matrix2d::Zero();  // upper triangular, V = K' K
  double mu = 0.0;
  double var_dgamma = 0.0;
};

/// Upper-triangular K with K' K = V for a symmetric PSD 2x2 V (zero pivots allowed).
inline Eigen::Matrix2d cholesky_upper_psd(const Eigen::Matrix2d& V) {
  const double scale = std::max({std::abs(V(0, 0)), std::abs(V(1, 1)), 1e-300});
  const double tol = 1e-12 * scale;
  const double det = V(0, 0) * V(1, 1) - V(0, 1) * V(1, 0);
  if (V(0, 0) < -tol || V(1, 1) < -tol || det < -tol * scale || std::abs(V(0, 1) - V(1, 0)) > tol) {
    fail(ErrorCode::FactorizationFailed, "random-walk covariance is not positive semi-definite");
  }
  Eigen::Matrix2d K = Eigen::Matrix2d::Zero();
  if (V(0, 0) > tol) {
    K(0, 0) = std::sqrt(V(0, 0));
    K(0, 1) = V(0, 1) / K(0, 0);
    K(1, 1) = std::sqrt(std::max(V(1, 1) - K(0, 1) * K(0, 1), 0.0));
  } else {
    K(1, 1) = std::sqrt(std::max(V(1, 1), 0.0));
  }
  return K;
}

inline RwDrift estimate_rw(const CbdFit& fit, RwDivisor divisor = RwDivisor::Differences) {
  const auto& p = fit.params;
  const int n = p.n_years();
  if (n < 3) fail(ErrorCode::InvalidArgument, "random-walk estimation needs at least 3 years");
  const int nd = n - 1;
  const double denom = divisor == RwDivisor::Differences ? nd : nd - 1;
  RwDrift rw;
  Eigen::MatrixXd diffs(nd, 2);
  for (int i = 1; i < n; ++i) {
    diffs(i - 1, 0) = p.kappa1[i] - p.kappa1[i - 1];
    diffs(i - 1, 1) = p.kappa2[i] - p.kappa2[i - 1];
  }
  rw.d = diffs.colwise().mean().transpose();
  const Eigen::MatrixXd centered = diffs.rowwise() - rw.d.transpose();
  rw.V = centered.transpose() * centered / denom;
  rw.K = cholesky_upper_psd(rw.V);

  const int c0 = fit.first_included_cohort_col(), c1 = fit.last_included_cohort_col();
  if (c0 >= 0 && c1 > c0) {
    const int ng = c1 - c0;
    Eigen::VectorXd dg(ng);
    for (int c = c0 + 1; c <= c1; ++c) dg[c - c0 - 1] = p.gamma3[c] - p.gamma3[c - 1];
    rw.mu = dg.mean();
    const double gden = divisor == RwDivisor::Differences ? ng : std::max(ng - 1, 1);
    rw.var_dgamma = (dg.array() - rw.mu).square().sum() / gden;
  }
  return rw;
}

/// Variance of kappa1 + kappa2 (x - xbar) after k random-walk steps: k [1, xc] V [1, xc]'.
inline double cbd_kappa_variance(const RwDrift& rw, int k, double xc) {
  const Eigen::Vector2d a(1.0, xc);
  return static_cast<double>(k) * a.dot(rw.V * a);
}

/// Point forecasts and normal intervals for the h years after the fit window.
inline Forecast forecast_cbd(const CbdFit& fit, const RwDrift& rw, int h, double alpha = 0.05) {
  if (h < 1) fail(ErrorCode::InvalidArgument, "forecast horizon must be >= 1");
  normal_quantile_two_sided(alpha);
  const auto& p = fit.params;
  const int n = p.n_years(), m = p.n_ages();
  const int c_first = fit.first_included_cohort_col();
  const int c_last = fit.last_included_cohort_col();
  if (c_last < 0) fail(ErrorCode::InvalidArgument, "fit has no estimated cohorts");

  Forecast out;
  out.horizon = h;
  out.alpha = alpha;
  out.ages = p.ages;
  for (int k = 1; k <= h; ++k) out.years.push_back(p.years.back() + k);
  out.mean.resize(h, m);
  out.variance.resize(h, m);
  for (int k = 1; k <= h; ++k) {
    const double k1 = p.kappa1[n - 1] + k * rw.d[0];
    const double k2 = p.kappa2[n - 1] + k * rw.d[1];
    for (int j = 0; j < m; ++j) {
      const double xc = p.ages[j] - p.x_bar;
      const int col = (n - 1 + k) + (m - 1 - j);  // cohort column on the fitted axis
      if (col < c_first) {
        fail(ErrorCode::OutOfRange, "cohort " + std::to_string(p.cohort_label(col)) + " has no fitted value");
      }
      double gamma = 0.0, gvar = 0.0;
      if (col <= c_last) {
        gamma = p.gamma3[col];
      } else {
        const int steps = col - c_last;
        gamma = p.gamma3[c_last] + steps * rw.mu;
        gvar = steps * rw.var_dgamma;
      }
      out.mean(k - 1, j) = k1 + k2 * xc + gamma;
      out.variance(k - 1, j) = cbd_kappa_variance(rw, k, xc) + gvar;
    }
  }
  return out;
}

}  // namespace mortcast

#endif  // MORTCAST_CBD_MODEL_HPP
