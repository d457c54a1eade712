#ifndef MORTCAST_MIXED_MODEL_HPP
#define MORTCAST_MIXED_MODEL_HPP

// Mixed-effects time-series mortality model: fixed linear time trend plus
// random age-intercept, age-slope and cohort effects with squared-exponential
// priors. Fitting maximizes the Gaussian marginal likelihood N(T beta, V(theta)).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mortcast/design_kernels.hpp"
#include "mortcast/error.hpp"
#include "mortcast/forecast.hpp"

namespace mortcast {

/// How Var(beta) is reported. NoiseScaled scales the GLS covariance by the
/// fitted noise variance; Gls is the textbook (T' V^-1 T)^-1.
enum class VarBetaPolicy { NoiseScaled, Gls };

struct FixedEffects {
  double beta1 = 0.0;
  double beta2 = 0.0;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();

  Eigen::Vector2d vector() const { return {beta1, beta2}; }
};

struct RandomEffects {
  Eigen::VectorXd gamma1;  // per age
  Eigen::VectorXd gamma2;  // per age
  Eigen::VectorXd gamma3;  // per cohort
  Eigen::MatrixXd cov1;
  Eigen::MatrixXd cov2;
  Eigen::MatrixXd cov3;
};

struct FitOptions {
  int restarts = 3;
  std::uint64_t seed = 0;
  int max_iterations = 500;
  double tolerance = 1e-8;  // relative log-likelihood change
  ComponentMask mask{};
  VarBetaPolicy var_beta = VarBetaPolicy::NoiseScaled;
  std::optional<KernelParams> init;  // replaces the data-driven starting point
};

struct MixedFit {
  KernelParams params;
  FixedEffects fixed;
  RandomEffects random;
  std::vector<double> loglik_trace;
  DesignSet design;
  Eigen::VectorXd y;
  ComponentMask mask;
  VarBetaPolicy var_beta = VarBetaPolicy::NoiseScaled;
  bool converged = false;
  int iterations = 0;
  int best_restart = 0;
  std::vector<std::string> at_bound;  // parameters left on an optimizer bound

  double loglik() const { return loglik_trace.empty() ? -std::numeric_limits<double>::infinity() : loglik_trace.back(); }
};

namespace detail {

inline Eigen::VectorXd residual(const Eigen::VectorXd& y, const DesignSet& d, const Eigen::Vector2d& beta) {
  if (y.size() != d.n_rows()) fail(ErrorCode::InvalidArgument, "observation vector does not match design rows");
  return y - d.T * beta;
}

/// Z_k' v for each of the three incidence blocks, computed from row incidence.
struct Projected {
  Eigen::VectorXd by_age;
  Eigen::VectorXd by_age_time;
  Eigen::VectorXd by_cohort;
};

inline Projected project(const DesignSet& d, const Eigen::VectorXd& v) {
  Projected p{Eigen::VectorXd::Zero(d.n_ages()), Eigen::VectorXd::Zero(d.n_ages()),
              Eigen::VectorXd::Zero(d.n_cohorts())};
  for (int r = 0; r < d.n_rows(); ++r) {
    p.by_age[d.row_age[r]] += v[r];
    p.by_age_time[d.row_age[r]] += d.row_time[r] * v[r];
    p.by_cohort[d.row_cohort[r]] += v[r];
  }
  return p;
}

/// V(theta) factorized together with the GLS pieces that depend on it.
struct FactorizedModel {
  VFactor factor;
  Eigen::Matrix2d TtViT;
  Eigen::Vector2d beta_hat;

  FactorizedModel(const Eigen::VectorXd& y, const DesignSet& d, const KernelParams& p, const ComponentMask& mask)
      : factor(factorize_V(assemble_V(p, d, mask))) {
    const Eigen::MatrixXd ViT = factor.solve(Eigen::MatrixXd(d.T));
    TtViT = d.T.transpose() * ViT;
    const Eigen::Vector2d rhs = ViT.transpose() * y;
    Eigen::LDLT<Eigen::Matrix2d> ldlt(TtViT);
    if (ldlt.info() != Eigen::Success || !(std::abs(TtViT.determinant()) > 1e-300)) {
      fail(ErrorCode::InvalidArgument, "T' V^-1 T is singular (need at least two distinct years)");
    }
    beta_hat = ldlt.solve(rhs);
  }

  double quad_form(const Eigen::VectorXd& r) const {
    return factor.llt.matrixL().solve(r).squaredNorm();
  }

  double loglik(const Eigen::VectorXd& r) const {
    const double N = static_cast<double>(r.size());
    return -0.5 * factor.log_det() - 0.5 * quad_form(r) - 0.5 * N * std::log(2.0 * std::numbers::pi);
  }

  /// Z_k' V^-1 Z_k for the three blocks.
  std::array<Eigen::MatrixXd, 3> projected_precision(const DesignSet& d) const {
    const auto L = factor.llt.matrixL();
    std::array<Eigen::MatrixXd, 3> M;
    const Eigen::MatrixXd* Z[3] = {&d.Z1, &d.Z2, &d.Z3};
    for (int k = 0; k < 3; ++k) {
      const Eigen::MatrixXd W = L.solve(*Z[k]);
      M[k] = W.transpose() * W;
    }
    return M;
  }
};

}  // namespace detail

inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::Vector2d& beta, const KernelParams& params,
                             const DesignSet& design, const ComponentMask& mask = {}) {
  const detail::FactorizedModel fm(y, design, params, mask);
  return fm.loglik(detail::residual(y, design, beta));
}

inline Eigen::Vector2d gls_beta(const Eigen::VectorXd& y, const KernelParams& params, const DesignSet& design,
                                const ComponentMask& mask = {}) {
  return detail::FactorizedModel(y, design, params, mask).beta_hat;
}

namespace detail {

/// Analytic gradient of the log-likelihood with respect to (h1, l1, h2, l2, c, s, sigma2).
inline std::array<double, 7> gradient(const FactorizedModel& fm, const Eigen::VectorXd& r, const KernelParams& p,
                                      const DesignSet& d, const ComponentMask& mask) {
  const int N = d.n_rows();
  const auto L = fm.factor.llt.matrixL();
  const Eigen::MatrixXd Linv = L.solve(Eigen::MatrixXd::Identity(N, N));
  const Eigen::VectorXd alpha = fm.factor.solve(r);
  const Projected u = project(d, alpha);

  const auto K = build_covariances(p, d);
  const auto ages = d.age_labels();
  const auto cohorts = d.cohort_labels();
  const Eigen::MatrixXd D_age = squared_distances(ages, ages);
  const Eigen::MatrixXd D_coh = squared_distances(cohorts, cohorts);

  // For each block: dLL = -1/2 tr(M dK) + 1/2 u' dK u, with M = Z' V^-1 Z, u = Z' alpha.
  auto block_grad = [](const Eigen::MatrixXd& M, const Eigen::VectorXd& uk, const Eigen::MatrixXd& dK) {
    return -0.5 * M.cwiseProduct(dK).sum() + 0.5 * uk.dot(dK * uk);
  };

  std::array<double, 7> g{};
  const Eigen::MatrixXd* Z[3] = {&d.Z1, &d.Z2, &d.Z3};
  const bool on[3] = {mask.age_intercept, mask.age_slope, mask.cohort};
  const Eigen::MatrixXd* Kk[3] = {&K.K1, &K.K2, &K.K3};
  const Eigen::VectorXd* uk[3] = {&u.by_age, &u.by_age_time, &u.by_cohort};
  const Eigen::MatrixXd* Dk[3] = {&D_age, &D_age, &D_coh};
  const double amp[3] = {p.h1, p.h2, p.c};
  const double len[3] = {p.l1, p.l2, p.s};
  for (int k = 0; k < 3; ++k) {
    if (!on[k]) continue;
    const Eigen::MatrixXd W = Linv * (*Z[k]);
    const Eigen::MatrixXd M = W.transpose() * W;
    const Eigen::MatrixXd dK_amp = (2.0 / amp[k]) * (*Kk[k]);
    const Eigen::MatrixXd dK_len = Kk[k]->cwiseProduct(*Dk[k]) / (2.0 * len[k] * len[k]);
    g[2 * k] = block_grad(M, *uk[k], dK_amp);
    g[2 * k + 1] = block_grad(M, *uk[k], dK_len);
  }
  g[6] = -0.5 * Linv.squaredNorm() + 0.5 * alpha.squaredNorm();
  return g;
}

}  // namespace detail

inline std::array<double, 7> grad_loglik(const Eigen::VectorXd& y, const Eigen::Vector2d& beta,
                                         const KernelParams& params, const DesignSet& design,
                                         const ComponentMask& mask = {}) {
  const detail::FactorizedModel fm(y, design, params, mask);
  return detail::gradient(fm, detail::residual(y, design, beta), params, design, mask);
}

/// Data-driven starting point: OLS trend, half the OLS residual variance as
/// noise, amplitudes at its square root, length-scales from the axis ranges.
inline KernelParams default_init(const Eigen::VectorXd& y, const DesignSet& d) {
  const Eigen::Vector2d beta = d.T.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd r = y - d.T * beta;
  const double resid_var = r.squaredNorm() / static_cast<double>(r.size());
  const double total_var = (y.array() - y.mean()).square().mean();
  const double floor = 1e-6 * std::max(total_var, 1e-12);
  const double s2 = std::max(0.5 * resid_var, floor);
  const double amp = std::sqrt(s2);
  const double age_range = static_cast<double>(d.ages.back() - d.ages.front());
  const double cohort_range = static_cast<double>(d.n_cohorts() - 1);
  const double l_age = std::max(age_range * age_range, 1.0);
  const double l_coh = std::max(cohort_range * cohort_range / 4.0, 1.0);
  return {amp, l_age, amp, l_age, amp, l_coh, s2};
}

namespace detail {

struct Bounds {
  std::array<double, 7> lo;
  std::array<double, 7> hi;
};

// Box in log space keeping V well defined; generous relative to the data scale.
inline Bounds log_bounds(const Eigen::VectorXd& y, const DesignSet& d) {
  const double total_var = std::max((y.array() - y.mean()).square().mean(), 1e-12);
  const double sd = std::sqrt(total_var);
  const double age_range = std::max(static_cast<double>(d.ages.back() - d.ages.front()), 1.0);
  const double coh_range = std::max(static_cast<double>(d.n_cohorts() - 1), 1.0);
  const double amp_lo = std::log(1e-8 * sd), amp_hi = std::log(1e3 * sd);
  Bounds b;
  b.lo = {amp_lo, std::log(1e-3), amp_lo, std::log(1e-3), amp_lo, std::log(1e-3), std::log(1e-10 * total_var)};
  b.hi = {amp_hi, std::log(1e6 * age_range * age_range), amp_hi, std::log(1e6 * age_range * age_range),
          amp_hi, std::log(1e6 * coh_range * coh_range), std::log(1e3 * total_var)};
  return b;
}

struct RunResult {
  KernelParams params;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> at_bound;
};

/// Quasi-Newton ascent in log-parameters with projected backtracking line
/// search; beta is profiled out exactly at every evaluation.
inline RunResult optimize(const Eigen::VectorXd& y, const DesignSet& d, const KernelParams& init,
                          const FitOptions& opt) {
  const Bounds bounds = log_bounds(y, d);
  std::vector<int> active;
  const bool on[3] = {opt.mask.age_intercept, opt.mask.age_slope, opt.mask.cohort};
  for (int k = 0; k < 3; ++k)
    if (on[k]) { active.push_back(2 * k); active.push_back(2 * k + 1); }
  active.push_back(6);
  const int k = static_cast<int>(active.size());

  std::array<double, 7> base{};
  {
    const auto a = init.to_array();
    for (int i = 0; i < 7; ++i) base[i] = std::clamp(std::log(a[i]), bounds.lo[i], bounds.hi[i]);
  }
  auto to_params = [&](const Eigen::VectorXd& x) {
    std::array<double, 7> a = base;
    for (int i = 0; i < k; ++i) a[active[i]] = x[i];
    for (auto& v : a) v = std::exp(v);
    return KernelParams::from_array(a);
  };
  auto clip = [&](Eigen::VectorXd x) {
    for (int i = 0; i < k; ++i) x[i] = std::clamp(x[i], bounds.lo[active[i]], bounds.hi[active[i]]);
    return x;
  };

  // Negative log-likelihood and its gradient in log space.
  struct Eval {
    bool ok = false;
    double f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd g;
  };
  auto evaluate = [&](const Eigen::VectorXd& x, bool with_grad) {
    Eval e;
    try {
      const KernelParams p = to_params(x);
      const FactorizedModel fm(y, d, p, opt.mask);
      const Eigen::VectorXd r = y - d.T * fm.beta_hat;
      e.f = -fm.loglik(r);
      if (!std::isfinite(e.f)) return Eval{};
      if (with_grad) {
        const auto g = gradient(fm, r, p, d, opt.mask);
        const auto a = p.to_array();
        e.g.resize(k);
        for (int i = 0; i < k; ++i) e.g[i] = -g[active[i]] * a[active[i]];
        if (!e.g.allFinite()) return Eval{};
      }
      e.ok = true;
    } catch (const Error&) {
      return Eval{};
    }
    return e;
  };

  Eigen::VectorXd x(k);
  for (int i = 0; i < k; ++i) x[i] = base[active[i]];
  Eval cur = evaluate(x, true);
  if (!cur.ok) fail(ErrorCode::NonFiniteValue, "log-likelihood is not finite at the initial parameters");

  RunResult res;
  res.trace.push_back(-cur.f);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(k, k);
  bool fresh_H = true;
  constexpr double max_step = 3.0;

  auto free_mask = [&](const Eigen::VectorXd& xv, const Eigen::VectorXd& g) {
    std::vector<bool> free(k, true);
    for (int i = 0; i < k; ++i) {
      const double lo = bounds.lo[active[i]], hi = bounds.hi[active[i]];
      if ((xv[i] <= lo + 1e-12 && g[i] > 0.0) || (xv[i] >= hi - 1e-12 && g[i] < 0.0)) free[i] = false;
    }
    return free;
  };

  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    const auto free = free_mask(x, cur.g);
    Eigen::VectorXd gf = cur.g;
    for (int i = 0; i < k; ++i)
      if (!free[i]) gf[i] = 0.0;
    if (gf.lpNorm<Eigen::Infinity>() <= 1e-12 * (1.0 + std::abs(cur.f))) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd dir = -(H * gf);
    for (int i = 0; i < k; ++i)
      if (!free[i]) dir[i] = 0.0;
    if (dir.dot(gf) >= 0.0) {
      H.setIdentity();
      fresh_H = true;
      dir = -gf;
    }
    const double big = dir.lpNorm<Eigen::Infinity>();
    if (big > max_step) dir *= max_step / big;

    bool accepted = false;
    Eigen::VectorXd x_new;
    Eval next;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      double step = 1.0;
      for (int ls = 0; ls < 40; ++ls, step *= 0.5) {
        x_new = clip(x + step * dir);
        const Eigen::VectorXd disp = x_new - x;
        if (disp.lpNorm<Eigen::Infinity>() < 1e-14) break;
        next = evaluate(x_new, false);
        if (next.ok && next.f <= cur.f + 1e-4 * cur.g.dot(disp) && next.f <= cur.f) {
          accepted = true;
          break;
        }
      }
      if (!accepted && !fresh_H) {
        H.setIdentity();
        fresh_H = true;
        dir = -gf;
        const double b2 = dir.lpNorm<Eigen::Infinity>();
        if (b2 > max_step) dir *= max_step / b2;
      } else {
        break;
      }
    }
    if (!accepted) {
      // No ascent direction left: a stationary point up to numerical precision.
      res.converged = gf.lpNorm<Eigen::Infinity>() <= 1e-4 * (1.0 + std::abs(cur.f));
      break;
    }
    next = evaluate(x_new, true);
    if (!next.ok) break;
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = next.g - cur.g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (fresh_H) {
        H *= sy / yv.squaredNorm();
        fresh_H = false;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    const double rel = std::abs(next.f - cur.f) / std::max(std::abs(cur.f), 1.0);
    x = x_new;
    cur = next;
    res.trace.push_back(-cur.f);
    if (rel < opt.tolerance) {
      res.converged = true;
      ++it;
      break;
    }
  }
  res.iterations = it;
  res.params = to_params(x);
  for (int i = 0; i < k; ++i) {
    if (x[i] <= bounds.lo[active[i]] + 1e-9 || x[i] >= bounds.hi[active[i]] - 1e-9) {
      res.at_bound.push_back(KernelParams::names()[active[i]]);
    }
  }
  return res;
}

}  // namespace detail

inline RandomEffects blup(const Eigen::VectorXd& y, const MixedFit& fit);

/// Maximizes the marginal likelihood from the default start and from
/// restarts with perturbed length-scales; keeps the best run.
inline MixedFit fit(const Eigen::VectorXd& y, const DesignSet& design, const FitOptions& opt = {}) {
  if (design.horizon != 0) fail(ErrorCode::InvalidArgument, "fit expects the training design");
  if (y.size() != design.n_rows()) fail(ErrorCode::InvalidArgument, "observation vector does not match design");
  if (!y.allFinite()) fail(ErrorCode::NonFiniteValue, "observations contain non-finite values");
  const KernelParams start = opt.init.value_or(default_init(y, design));
  start.validate();

  std::vector<KernelParams> starts{start};
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (int r = 1; r < std::max(opt.restarts, 1); ++r) {
    KernelParams p = start;
    if (r == 1 || r == 2) {
      const double f = r == 1 ? 10.0 : 0.1;
      p.l1 *= f;
      p.l2 *= f;
      p.s *= f;
    } else {
      p.l1 *= std::exp(jitter(rng));
      p.l2 *= std::exp(jitter(rng));
      p.s *= std::exp(jitter(rng));
      p.h1 *= std::exp(0.5 * jitter(rng));
      p.h2 *= std::exp(0.5 * jitter(rng));
      p.c *= std::exp(0.5 * jitter(rng));
    }
    starts.push_back(p);
  }

  std::optional<detail::RunResult> best;
  int best_index = 0;
  std::string last_error;
  for (std::size_t r = 0; r < starts.size(); ++r) {
    try {
      auto run = detail::optimize(y, design, starts[r], opt);
      if (!best || run.trace.back() > best->trace.back()) {
        best = std::move(run);
        best_index = static_cast<int>(r);
      }
    } catch (const Error& e) {
      last_error = e.what();
    }
  }
  if (!best) fail(ErrorCode::FactorizationFailed, "all restarts failed: " + last_error);

  MixedFit out;
  out.params = best->params;
  out.loglik_trace = std::move(best->trace);
  out.design = design;
  out.y = y;
  out.mask = opt.mask;
  out.var_beta = opt.var_beta;
  out.converged = best->converged;
  out.iterations = best->iterations;
  out.best_restart = best_index;
  out.at_bound = std::move(best->at_bound);

  const detail::FactorizedModel fm(y, design, out.params, out.mask);
  out.fixed.beta1 = fm.beta_hat[0];
  out.fixed.beta2 = fm.beta_hat[1];
  Eigen::Matrix2d inv = fm.TtViT.inverse();
  inv = 0.5 * (inv + inv.transpose()).eval();
  out.fixed.cov = out.var_beta == VarBetaPolicy::NoiseScaled ? Eigen::Matrix2d(out.params.sigma2 * inv) : inv;
  out.random = blup(y, out);
  return out;
}

/// Rebuilds the fixed-effect estimate for given hyperparameters, e.g. when a
/// fit artifact is loaded from disk.
inline MixedFit refit_at(const Eigen::VectorXd& y, const DesignSet& design, const KernelParams& params,
                         const ComponentMask& mask, VarBetaPolicy policy) {
  MixedFit out;
  out.params = params;
  out.design = design;
  out.y = y;
  out.mask = mask;
  out.var_beta = policy;
  const detail::FactorizedModel fm(y, design, params, mask);
  out.fixed.beta1 = fm.beta_hat[0];
  out.fixed.beta2 = fm.beta_hat[1];
  Eigen::Matrix2d inv = fm.TtViT.inverse();
  inv = 0.5 * (inv + inv.transpose()).eval();
  out.fixed.cov = policy == VarBetaPolicy::NoiseScaled ? Eigen::Matrix2d(params.sigma2 * inv) : inv;
  out.loglik_trace.push_back(fm.loglik(y - design.T * fm.beta_hat));
  out.converged = true;
  out.random = blup(y, out);
  return out;
}

/// Conditional means and covariances of the random effects given Y.
inline RandomEffects blup(const Eigen::VectorXd& y, const MixedFit& fit) {
  const DesignSet& d = fit.design;
  const detail::FactorizedModel fm(y, d, fit.params, fit.mask);
  const Eigen::VectorXd alpha = fm.factor.solve(detail::residual(y, d, fit.fixed.vector()));
  const detail::Projected u = detail::project(d, alpha);
  const auto K = build_covariances(fit.params, d);
  const auto M = fm.projected_precision(d);

  const int m = d.n_ages(), nc = d.n_cohorts();
  RandomEffects re{Eigen::VectorXd::Zero(m), Eigen::VectorXd::Zero(m), Eigen::VectorXd::Zero(nc),
                   Eigen::MatrixXd::Zero(m, m), Eigen::MatrixXd::Zero(m, m), Eigen::MatrixXd::Zero(nc, nc)};
  if (fit.mask.age_intercept) {
    re.gamma1 = K.K1 * u.by_age;
    re.cov1 = K.K1 - K.K1 * M[0] * K.K1;
  }
  if (fit.mask.age_slope) {
    re.gamma2 = K.K2 * u.by_age_time;
    re.cov2 = K.K2 - K.K2 * M[1] * K.K2;
  }
  if (fit.mask.cohort) {
    re.gamma3 = K.K3 * u.by_cohort;
    re.cov3 = K.K3 - K.K3 * M[2] * K.K3;
  }
  return re;
}

struct SurfaceEstimate {
  Eigen::MatrixXd mean;      // years x ages
  Eigen::MatrixXd variance;  // years x ages
};

/// Fitted mean T b + sum Z_k g_k and the diagonal of the summed variance terms.
inline SurfaceEstimate fitted_surface(const MixedFit& fit) {
  const DesignSet& d = fit.design;
  const auto& re = fit.random;
  SurfaceEstimate out{Eigen::MatrixXd(d.n_years(), d.n_ages()), Eigen::MatrixXd(d.n_years(), d.n_ages())};
  for (int r = 0; r < d.n_rows(); ++r) {
    const int a = d.row_age[r], c = d.row_cohort[r];
    const double tc = d.row_time[r];
    const Eigen::Vector2d x(1.0, tc);
    out.mean(d.row_year[r], a) =
        fit.fixed.beta1 + fit.fixed.beta2 * tc + re.gamma1[a] + tc * re.gamma2[a] + re.gamma3[c];
    out.variance(d.row_year[r], a) = x.dot(fit.fixed.cov * x) + re.cov1(a, a) + tc * tc * re.cov2(a, a) +
                                     re.cov3(c, c) + fit.params.sigma2;
  }
  return out;
}

/// Extended cohort effects: mean K* Z3' alpha, covariance K** - K* M3 K*'.
struct CohortExtension {
  DesignSet design;
  Eigen::VectorXd gamma3;
  Eigen::MatrixXd cov3;
};

inline CohortExtension extend_cohorts(const MixedFit& fit, int h) {
  const DesignSet& d = fit.design;
  CohortExtension ext;
  ext.design = build_design(d.ages, std::vector<int>(d.years.begin(), d.years.begin() + d.n_train), h);
  const int nc = ext.design.n_cohorts();
  if (!fit.mask.cohort) {
    ext.gamma3 = Eigen::VectorXd::Zero(nc);
    ext.cov3 = Eigen::MatrixXd::Zero(nc, nc);
    return ext;
  }
  const detail::FactorizedModel fm(fit.y, d, fit.params, fit.mask);
  const Eigen::VectorXd alpha = fm.factor.solve(detail::residual(fit.y, d, fit.fixed.vector()));
  const detail::Projected u = detail::project(d, alpha);
  const auto M = fm.projected_precision(d);
  const auto KF = build_forecast_covariances(fit.params, ext.design);
  ext.gamma3 = KF.K3_star * u.by_cohort;
  ext.cov3 = KF.K3_star_star - KF.K3_star * M[2] * KF.K3_star.transpose();
  return ext;
}

/// h-step forecast over the training years and the h years after them.
inline Forecast forecast(const MixedFit& fit, int h, double alpha = 0.05) {
  if (h < 1) fail(ErrorCode::InvalidArgument, "forecast horizon must be >= 1");
  normal_quantile_two_sided(alpha);
  const CohortExtension ext = extend_cohorts(fit, h);
  const DesignSet& e = ext.design;
  const auto& re = fit.random;
  Forecast out;
  out.horizon = h;
  out.alpha = alpha;
  out.ages = e.ages;
  out.years = e.years;
  out.sigma2 = fit.params.sigma2;
  out.mean.resize(e.n_years(), e.n_ages());
  out.variance.resize(e.n_years(), e.n_ages());
  for (int r = 0; r < e.n_rows(); ++r) {
    const int a = e.row_age[r], c = e.row_cohort[r];
    const double tc = e.row_time[r];
    const Eigen::Vector2d x(1.0, tc);
    out.mean(e.row_year[r], a) =
        fit.fixed.beta1 + fit.fixed.beta2 * tc + re.gamma1[a] + tc * re.gamma2[a] + ext.gamma3[c];
    out.variance(e.row_year[r], a) = x.dot(fit.fixed.cov * x) + re.cov1(a, a) + tc * tc * re.cov2(a, a) +
                                     ext.cov3(c, c) + fit.params.sigma2;
  }
  return out;
}

/// Full (n+h)m x (n+h)m forecast covariance, rows in the extended design order.
inline Eigen::MatrixXd forecast_full_covariance(const MixedFit& fit, int h) {
  const CohortExtension ext = extend_cohorts(fit, h);
  const DesignSet& e = ext.design;
  const auto& re = fit.random;
  Eigen::MatrixXd C = e.T * fit.fixed.cov * e.T.transpose() + e.Z1 * re.cov1 * e.Z1.transpose() +
                      e.Z2 * re.cov2 * e.Z2.transpose() + e.Z3 * ext.cov3 * e.Z3.transpose();
  C.diagonal().array() += fit.params.sigma2;
  return C;
}

}  // namespace mortcast

#endif  // MORTCAST_MIXED_MODEL_HPP
