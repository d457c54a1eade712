#ifndef MORTCAST_DESIGN_KERNELS_HPP
#define MORTCAST_DESIGN_KERNELS_HPP

// Fixed/random-effects design matrices and squared-exponential covariances
// for the mixed-effects mortality model.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mortcast/error.hpp"
#include "mortcast/numeric_format.hpp"

namespace mortcast {

/// Hyperparameters of the three random-effect kernels plus the noise variance.
struct KernelParams {
  double h1 = 1.0;  // amplitude, age-intercept kernel
  double l1 = 1.0;  // length-scale, age-intercept kernel
  double h2 = 1.0;  // amplitude, age-slope kernel
  double l2 = 1.0;  // length-scale, age-slope kernel
  double c = 1.0;   // amplitude, cohort kernel
  double s = 1.0;   // length-scale, cohort kernel
  double sigma2 = 1.0;

  static constexpr std::size_t size = 7;

  std::array<double, size> to_array() const { return {h1, l1, h2, l2, c, s, sigma2}; }

  static KernelParams from_array(const std::array<double, size>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  }

  static constexpr std::array<const char*, size> names() {
    return {"h1", "l1", "h2", "l2", "c", "s", "sigma2"};
  }

  bool valid() const {
    for (double v : to_array())
      if (!(std::isfinite(v) && v > 0.0)) return false;
    return true;
  }

  void validate() const {
    const auto a = to_array();
    for (std::size_t k = 0; k < size; ++k) {
      if (!(std::isfinite(a[k]) && a[k] > 0.0)) {
        fail(ErrorCode::InvalidArgument,
             std::string("kernel parameter ") + names()[k] + " must be positive and finite, got " + format_full(a[k]));
      }
    }
  }
};

/// Which random-effect blocks enter V(theta). Disabling a block is the exact
/// zero-amplitude limit of its kernel.
struct ComponentMask {
  bool age_intercept = true;
  bool age_slope = true;
  bool cohort = true;

  friend bool operator==(const ComponentMask&, const ComponentMask&) = default;
};

/// Design for an age x year grid. Rows are stacked age-major: row j*(n+h)+i is
/// (age j, year i). When horizon > 0 the year axis runs past the training years
/// and the cohort axis is extended to the last forecast year.
struct DesignSet {
  std::vector<int> ages;
  std::vector<int> years;      // training years followed by forecast years
  int n_train = 0;             // number of training years
  int horizon = 0;
  double t_bar = 0.0;          // mean of the training years
  std::vector<int> cohort_index;  // ascending labels t - x

  Eigen::MatrixXd T;   // rows x 2
  Eigen::MatrixXd Z1;  // rows x m
  Eigen::MatrixXd Z2;  // rows x m
  Eigen::MatrixXd Z3;  // rows x cohorts

  // Per-row incidence, equivalent to the dense matrices above.
  std::vector<int> row_age;
  std::vector<int> row_year;
  std::vector<int> row_cohort;
  std::vector<double> row_time;  // t_i - t_bar

  int n_ages() const { return static_cast<int>(ages.size()); }
  int n_years() const { return static_cast<int>(years.size()); }
  int n_rows() const { return static_cast<int>(row_age.size()); }
  int n_cohorts() const { return static_cast<int>(cohort_index.size()); }
  int n_train_cohorts() const { return n_train + n_ages() - 1; }

  int row(int age_idx, int year_idx) const { return age_idx * n_years() + year_idx; }

  std::vector<double> age_labels() const { return {ages.begin(), ages.end()}; }
  std::vector<double> cohort_labels() const { return {cohort_index.begin(), cohort_index.end()}; }
  std::vector<double> train_cohort_labels() const {
    return {cohort_index.begin(), cohort_index.begin() + n_train_cohorts()};
  }
};

inline DesignSet build_design(const std::vector<int>& ages, const std::vector<int>& train_years, int horizon = 0) {
  if (ages.empty() || train_years.empty()) fail(ErrorCode::InvalidArgument, "design needs non-empty ages and years");
  if (horizon < 0) fail(ErrorCode::InvalidArgument, "forecast horizon must be >= 0");
  for (std::size_t k = 1; k < ages.size(); ++k)
    if (ages[k] != ages[k - 1] + 1) fail(ErrorCode::InvalidArgument, "ages must be consecutive");
  for (std::size_t k = 1; k < train_years.size(); ++k)
    if (train_years[k] != train_years[k - 1] + 1) fail(ErrorCode::InvalidArgument, "years must be consecutive");

  DesignSet d;
  d.ages = ages;
  d.n_train = static_cast<int>(train_years.size());
  d.horizon = horizon;
  d.years = train_years;
  for (int k = 1; k <= horizon; ++k) d.years.push_back(train_years.back() + k);
  double sum = 0.0;
  for (int t : train_years) sum += t;
  d.t_bar = sum / static_cast<double>(train_years.size());

  const int m = d.n_ages(), ny = d.n_years();
  const int first_cohort = d.years.front() - ages.back();
  const int n_cohorts = ny + m - 1;
  for (int k = 0; k < n_cohorts; ++k) d.cohort_index.push_back(first_cohort + k);

  const int rows = ny * m;
  d.T = Eigen::MatrixXd::Zero(rows, 2);
  d.Z1 = Eigen::MatrixXd::Zero(rows, m);
  d.Z2 = Eigen::MatrixXd::Zero(rows, m);
  d.Z3 = Eigen::MatrixXd::Zero(rows, n_cohorts);
  d.row_age.resize(rows);
  d.row_year.resize(rows);
  d.row_cohort.resize(rows);
  d.row_time.resize(rows);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < ny; ++i) {
      const int r = j * ny + i;
      const double tc = static_cast<double>(d.years[i]) - d.t_bar;
      const int cohort_col = (d.years[i] - ages[j]) - first_cohort;
      d.T(r, 0) = 1.0;
      d.T(r, 1) = tc;
      d.Z1(r, j) = 1.0;
      d.Z2(r, j) = tc;
      d.Z3(r, cohort_col) = 1.0;
      d.row_age[r] = j;
      d.row_year[r] = i;
      d.row_cohort[r] = cohort_col;
      d.row_time[r] = tc;
    }
  }
  return d;
}

/// amplitude^2 * exp(-(u - v)^2 / (2 * length)); the length-scale enters
/// linearly in the denominator.
inline Eigen::MatrixXd se_kernel(std::span<const double> a, std::span<const double> b, double amplitude,
                                 double length) {
  if (!(amplitude > 0.0) || !(length > 0.0) || !std::isfinite(amplitude) || !std::isfinite(length)) {
    fail(ErrorCode::InvalidArgument, "se_kernel needs positive amplitude and length, got " +
                                         format_full(amplitude) + ", " + format_full(length));
  }
  const double a2 = amplitude * amplitude;
  Eigen::MatrixXd K(a.size(), b.size());
  for (std::size_t p = 0; p < a.size(); ++p) {
    for (std::size_t q = 0; q < b.size(); ++q) {
      const double d = a[p] - b[q];
      K(p, q) = a2 * std::exp(-d * d / (2.0 * length));
    }
  }
  return K;
}

/// Element-wise squared label distances, used by the length-scale derivative.
inline Eigen::MatrixXd squared_distances(std::span<const double> a, std::span<const double> b) {
  Eigen::MatrixXd D(a.size(), b.size());
  for (std::size_t p = 0; p < a.size(); ++p)
    for (std::size_t q = 0; q < b.size(); ++q) D(p, q) = (a[p] - b[q]) * (a[p] - b[q]);
  return D;
}

struct Covariances {
  Eigen::MatrixXd K1;
  Eigen::MatrixXd K2;
  Eigen::MatrixXd K3;
};

inline Covariances build_covariances(const KernelParams& p, const DesignSet& design) {
  if (design.horizon != 0) fail(ErrorCode::InvalidArgument, "build_covariances expects the training design");
  const auto ages = design.age_labels();
  const auto cohorts = design.cohort_labels();
  return {se_kernel(ages, ages, p.h1, p.l1), se_kernel(ages, ages, p.h2, p.l2),
          se_kernel(cohorts, cohorts, p.c, p.s)};
}

struct ForecastCovariances {
  Eigen::MatrixXd K3_star;       // extended cohorts x training cohorts
  Eigen::MatrixXd K3_star_star;  // extended cohorts x extended cohorts
};

inline ForecastCovariances build_forecast_covariances(const KernelParams& p, const DesignSet& design_h) {
  const auto ext = design_h.cohort_labels();
  const auto train = design_h.train_cohort_labels();
  return {se_kernel(ext, train, p.c, p.s), se_kernel(ext, ext, p.c, p.s)};
}

/// V = Z1 K1 Z1' + Z2 K2 Z2' + Z3 K3 Z3' + sigma2 I, assembled from row incidence.
inline Eigen::MatrixXd assemble_V(const KernelParams& p, const DesignSet& design, const ComponentMask& mask = {}) {
  if (design.horizon != 0) fail(ErrorCode::InvalidArgument, "assemble_V expects the training design");
  p.validate();
  const auto K = build_covariances(p, design);
  const int N = design.n_rows();
  Eigen::MatrixXd V(N, N);
  for (int s = 0; s < N; ++s) {
    const int as = design.row_age[s], cs = design.row_cohort[s];
    const double ts = design.row_time[s];
    for (int r = s; r < N; ++r) {
      const int ar = design.row_age[r];
      double v = 0.0;
      if (mask.age_intercept) v += K.K1(ar, as);
      if (mask.age_slope) v += design.row_time[r] * ts * K.K2(ar, as);
      if (mask.cohort) v += K.K3(design.row_cohort[r], cs);
      V(r, s) = v;
      V(s, r) = v;
    }
    V(s, s) += p.sigma2;
  }
  return V;
}

/// Cholesky factor of V with the one-shot jitter policy: on failure, add
/// 1e-8 * mean(diag V) to the diagonal and retry once.
struct VFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;

  double log_det() const {
    const auto& L = llt.matrixLLT();
    double s = 0.0;
    for (Eigen::Index k = 0; k < L.rows(); ++k) s += std::log(L(k, k));
    return 2.0 * s;
  }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const { return llt.solve(B); }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return llt.solve(b); }
};

inline VFactor factorize_V(Eigen::MatrixXd V) {
  VFactor f;
  f.llt.compute(V);
  if (f.llt.info() == Eigen::Success && V.allFinite()) return f;
  if (!V.allFinite()) fail(ErrorCode::FactorizationFailed, "V contains non-finite entries");
  f.jitter = 1e-8 * V.diagonal().mean();
  V.diagonal().array() += f.jitter;
  f.llt.compute(V);
  if (f.llt.info() != Eigen::Success) {
    fail(ErrorCode::FactorizationFailed, "V is not positive definite even after jitter " + format_full(f.jitter));
  }
  return f;
}

}  // namespace mortcast

#endif  // MORTCAST_DESIGN_KERNELS_HPP
