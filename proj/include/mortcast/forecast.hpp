#ifndef MORTCAST_FORECAST_HPP
#define MORTCAST_FORECAST_HPP

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <vector>

#include "mortcast/error.hpp"

namespace mortcast {

/// (1 - alpha/2) quantile of the standard normal.
inline double normal_quantile_two_sided(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorCode::InvalidArgument, "alpha must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
}

struct Interval {
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;
};

/// Logit-scale point forecasts and per-cell variances. Rows follow `years`,
/// columns follow `ages`.
struct Forecast {
  int horizon = 0;
  std::vector<int> ages;
  std::vector<int> years;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd variance;
  double sigma2 = 0.0;  // observation noise floor included in `variance` (0 for models without one)
  double alpha = 0.05;  // default coverage level for intervals()

  int year_row(int year) const {
    if (years.empty() || year < years.front() || year > years.back()) {
      fail(ErrorCode::OutOfRange, "year " + std::to_string(year) + " not in forecast");
    }
    return year - years.front();
  }

  Eigen::VectorXd curve(int year) const { return mean.row(year_row(year)).transpose(); }

  Interval intervals() const { return intervals(alpha); }

  Interval intervals(double level) const {
    const double z = normal_quantile_two_sided(level);
    const Eigen::MatrixXd half = z * variance.cwiseMax(0.0).cwiseSqrt();
    return {mean - half, mean + half};
  }

  /// Restriction to the years after the training window.
  Forecast out_of_sample(int last_train_year) const {
    const int first = year_row(last_train_year + 1);
    Forecast f = *this;
    f.years.assign(years.begin() + first, years.end());
    f.mean = mean.bottomRows(mean.rows() - first);
    f.variance = variance.bottomRows(variance.rows() - first);
    return f;
  }
};

}  // namespace mortcast

#endif  // MORTCAST_FORECAST_HPP
