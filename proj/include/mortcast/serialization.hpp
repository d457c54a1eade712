#ifndef MORTCAST_SERIALIZATION_HPP
#define MORTCAST_SERIALIZATION_HPP

// JSON fit artifacts. A mixed-model artifact stores the data window and the
// estimated hyperparameters; loading re-derives beta and the BLUPs from them,
// so forecasts from a loaded artifact equal forecasts from the in-memory fit.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "mortcast/cbd_model.hpp"
#include "mortcast/error.hpp"
#include "mortcast/mixed_model.hpp"

namespace mortcast {

inline constexpr int kArtifactVersion = 1;

namespace detail {

inline nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json mat_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

inline Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Eigen::MatrixXd json_mat(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorCode::InvalidArgument, "expected a matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != cols) fail(ErrorCode::InvalidArgument, "ragged matrix");
    m.row(i) = json_vec(j[i]).transpose();
  }
  return m;
}

inline void expect_model(const nlohmann::json& j, const std::string& tag) {
  if (!j.contains("model") || j["model"] != tag) {
    fail(ErrorCode::InvalidArgument, "artifact model tag is '" + (j.contains("model") ? j["model"].dump() : "none") +
                                         "', expected '" + tag + "'");
  }
  if (j.value("version", 0) != kArtifactVersion) fail(ErrorCode::InvalidArgument, "unsupported artifact version");
}

}  // namespace detail

inline std::string to_string(VarBetaPolicy p) { return p == VarBetaPolicy::Gls ? "gls" : "scaled"; }

inline VarBetaPolicy var_beta_from_string(const std::string& s) {
  if (s == "scaled") return VarBetaPolicy::NoiseScaled;
  if (s == "gls") return VarBetaPolicy::Gls;
  fail(ErrorCode::InvalidArgument, "unknown var-beta policy '" + s + "' (expected scaled or gls)");
}

inline std::string to_string(RwDivisor d) { return d == RwDivisor::Differences ? "n-1" : "n-2"; }

inline RwDivisor rw_divisor_from_string(const std::string& s) {
  if (s == "n-1") return RwDivisor::Differences;
  if (s == "n-2") return RwDivisor::DifferencesMinusOne;
  fail(ErrorCode::InvalidArgument, "unknown V divisor '" + s + "' (expected n-1 or n-2)");
}

inline std::string artifact_model(const nlohmann::json& j) { return j.value("model", std::string()); }

inline nlohmann::json mixed_fit_to_json(const MixedFit& f) {
  using namespace detail;
  const auto& d = f.design;
  nlohmann::json j;
  j["model"] = "mixed";
  j["version"] = kArtifactVersion;
  j["ages"] = d.ages;
  j["years"] = std::vector<int>(d.years.begin(), d.years.begin() + d.n_train);
  j["y"] = vec_json(f.y);
  nlohmann::json params;
  const auto a = f.params.to_array();
  for (std::size_t k = 0; k < KernelParams::size; ++k) params[KernelParams::names()[k]] = a[k];
  j["params"] = params;
  j["mask"] = {{"age_intercept", f.mask.age_intercept}, {"age_slope", f.mask.age_slope}, {"cohort", f.mask.cohort}};
  j["var_beta"] = to_string(f.var_beta);
  j["beta"] = {f.fixed.beta1, f.fixed.beta2};
  j["beta_cov"] = mat_json(f.fixed.cov);
  j["gamma1"] = vec_json(f.random.gamma1);
  j["gamma2"] = vec_json(f.random.gamma2);
  j["gamma3"] = vec_json(f.random.gamma3);
  j["gamma1_var"] = vec_json(f.random.cov1.diagonal());
  j["gamma2_var"] = vec_json(f.random.cov2.diagonal());
  j["gamma3_var"] = vec_json(f.random.cov3.diagonal());
  j["cohorts"] = d.cohort_index;
  j["loglik"] = f.loglik();
  j["loglik_trace"] = f.loglik_trace;
  j["converged"] = f.converged;
  j["iterations"] = f.iterations;
  j["best_restart"] = f.best_restart;
  j["at_bound"] = f.at_bound;
  return j;
}

inline MixedFit mixed_fit_from_json(const nlohmann::json& j) {
  detail::expect_model(j, "mixed");
  const auto ages = j.at("ages").get<std::vector<int>>();
  const auto years = j.at("years").get<std::vector<int>>();
  const Eigen::VectorXd y = detail::json_vec(j.at("y"));
  if (y.size() != static_cast<Eigen::Index>(ages.size() * years.size())) {
    fail(ErrorCode::InvalidArgument, "artifact y has the wrong length for its age/year window");
  }
  std::array<double, KernelParams::size> a{};
  for (std::size_t k = 0; k < KernelParams::size; ++k) a[k] = j.at("params").at(KernelParams::names()[k]).get<double>();
  const KernelParams params = KernelParams::from_array(a);
  params.validate();
  const auto& mk = j.at("mask");
  const ComponentMask mask{mk.at("age_intercept").get<bool>(), mk.at("age_slope").get<bool>(),
                           mk.at("cohort").get<bool>()};
  MixedFit f = refit_at(y, build_design(ages, years), params, mask, var_beta_from_string(j.at("var_beta")));
  f.loglik_trace = j.at("loglik_trace").get<std::vector<double>>();
  f.converged = j.at("converged").get<bool>();
  f.iterations = j.at("iterations").get<int>();
  f.best_restart = j.at("best_restart").get<int>();
  f.at_bound = j.at("at_bound").get<std::vector<std::string>>();
  return f;
}

/// CBD artifacts keep the counts so the random-walk step can be re-estimated.
struct CbdArtifact {
  CbdFit fit;
  Eigen::MatrixXd deaths;
  Eigen::MatrixXd exposure;
  bool synthetic_exposure = false;
};

inline nlohmann::json cbd_fit_to_json(const CbdArtifact& art) {
  using namespace detail;
  const auto& f = art.fit;
  const auto& p = f.params;
  nlohmann::json j;
  j["model"] = "cbd";
  j["version"] = kArtifactVersion;
  j["ages"] = p.ages;
  j["years"] = p.years;
  j["x_bar"] = p.x_bar;
  j["kappa1"] = vec_json(p.kappa1);
  j["kappa2"] = vec_json(p.kappa2);
  j["gamma3"] = vec_json(p.gamma3);
  std::vector<int> cohorts;
  for (int c = 0; c < p.n_cohorts(); ++c) cohorts.push_back(p.cohort_label(c));
  j["cohorts"] = cohorts;
  j["cohort_included"] = f.cohort_included;
  j["loglik"] = f.loglik;
  j["loglik_trace"] = f.loglik_trace;
  j["sum_gamma"] = f.sum_gamma;
  j["sum_cohort_gamma"] = f.sum_cohort_gamma;
  j["converged"] = f.converged;
  j["sweeps"] = f.sweeps;
  j["deaths"] = mat_json(art.deaths);
  j["exposure"] = mat_json(art.exposure);
  j["synthetic_exposure"] = art.synthetic_exposure;
  return j;
}

inline CbdArtifact cbd_fit_from_json(const nlohmann::json& j) {
  using namespace detail;
  expect_model(j, "cbd");
  CbdArtifact art;
  CbdParams p = make_cbd_params(j.at("ages").get<std::vector<int>>(), j.at("years").get<std::vector<int>>());
  p.x_bar = j.at("x_bar").get<double>();
  p.kappa1 = json_vec(j.at("kappa1"));
  p.kappa2 = json_vec(j.at("kappa2"));
  p.gamma3 = json_vec(j.at("gamma3"));
  if (p.kappa1.size() != p.n_years() || p.kappa2.size() != p.n_years() || p.gamma3.size() != p.n_cohorts()) {
    fail(ErrorCode::InvalidArgument, "CBD artifact parameter lengths do not match its window");
  }
  art.fit.params = std::move(p);
  art.fit.cohort_included = j.at("cohort_included").get<std::vector<bool>>();
  art.fit.loglik = j.at("loglik").get<double>();
  art.fit.loglik_trace = j.at("loglik_trace").get<std::vector<double>>();
  art.fit.sum_gamma = j.at("sum_gamma").get<double>();
  art.fit.sum_cohort_gamma = j.at("sum_cohort_gamma").get<double>();
  art.fit.converged = j.at("converged").get<bool>();
  art.fit.sweeps = j.at("sweeps").get<int>();
  art.deaths = json_mat(j.at("deaths"));
  art.exposure = json_mat(j.at("exposure"));
  art.synthetic_exposure = j.at("synthetic_exposure").get<bool>();
  return art;
}

}  // namespace mortcast

#endif  // MORTCAST_SERIALIZATION_HPP
