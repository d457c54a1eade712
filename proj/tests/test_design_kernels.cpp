#include <catch_amalgamated.hpp>

#include <random>

#include "mortcast/design_kernels.hpp"
#include "oracles.hpp"

using namespace mortcast;
using Catch::Matchers::WithinAbs;

TEST_CASE("small three-age, two-year design") {
  const auto d = build_design({60, 61, 62}, {2000, 2001});
  REQUIRE(d.n_rows() == 6);
  CHECK(d.t_bar == 2000.5);
  CHECK(d.cohort_index == std::vector<int>{1938, 1939, 1940, 1941});

  // Rows: (60,2000) (60,2001) (61,2000) (61,2001) (62,2000) (62,2001).
  Eigen::MatrixXd T(6, 2);
  T << 1, -0.5, 1, 0.5, 1, -0.5, 1, 0.5, 1, -0.5, 1, 0.5;
  CHECK(d.T == T);
  Eigen::MatrixXd Z1(6, 3);
  Z1 << 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1;
  CHECK(d.Z1 == Z1);
  Eigen::MatrixXd Z3(6, 4);
  // cohort labels 2000-60=1940 -> col 2, 2001-60=1941 -> 3, 1939 -> 1, 1940 -> 2, 1938 -> 0, 1939 -> 1
  Z3 << 0, 0, 1, 0,
        0, 0, 0, 1,
        0, 1, 0, 0,
        0, 0, 1, 0,
        1, 0, 0, 0,
        0, 1, 0, 0;
  CHECK(d.Z3 == Z3);
  for (int r = 0; r < 6; ++r)
    for (int j = 0; j < 3; ++j) CHECK(d.Z2(r, j) == d.Z1(r, j) * d.T(r, 1));
}

TEST_CASE("one-cell design") {
  const auto d = build_design({70}, {1990});
  CHECK(d.T.rows() == 1);
  CHECK(d.T(0, 0) == 1.0);
  CHECK(d.T(0, 1) == 0.0);
  CHECK(d.Z1(0, 0) == 1.0);
  CHECK(d.Z3.cols() == 1);
  CHECK(d.Z3(0, 0) == 1.0);
  CHECK_THROWS_AS(build_design({}, {1990}), Error);
  CHECK_THROWS_AS(build_design({70}, {}), Error);
}

TEST_CASE("forecast-extended design enumerates the new cohorts") {
  // n = 2, m = 2, h = 1: years t1..t3, ages x1 = 60, x2 = 61.
  const auto d = build_design({60, 61}, {2000, 2001}, 1);
  CHECK(d.n_rows() == 6);
  CHECK(d.n_cohorts() == 4);
  CHECK(d.cohort_index == std::vector<int>{1939, 1940, 1941, 1942});
  CHECK(d.t_bar == 2000.5);  // training-year mean
  const int labels[6] = {1940, 1941, 1942, 1939, 1940, 1941};  // (x1,t1..t3), (x2,t1..t3)
  for (int r = 0; r < 6; ++r) {
    CHECK(d.Z3.row(r).sum() == 1.0);
    CHECK(d.Z3(r, labels[r] - 1939) == 1.0);
  }
  CHECK(d.T(2, 1) == 1.5);
}

TEST_CASE("design invariants on a larger grid") {
  const auto d = build_design(oracle::seq(60, 30), oracle::seq(1947, 60));
  CHECK(d.n_cohorts() == 89);
  for (int r = 0; r < d.n_rows(); ++r) {
    CHECK(d.Z1.row(r).sum() == 1.0);
    CHECK(d.Z3.row(r).sum() == 1.0);
    const int c = d.row_cohort[r];
    CHECK(d.cohort_index[c] == d.years[d.row_year[r]] - d.ages[d.row_age[r]]);
    CHECK(d.Z2.row(r).sum() == d.T(r, 1));
  }
  // Column sums of Z3 count the cells on each cohort diagonal.
  for (int c = 0; c < d.n_cohorts(); ++c) {
    int cells = 0;
    for (int j = 0; j < 30; ++j)
      for (int i = 0; i < 60; ++i)
        if (d.years[i] - d.ages[j] == d.cohort_index[c]) ++cells;
    CHECK(d.Z3.col(c).sum() == cells);
  }
}

TEST_CASE("squared-exponential kernel") {
  const std::vector<double> u{3.0}, v{5.0};
  CHECK(se_kernel(u, u, 1.7, 4.0)(0, 0) == 1.7 * 1.7);
  CHECK_THAT(se_kernel(u, v, 1.0, 2.0)(0, 0), WithinAbs(0.36787944117144233, 1e-15));
  CHECK_THROWS_AS(se_kernel(u, v, 0.0, 2.0), Error);
  CHECK_THROWS_AS(se_kernel(u, v, 1.0, -1.0), Error);

  std::vector<double> ages(30);
  for (int k = 0; k < 30; ++k) ages[k] = 60 + k;
  const double amp = 0.8;
  const auto K = se_kernel(ages, ages, amp, 25.0);
  CHECK(K.rows() == 30);
  CHECK(K == K.transpose());
  CHECK(K.minCoeff() > 0.0);
  CHECK(K.maxCoeff() <= amp * amp);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(K);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * amp * amp);
}

TEST_CASE("covariance blocks") {
  const KernelParams p{0.5, 30.0, 0.02, 40.0, 0.3, 10.0, 0.01};
  const auto d = build_design(oracle::seq(60, 30), oracle::seq(1947, 60));
  const auto K = build_covariances(p, d);
  CHECK(K.K1.rows() == 30);
  CHECK(K.K2.cols() == 30);
  CHECK(K.K3.rows() == 89);
  CHECK(K.K3.cols() == 89);

  const KernelParams tiny{1e-150, 30.0, 0.02, 40.0, 0.3, 10.0, 0.01};
  CHECK(build_covariances(tiny, d).K1.cwiseAbs().maxCoeff() <= 1e-299);
}

TEST_CASE("forecast covariances extend the cohort axis") {
  const KernelParams p{0.5, 3.0, 0.2, 4.0, 0.7, 2.5, 0.1};
  const auto train = build_design({60, 61}, {2000, 2001});
  const auto ext = build_design({60, 61}, {2000, 2001}, 1);
  const auto F = build_forecast_covariances(p, ext);
  CHECK(F.K3_star.rows() == 4);
  CHECK(F.K3_star.cols() == 3);
  const auto K = build_covariances(p, train);
  CHECK((F.K3_star.topRows(3) - K.K3).cwiseAbs().maxCoeff() == 0.0);
  CHECK((F.K3_star_star.topLeftCorner(3, 3) - K.K3).cwiseAbs().maxCoeff() == 0.0);
  for (int k = 0; k < 4; ++k) CHECK(F.K3_star_star(k, k) == p.c * p.c);

  const auto same = build_forecast_covariances(p, train);
  CHECK((same.K3_star - K.K3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("V assembly matches the entrywise oracle") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    std::uniform_int_distribution<int> nd(1, 8), md(1, 8);
    int n = nd(rng), m = md(rng);
    while (n * m > 64) --n;
    const auto d = build_design(oracle::seq(60, m), oracle::seq(1990, n));
    const auto p = oracle::random_params(rng);
    const auto V = assemble_V(p, d);
    CHECK((V - oracle::entrywise_V(p, d)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(V == V.transpose());
    for (int r = 0; r < d.n_rows(); ++r) CHECK(V(r, r) >= p.sigma2);
  }
  const auto d = build_design({60, 61}, {2000, 2001});
  const KernelParams zero{1e-200, 1.0, 1e-200, 1.0, 1e-200, 1.0, 0.3};
  CHECK((assemble_V(zero, d) - 0.3 * Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("component mask drops whole blocks") {
  const KernelParams p{0.5, 3.0, 0.2, 4.0, 0.7, 2.5, 0.1};
  const auto d = build_design({60, 61, 62}, {2000, 2001, 2002});
  const ComponentMask only_cohort{false, false, true};
  CHECK((assemble_V(p, d, only_cohort) - oracle::dense_V(p, d, only_cohort)).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("factorization with the jitter policy") {
  const auto d = build_design({60, 61}, {2000, 2001});
  const KernelParams p{0.5, 3.0, 0.2, 4.0, 0.7, 2.5, 0.1};
  const auto V = assemble_V(p, d);
  const auto f = factorize_V(V);
  CHECK(f.jitter == 0.0);
  CHECK_THAT(f.log_det(), WithinAbs(std::log(V.determinant()), 1e-12));

  Eigen::MatrixXd singular = Eigen::MatrixXd::Ones(3, 3);
  const auto g = factorize_V(singular);
  CHECK(g.jitter == 1e-8);

  Eigen::MatrixXd indefinite = Eigen::MatrixXd::Identity(2, 2);
  indefinite(1, 1) = -1.0;
  CHECK_THROWS_AS(factorize_V(indefinite), Error);
}
