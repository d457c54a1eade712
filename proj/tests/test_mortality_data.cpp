#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mortcast/mortality_data.hpp"

using namespace mortcast;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const char* kHmdSample =
    "Japan, Mx_1x1\tLast modified: 01 Feb 2021;  Methods Protocol: v6 (2017)\n"
    "\n"
    "  Year          Age             Female            Male           Total\n"
    "  1947           60            0.021000        0.030000        0.025000\n"
    "  1947           61            0.022000        0.031000        0.026000\n"
    "  1948           60            0.020000        0.029000        0.024000\n"
    "  1948           61            0.021000        0.030000        0.025000\n"
    "  1948          110+           .               0.500000        0.510000\n";

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

std::string synthetic_csv(int y0, int y1, int a0, int a1) {
  std::ostringstream s;
  s << "year,age,mx\n";
  for (int t = y0; t <= y1; ++t)
    for (int x = a0; x <= a1; ++x) s << t << ',' << x << ',' << 0.01 * std::exp(0.09 * (x - 60) - 0.01 * (t - y0)) << '\n';
  return s.str();
}

}  // namespace

TEST_CASE("HMD line is read from the documented column order") {
  const auto male = parse_table(std::string_view(kHmdSample), TableFormat::Hmd1x1, Sex::Male);
  const auto* row = male.find(1947, 60);
  REQUIRE(row != nullptr);
  CHECK(row->rate == 0.030000);
  CHECK(male.find(1947, 61)->rate == 0.031000);

  const auto female = parse_table(std::string_view(kHmdSample), TableFormat::Hmd1x1, Sex::Female);
  CHECK(female.find(1947, 60)->rate == 0.021000);
  CHECK(female.find(1948, 110) == nullptr);  // "." marker
  CHECK(male.find(1948, 110)->rate == 0.5);  // "110+" is age 110
}

TEST_CASE("parse errors carry codes and line numbers") {
  CHECK(code_of([] { parse_table(std::string_view(""), TableFormat::Hmd1x1); }) == ErrorCode::EmptyInput);
  CHECK(code_of([] { parse_table(std::string_view(""), TableFormat::Csv); }) == ErrorCode::EmptyInput);
  CHECK(code_of([] { parse_table(std::string_view("year,age,mx\n2000,60,0.1\n2000,60,0.2\n"), TableFormat::Csv); }) ==
        ErrorCode::DuplicateCell);
  CHECK(code_of([] { parse_table(std::string_view("year,age,mx,colour\n"), TableFormat::Csv); }) ==
        ErrorCode::UnknownColumn);
  try {
    parse_table(std::string_view("year,age,mx\n2000,60,0.1\n2000,61\n"), TableFormat::Csv);
    FAIL("expected MalformedLine");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedLine);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  const std::string bad = std::string(kHmdSample) + "  1949  60  0.1  abc  0.2\n";
  CHECK(code_of([&] { parse_table(std::string_view(bad), TableFormat::Hmd1x1, Sex::Male); }) ==
        ErrorCode::MalformedLine);
}

TEST_CASE("deaths/exposure must agree with the central rate") {
  CHECK_NOTHROW(parse_table(std::string_view("year,age,mx,deaths,exposure\n2000,60,0.02,20,1000\n"), TableFormat::Csv));
  CHECK(code_of([] {
          parse_table(std::string_view("year,age,mx,deaths,exposure\n2000,60,0.03,20,1000\n"), TableFormat::Csv);
        }) == ErrorCode::InconsistentRow);
}

TEST_CASE("qx column skips the central-to-initial conversion") {
  const auto t = parse_table(std::string_view("year,age,qx\n2000,60,0.1\n"), TableFormat::Csv);
  const auto s = build_surface(t, {60, 60}, {2000, 2000});
  CHECK(s.q()(0, 0) == 0.1);
}

TEST_CASE("central_to_initial") {
  CHECK(central_to_initial(0.0) == 0.0);
  CHECK_THAT(central_to_initial(std::log(2.0)), WithinAbs(0.5, 1e-15));
  CHECK_THAT(central_to_initial(0.1), WithinAbs(0.09516258196404048, 1e-15));
  CHECK(code_of([] { central_to_initial(-0.1); }) == ErrorCode::InvalidRate);
  CHECK(code_of([] { central_to_initial(std::nan("")); }) == ErrorCode::InvalidRate);
  double prev = -1.0;
  for (double m = 0.0; m < 3.0; m += 0.01) {
    const double q = central_to_initial(m);
    CHECK(q > prev);
    prev = q;
  }
}

TEST_CASE("logit") {
  CHECK(logit(0.5) == 0.0);
  CHECK_THAT(logit(0.1), WithinAbs(-2.1972245773362196, 1e-14));
  CHECK(code_of([] { logit(1.0); }) == ErrorCode::NonFiniteLogit);
  CHECK(code_of([] { logit(0.0); }) == ErrorCode::NonFiniteLogit);
  for (double q : {1e-8 * 1.0001, 1e-5, 0.01, 0.3, 0.77, 0.999, 1.0 - 1.0001e-8}) {
    CHECK_THAT(inv_logit(logit(q)), WithinRel(q, 1e-12));
  }
}

TEST_CASE("build_surface windows the table") {
  const auto table = parse_table(std::string_view(synthetic_csv(1947, 2016, 50, 100)), TableFormat::Csv);
  const auto s = build_surface(table, {60, 89}, {1947, 2016});
  CHECK(s.n_years() == 70);
  CHECK(s.n_ages() == 30);
  for (int i = 0; i < s.n_years(); ++i)
    for (int j = 0; j < s.n_ages(); ++j) {
      const double q = s.q()(i, j);
      CHECK(std::abs(s.y()(i, j) - std::log(q / (1.0 - q))) <= 1e-12);
    }
  CHECK(s.stacked()[1] == s.y()(1, 0));   // age-major stacking
  CHECK(s.stacked()[70] == s.y()(0, 1));

  const auto one = build_surface(parse_table(std::string_view("year,age,mx\n2000,60," + std::to_string(std::log(2.0)) + "\n"),
                                             TableFormat::Csv),
                                 {60, 60}, {2000, 2000});
  CHECK(one.n_years() == 1);
  CHECK_THAT(one.y()(0, 0), WithinAbs(0.0, 1e-6));

  CHECK(code_of([&] { build_surface(table, {60, 89}, {1946, 2016}); }) == ErrorCode::MissingCell);
}

TEST_CASE("zero rates fail unless clamped") {
  const auto t = parse_table(std::string_view("year,age,mx\n2000,60,0\n2000,61,0.1\n"), TableFormat::Csv);
  try {
    build_surface(t, {60, 61}, {2000, 2000});
    FAIL("expected NonFiniteLogit");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLogit);
    CHECK(std::string(e.what()).find("year 2000, age 60") != std::string::npos);
  }
  const auto s = build_surface(t, {60, 61}, {2000, 2000}, SurfaceOptions{1e-6});
  CHECK(s.q()(0, 0) == 1e-6);
}

TEST_CASE("missing HMD cells outside the window are tolerated") {
  const auto male = parse_table(std::string_view(kHmdSample), TableFormat::Hmd1x1, Sex::Female);
  CHECK_NOTHROW(build_surface(male, {60, 61}, {1947, 1948}));
  CHECK(code_of([&] { build_surface(male, {60, 110}, {1948, 1948}); }) == ErrorCode::MissingCell);
}

TEST_CASE("HMD deaths and exposures attach to the surface") {
  const char* deaths =
      "Japan, Deaths\n  Year  Age  Female  Male  Total\n"
      "  1947  60  21.0  30.0  51.0\n  1947  61  22.0  31.0  53.0\n"
      "  1948  60  20.0  29.0  49.0\n  1948  61  21.0  30.0  51.0\n";
  const char* exposure =
      "Japan, Exposures\n  Year  Age  Female  Male  Total\n"
      "  1947  60  1000  1000  2000\n  1947  61  1000  1000  2000\n"
      "  1948  60  1000  1000  2000\n  1948  61  1000  1000  2000\n";
  std::istringstream rates(kHmdSample), d(deaths), e(exposure);
  const auto table = attach_deaths_exposure(parse_hmd_1x1(rates, Sex::Male), parse_hmd_records(d),
                                            parse_hmd_records(e), Sex::Male);
  const auto s = build_surface(table, {60, 61}, {1947, 1948});
  REQUIRE(s.deaths().has_value());
  CHECK((*s.deaths())(0, 1) == 31.0);
  CHECK((*s.exposure())(1, 0) == 1000.0);
  CHECK_THAT(s.q()(0, 0), WithinAbs(-std::expm1(-0.030), 1e-15));
}

TEST_CASE("split_train_test partitions the years") {
  const auto table = parse_table(std::string_view(synthetic_csv(1947, 2016, 60, 89)), TableFormat::Csv);
  const auto s = build_surface(table, {60, 89}, {1947, 2016});
  const auto [train, test] = split_train_test(s, 2006);
  CHECK(train.n_years() == 60);
  CHECK(test.n_years() == 10);
  CHECK(train.years().front() == 1947);
  CHECK(train.years().back() == 2006);
  CHECK(test.years().front() == 2007);
  CHECK(test.years().back() == 2016);
  CHECK(train.ages() == test.ages());
  CHECK(train.y().row(59) == s.y().row(59));
  CHECK(test.y().row(0) == s.y().row(60));

  const auto [t1, rest] = split_train_test(s, 1947);
  CHECK(t1.n_years() == 1);
  CHECK(rest.n_years() == 69);
  CHECK(code_of([&] { split_train_test(s, 2016); }) == ErrorCode::OutOfRange);
  CHECK(code_of([&] { split_train_test(s, 1946); }) == ErrorCode::OutOfRange);
}

TEST_CASE("ranges and surface CSV") {
  CHECK(parse_range("60:89") == IntRange{60, 89});
  CHECK(code_of([] { parse_range("2006:1947"); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { parse_range("60-89"); }) == ErrorCode::InvalidArgument);

  const auto s = build_surface(parse_table(std::string_view("year,age,qx\n2000,60,0.1\n"), TableFormat::Csv),
                               {60, 60}, {2000, 2000});
  std::ostringstream out;
  write_surface_csv(s, out);
  // 17 significant digits round-trip exactly.
  CHECK(out.str().starts_with("year,age,q,logit_q\n2000,60,0.10000000000000001,-2.19722457733621"));
  const std::string last = out.str().substr(out.str().rfind(',') + 1);
  double back = 0.0;
  REQUIRE(parse_double(trim(last), back));
  CHECK(back == s.y()(0, 0));
}
