#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "oracles.hpp"
#include "vvc/harness.hpp"

using namespace vvc;

namespace {

const grid::Network& feeder33() {
  static grid::Network net = grid::load_network(oracles::data_file("feeder33.json"));
  return net;
}

// minute row index of a wall-clock hour on the default 24x60 grid
int row_at(double hour) { return static_cast<int>(hour * 60.0); }

std::string write_temp_csv(const std::string& stem, int rows, double value) {
  auto path = (std::filesystem::temp_directory_path() / (stem + ".csv")).string();
  std::ofstream f(path);
  for (int r = 0; r < rows; ++r) f << value << "\n";
  return path;
}

}  // namespace

TEST_CASE("profiles are reproducible per seed and sensitive to it") {
  const auto& net = feeder33();
  auto a = harness::make_profiles(net, 7, {});
  auto b = harness::make_profiles(net, 7, {});
  auto c = harness::make_profiles(net, 8, {});

  CHECK(a.load_p == b.load_p);
  CHECK(a.pv_p == b.pv_p);
  CHECK(a.fc_load_p == b.fc_load_p);
  CHECK(a.fc_pv_p == b.fc_pv_p);
  CHECK(a.pv_p != c.pv_p);
  CHECK(a.fc_load_p != c.fc_load_p);

  CHECK(a.n_steps() == 24 * 60);
  CHECK(a.load_p.rows() == a.n_steps());
  CHECK(a.load_p.cols() == net.n_bus());
  CHECK(a.pv_p.cols() == static_cast<int>(net.pv_units.size()));
}

TEST_CASE("solar output is dark at night, strong at noon, inside the rating") {
  const auto& net = feeder33();
  auto tl = harness::make_profiles(net, 7, {});
  const int npv = static_cast<int>(net.pv_units.size());

  for (int k = 0; k < npv; ++k) {
    CHECK(tl.pv_p(row_at(3.0), k) == 0.0);
    CHECK(tl.pv_p(row_at(22.0), k) == 0.0);
    CHECK(tl.pv_p(row_at(12.5), k) > 0.7 * net.pv_units[k].p_rating);
  }
  for (int r = 0; r < tl.n_steps(); ++r)
    for (int k = 0; k < npv; ++k) {
      CHECK(tl.pv_p(r, k) >= 0.0);
      CHECK(tl.pv_p(r, k) <= net.pv_units[k].p_rating + 1e-15);
    }

  // loaded buses never collapse to zero and peak in the evening
  auto nominal = pf::PfInput::nominal(net);
  for (int b = 0; b < net.n_bus(); ++b)
    if (nominal.load_p[b] > 0.0) CHECK(tl.load_p.col(b).minCoeff() > 0.0);
  double night = tl.load_p(row_at(3.0), 5), evening = tl.load_p(row_at(19.6), 5);
  CHECK(evening > 2.0 * night);
}

TEST_CASE("forecast errors stay inside the configured bands") {
  const auto& net = feeder33();
  harness::ProfileOptions opt;
  auto tl = harness::make_profiles(net, 11, opt);
  const int S = opt.steps_per_period;

  for (int p = 0; p < opt.periods; ++p) {
    Eigen::RowVectorXd mean_lp = tl.load_p.middleRows(p * S, S).colwise().mean();
    Eigen::RowVectorXd mean_pv = tl.pv_p.middleRows(p * S, S).colwise().mean();
    for (int b = 0; b < net.n_bus(); ++b) {
      if (mean_lp[b] == 0.0) continue;
      double rel = tl.fc_load_p(p, b) / mean_lp[b] - 1.0;
      CHECK(std::abs(rel) <= opt.load_forecast_err + 1e-12);
    }
    for (size_t k = 0; k < net.pv_units.size(); ++k) {
      double fc = tl.fc_pv_p(p, k);
      CHECK(fc <= net.pv_units[k].p_rating + 1e-15);
      if (mean_pv[k] == 0.0) {
        CHECK(fc == 0.0);
      } else {
        CHECK(fc >= mean_pv[k] * (1.0 - opt.pv_forecast_err) - 1e-12);
        CHECK(fc <= mean_pv[k] * (1.0 + opt.pv_forecast_err) + 1e-12);
      }
    }
  }
}

TEST_CASE("hold_hourly freezes each period at its mean without touching forecasts") {
  const auto& net = feeder33();
  harness::ProfileOptions noisy, held;
  held.hold_hourly = true;
  auto tl = harness::make_profiles(net, 7, noisy);
  auto tlh = harness::make_profiles(net, 7, held);
  const int S = noisy.steps_per_period;

  CHECK(tlh.fc_load_p == tl.fc_load_p);
  CHECK(tlh.fc_pv_p == tl.fc_pv_p);
  for (int p = 0; p < noisy.periods; ++p) {
    Eigen::RowVectorXd mean_pv = tl.pv_p.middleRows(p * S, S).colwise().mean();
    for (int s = 0; s < S; ++s) {
      int r = p * S + s;
      CHECK((tlh.pv_p.row(r) - mean_pv).cwiseAbs().maxCoeff() <= 1e-15);
      CHECK(tlh.load_p.row(r) == tlh.load_p.row(p * S));
    }
  }
}

TEST_CASE("csv profiles scale the nominal injections exactly") {
  const auto& net = feeder33();
  harness::ProfileOptions opt;
  opt.shape = harness::ProfileShape::csv;
  opt.periods = 2;
  opt.steps_per_period = 3;
  opt.csv_load = write_temp_csv("vvc_load_ok", 6, 0.5);
  opt.csv_pv = write_temp_csv("vvc_pv_ok", 6, 0.25);

  auto tl = harness::make_profiles(net, 7, opt);
  auto nominal = pf::PfInput::nominal(net);
  for (int b = 0; b < net.n_bus(); ++b)
    CHECK(tl.load_p(4, b) == doctest::Approx(0.5 * nominal.load_p[b]));
  for (size_t k = 0; k < net.pv_units.size(); ++k)
    CHECK(tl.pv_p(1, k) == doctest::Approx(0.25 * net.pv_units[k].p_rating));

  opt.csv_load = write_temp_csv("vvc_load_short", 5, 0.5);
  CHECK_THROWS_AS(harness::make_profiles(net, 7, opt), std::invalid_argument);
  opt.csv_load = "/nonexistent/profile.csv";
  CHECK_THROWS_AS(harness::make_profiles(net, 7, opt), std::invalid_argument);
}

TEST_CASE("timeline lookup maps period and step to the right row") {
  const auto& net = feeder33();
  auto tl = harness::make_profiles(net, 7, {});
  std::vector<int> taps{9}, cbs{1, 2};

  auto in = harness::input_at(net, tl, 13, 30, taps, cbs);
  int row = 13 * 60 + 30;
  CHECK(in.load_p[5] == tl.load_p(row, 5));
  CHECK(in.pv_p[3] == tl.pv_p(row, 3));
  CHECK(in.tap_position == taps);
  CHECK(in.cb_units == cbs);
  CHECK(in.pv_q.cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(harness::input_at(net, tl, 24, 0, taps, cbs), std::out_of_range);
  CHECK_THROWS_AS(harness::input_at(net, tl, 0, 60, taps, cbs), std::out_of_range);
  CHECK_THROWS_AS(harness::input_at(net, tl, -1, 0, taps, cbs), std::out_of_range);
}

TEST_CASE("run metrics survive a json round trip") {
  harness::RunMetrics m;
  m.mode = harness::RunMode::model2;
  m.seed = 42;
  m.periods = 2;
  m.steps_per_period = 3;
  m.avg_loss = 0.0123;
  m.period_loss = {0.01, 0.02};
  m.max_eps = 3e-7;
  m.eps = {1e-7, 3e-7};
  m.violation_count = 5;
  m.violation_integral = 0.75;
  m.step_over = {0, 0, 0.1, 0, 0, 0};
  m.step_under = {0.2, 0, 0, 0, 0, 0.05};
  m.taps = {{9}, {10}};
  m.cbs = {{1, 2}, {2, 2}};
  m.tap_moves = 1;
  m.cb_moves = 2;
  m.dispatch_time_s = {0.5, 0.4};
  m.dispatch_nodes = {100, 90};
  m.final_dq = {1e-5, 2e-5};
  m.warnings = {"period 1: note"};
  m.aborted = false;

  auto r = harness::metrics_from_json(harness::to_json(m));
  CHECK(r.mode == m.mode);
  CHECK(r.seed == m.seed);
  CHECK(r.avg_loss == m.avg_loss);
  CHECK(r.period_loss == m.period_loss);
  CHECK(r.eps == m.eps);
  CHECK(r.violation_count == m.violation_count);
  CHECK(r.violation_integral == m.violation_integral);
  CHECK(r.step_over == m.step_over);
  CHECK(r.step_under == m.step_under);
  CHECK(r.taps == m.taps);
  CHECK(r.cbs == m.cbs);
  CHECK(r.tap_moves == m.tap_moves);
  CHECK(r.cb_moves == m.cb_moves);
  CHECK(r.dispatch_nodes == m.dispatch_nodes);
  CHECK(r.final_dq == m.final_dq);
  CHECK(r.warnings == m.warnings);
  CHECK(r.aborted == m.aborted);
}

TEST_CASE("comparison report refuses mismatched runs and tabulates matched ones") {
  harness::RunMetrics a, b;
  a.mode = harness::RunMode::bilevel;
  b.mode = harness::RunMode::no_control;
  a.seed = b.seed = 7;
  a.periods = b.periods = 2;
  a.steps_per_period = b.steps_per_period = 3;
  a.avg_loss = 0.01;
  b.avg_loss = 0.02;
  a.dispatch_time_s = {0.5, 0.3};
  a.tap_moves = 3;

  CHECK_THROWS_AS(harness::compare_report({a}), std::invalid_argument);
  auto bad = b;
  bad.seed = 8;
  CHECK_THROWS_AS(harness::compare_report({a, bad}), std::invalid_argument);

  auto csv = harness::compare_report({a, b});
  CHECK(csv.find("metric,bilevel,no-control") == 0);
  CHECK(csv.find("avg_loss_pu") != std::string::npos);
  CHECK(csv.find("violation_integral_pu_s") != std::string::npos);
  CHECK(csv.find("tap_moves") != std::string::npos);
}

TEST_CASE("closed loop separates scheduled control from no control") {
  const auto& net = feeder33();
  harness::ProfileOptions opt;
  opt.periods = 2;
  opt.steps_per_period = 4;
  auto tl = harness::make_profiles(net, 7, opt);

  agents::LowerObjectiveSpec spec;
  spec.kind = agents::ObjectiveKind::weighted;
  spec.weight_cost = 1.0;
  spec.weight_loss = 1.0;

  harness::HarnessConfig cfg;
  auto ctl = harness::run_closed_loop(net, tl, harness::RunMode::bilevel, spec, cfg);
  auto off = harness::run_closed_loop(net, tl, harness::RunMode::no_control, spec, cfg);

  REQUIRE_FALSE(ctl.aborted);
  REQUIRE_FALSE(off.aborted);
  CHECK(ctl.periods == 2);
  CHECK(static_cast<int>(ctl.taps.size()) == 2);
  CHECK(static_cast<int>(ctl.eps.size()) == 2);
  CHECK(static_cast<int>(ctl.step_over.size()) == 8);
  CHECK(ctl.max_eps <= 1e-4);
  CHECK(ctl.avg_loss > 0.0);
  CHECK(ctl.avg_loss < off.avg_loss);

  // no-control pins the devices at neutral with no movement charged
  CHECK(off.tap_moves == 0);
  CHECK(off.cb_moves == 0);
  for (const auto& t : off.taps) CHECK(t[0] == net.oltcs[0].neutral());
  for (const auto& c : off.cbs) CHECK(c == std::vector<int>{0, 0});
}
