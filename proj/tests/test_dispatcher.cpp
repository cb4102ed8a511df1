#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "oracles.hpp"
#include "vvc/agents.hpp"
#include "vvc/dispatcher.hpp"
#include "vvc/grid.hpp"

using namespace vvc;

namespace {

const grid::Network& feeder33() {
  static grid::Network net = grid::load_network(oracles::data_file("feeder33.json"));
  return net;
}

// Forecast with uniformly scaled loads, a common pv output fraction and an
// explicit previous device state anchoring the movement windows.
dispatcher::PeriodForecast scenario(double load_scale, double pv_frac, int prev_tap, int prev_cb0,
                                    int prev_cb1) {
  const auto& net = feeder33();
  auto fc = dispatcher::PeriodForecast::nominal(net);
  fc.load_p *= load_scale;
  fc.load_q *= load_scale;
  for (size_t k = 0; k < net.pv_units.size(); ++k)
    fc.pv_p[k] = pv_frac * net.pv_units[k].p_rating;
  fc.prev_tap.assign(net.oltcs.size(), prev_tap);
  fc.prev_cb = {prev_cb0, prev_cb1};
  return fc;
}

agents::LowerObjectiveSpec weighted_spec() {
  agents::LowerObjectiveSpec spec;
  spec.kind = agents::ObjectiveKind::weighted;
  spec.weight_cost = 1.0;
  spec.weight_loss = 1.0;
  return spec;
}

// Reference results were produced once by the exhaustive device-tuple
// enumeration (each tuple solved by the central follower and priced by the
// continuous conic model) and are frozen here; the branch-and-bound route
// must reproduce them without ever seeing the enumeration.
struct Frozen {
  double objective;
  int tap, cb0, cb1;
};
constexpr Frozen kLightEnum{0.110366410, 6, 2, 2};     // load 0.4, pv 0.9, prev 7/{1,1}
constexpr Frozen kModerateEnum{0.029312515, 10, 2, 2}; // load 0.7, pv 0.6, prev 7/{1,1}

}  // namespace

TEST_CASE("branch-and-bound dispatch matches the enumeration result, light instance") {
  const auto& net = feeder33();
  auto fc = scenario(0.4, 0.9, 7, 1, 1);
  auto spec = weighted_spec();
  dispatcher::DispatchConfig cfg;

  auto dec = dispatcher::dispatch_period(net, fc, spec, cfg);
  REQUIRE(dec.feasible);
  CHECK_FALSE(dec.relaxed);
  CHECK(dec.warnings.empty());
  CHECK(dec.tap[0] == kLightEnum.tap);
  CHECK(dec.cb[0] == kLightEnum.cb0);
  CHECK(dec.cb[1] == kLightEnum.cb1);
  CHECK(std::abs(dec.objective - kLightEnum.objective) / kLightEnum.objective <= 1e-4);
  CHECK(dec.eps_gap <= 1e-4);
  CHECK(dec.big_m_used == doctest::Approx(cfg.big_m));

  // the anticipated follower response must be the one the plant would pick
  CHECK(dispatcher::follower_fidelity(net, fc, spec, dec, cfg) <= 1e-4);

  auto j = nlohmann::json::parse(dispatcher::to_json(net, dec));
  CHECK(j["feasible"].get<bool>());
  CHECK(j["oltc"][0]["position"].get<int>() == kLightEnum.tap);
  CHECK(j["pv"].size() == net.pv_units.size());
  CHECK(j["pv"][0].contains("lam_lo"));
}

TEST_CASE("dispatch decision carries a consistent follower KKT certificate") {
  const auto& net = feeder33();
  auto fc = scenario(0.4, 0.9, 7, 1, 1);
  auto spec = weighted_spec();
  dispatcher::DispatchConfig cfg;
  auto X = grid::compute_x_matrix(net);

  auto dec = dispatcher::dispatch_period(net, fc, spec, cfg);
  REQUIRE(dec.feasible);
  auto model = dispatcher::build_single_level(net, fc, spec, cfg);
  const int npv = static_cast<int>(net.pv_units.size());
  REQUIRE(dec.q.size() == npv);
  CHECK(model.n_binary() == 73);  // 17 tap + 2*4 capbank + 4*12 complementarity

  double worst_prim = 0.0, worst_comp = 0.0, min_dual = 0.0;
  for (int g = 0; g < npv; ++g) {
    int bi = net.index_of(net.pv_units[g].bus);
    double v = dec.v_sq[bi];
    double vlo = net.buses[bi].v_min_sq, vhi = net.buses[bi].v_max_sq;
    worst_prim = std::max({worst_prim, vlo - v, v - vhi, model.box_lo[g] - dec.q[g],
                           dec.q[g] - model.box_hi[g]});
    worst_comp = std::max({worst_comp, dec.lam_lo[g] * (v - vlo), dec.lam_hi[g] * (vhi - v),
                           dec.mu_lo[g] * (dec.q[g] - model.box_lo[g]),
                           dec.mu_hi[g] * (model.box_hi[g] - dec.q[g])});
    min_dual = std::min({min_dual, dec.lam_lo[g], dec.lam_hi[g], dec.mu_lo[g], dec.mu_hi[g]});
  }
  CHECK(worst_prim <= 1e-8);
  CHECK(worst_comp <= 1e-8);
  CHECK(min_dual >= -1e-8);

  // stationarity rebuilt from the public objective, not the model rows
  Eigen::VectorXd q_hi(npv);
  for (int g = 0; g < npv; ++g) {
    double s = net.pv_units[g].s_rating, p = fc.pv_p[g];
    q_hi[g] = std::sqrt(std::max(0.0, s * s - p * p));
  }
  double worst_stat = 0.0;
  for (const auto& members : agents::group_partition(net, spec)) {
    auto qo = agents::build_objective(net, X, spec, members, q_hi);
    int k = static_cast<int>(members.size());
    Eigen::VectorXd qg(k), dlam(k), dmu(k);
    for (int i = 0; i < k; ++i) {
      qg[i] = dec.q[members[i]];
      dlam[i] = dec.lam_hi[members[i]] - dec.lam_lo[members[i]];
      dmu[i] = dec.mu_hi[members[i]] - dec.mu_lo[members[i]];
    }
    Eigen::MatrixXd Xs(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) Xs(i, j) = X.gg(members[i], members[j]);
    Eigen::VectorXd r = 2.0 * qo.H * qg + qo.b + Xs.transpose() * dlam + dmu;
    worst_stat = std::max(worst_stat, r.cwiseAbs().maxCoeff());
  }
  CHECK(worst_stat <= 1e-8);
}

TEST_CASE("big-M choice and audit leave the accepted dispatch unchanged") {
  const auto& net = feeder33();
  auto fc = scenario(0.4, 0.9, 7, 1, 1);
  auto spec = weighted_spec();

  // a much tighter M still clears every dual, so nothing changes
  dispatcher::DispatchConfig tight;
  tight.big_m = 0.1;
  auto dec = dispatcher::dispatch_period(net, fc, spec, tight);
  REQUIRE(dec.feasible);
  CHECK(dec.big_m_used == doctest::Approx(0.1));
  CHECK(dec.warnings.empty());
  CHECK(std::abs(dec.objective - kLightEnum.objective) / kLightEnum.objective <= 1e-4);
  CHECK(dec.tap[0] == kLightEnum.tap);

  // forcing the audit to fire re-solves at 10x M and records it
  dispatcher::DispatchConfig paranoid;
  paranoid.audit_fraction = 0.0;
  auto dec2 = dispatcher::dispatch_period(net, fc, spec, paranoid);
  REQUIRE(dec2.feasible);
  CHECK(dec2.big_m_used == doctest::Approx(10.0 * paranoid.big_m));
  REQUIRE_FALSE(dec2.warnings.empty());
  CHECK(dec2.warnings.front().find("big-M audit") != std::string::npos);
  CHECK(std::abs(dec2.objective - kLightEnum.objective) / kLightEnum.objective <= 1e-4);
}

TEST_CASE("branch-and-bound dispatch matches the enumeration result, moderate instance") {
  const auto& net = feeder33();
  auto fc = scenario(0.7, 0.6, 7, 1, 1);
  auto spec = weighted_spec();
  dispatcher::DispatchConfig cfg;

  auto dec = dispatcher::dispatch_period(net, fc, spec, cfg);
  REQUIRE(dec.feasible);
  CHECK(dec.tap[0] == kModerateEnum.tap);
  CHECK(dec.cb[0] == kModerateEnum.cb0);
  CHECK(dec.cb[1] == kModerateEnum.cb1);
  CHECK(std::abs(dec.objective - kModerateEnum.objective) / kModerateEnum.objective <= 1e-4);
  CHECK(dec.eps_gap <= 1e-4);
  CHECK(dispatcher::follower_fidelity(net, fc, spec, dec, cfg) <= 1e-4);
}

TEST_CASE("anticipating the follower beats ignoring it but not commanding it") {
  const auto& net = feeder33();
  auto fc = scenario(0.6, 0.0, 9, 1, 1);
  auto spec = weighted_spec();
  dispatcher::DispatchConfig cfg;

  auto bilevel = dispatcher::dispatch_period(net, fc, spec, cfg);
  auto m1 = dispatcher::dispatch_model1(net, fc, cfg);
  auto m2 = dispatcher::dispatch_model2(net, fc, cfg);
  REQUIRE(bilevel.feasible);
  REQUIRE(m1.feasible);
  REQUIRE(m2.feasible);

  // frozen from the enumeration study of this instance
  CHECK(bilevel.objective == doctest::Approx(0.049915430).epsilon(1e-4));
  CHECK(m1.objective == doctest::Approx(0.043921051).epsilon(1e-4));
  CHECK(m2.objective == doctest::Approx(0.053416410).epsilon(1e-4));

  // direct q control dominates anticipation, anticipation dominates q = 0
  CHECK(m1.objective < bilevel.objective);
  CHECK(bilevel.objective < m2.objective);

  // baselines carry no follower prices
  CHECK(m1.lam_lo.cwiseAbs().maxCoeff() == 0.0);
  CHECK(m2.lam_lo.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("light load keeps every bus clear of the lower voltage band") {
  const auto& net = feeder33();
  auto fc = scenario(0.35, 0.0, 9, 0, 0);
  auto dec = dispatcher::dispatch_period(net, fc, weighted_spec(), {});
  REQUIRE(dec.feasible);
  CHECK(dec.tap[0] == 12);
  CHECK(dec.cb[0] == 1);
  CHECK(dec.cb[1] == 1);
  double vmin = dec.v_sq.minCoeff();
  CHECK(vmin >= net.buses[1].v_min_sq + 0.05);
}

TEST_CASE("device movement limits bind the dispatch to the previous state") {
  const auto& net = feeder33();
  auto fc = scenario(0.55, 0.94, 17, 3, 3);
  auto dec = dispatcher::dispatch_period(net, fc, weighted_spec(), {});
  REQUIRE(dec.feasible);
  // the unconstrained optimum sits further down; the window clips at -3
  CHECK(dec.tap[0] == 14);
  CHECK(dec.cb[0] == 3);
  CHECK(dec.cb[1] == 3);
  CHECK(std::abs(dec.tap[0] - fc.prev_tap[0]) <= net.oltcs[0].max_move);
  for (size_t c = 0; c < net.capbanks.size(); ++c)
    CHECK(std::abs(dec.cb[c] - fc.prev_cb[c]) <= net.capbanks[c].max_move);
}

TEST_CASE("overload that breaks the hard bands falls back to penalized slack") {
  const auto& net = feeder33();
  auto fc = scenario(1.3, 0.0, 9, 0, 0);
  auto dec = dispatcher::dispatch_model2(net, fc, {});
  CHECK(dec.feasible);
  CHECK(dec.relaxed);
  REQUIRE_FALSE(dec.warnings.empty());
  CHECK(dec.warnings.front().find("infeasible") != std::string::npos);
}

TEST_CASE("enumeration refuses instances past the tuple cap") {
  const auto& net = feeder33();
  auto fc = scenario(0.5, 0.5, 9, 1, 1);
  dispatcher::DispatchConfig cfg;
  cfg.enum_cap = 3;
  CHECK_THROWS_WITH_AS(dispatcher::enumerate_bilevel(net, fc, weighted_spec(), cfg),
                       doctest::Contains("exceed the cap"), std::runtime_error);
}

TEST_CASE("malformed forecasts are rejected up front") {
  const auto& net = feeder33();
  auto spec = weighted_spec();

  auto fc = scenario(0.5, 0.5, 9, 1, 1);
  fc.load_p.resize(3);
  CHECK_THROWS_AS(dispatcher::dispatch_period(net, fc, spec, {}), std::invalid_argument);

  auto fc2 = scenario(0.5, 0.5, 9, 1, 1);
  fc2.prev_tap[0] = 0;  // positions are 1-based
  CHECK_THROWS_AS(dispatcher::dispatch_period(net, fc2, spec, {}), std::invalid_argument);

  auto fc3 = scenario(0.5, 0.5, 9, 1, 1);
  fc3.prev_cb[1] = 4;
  CHECK_THROWS_AS(dispatcher::dispatch_period(net, fc3, spec, {}), std::invalid_argument);
}
