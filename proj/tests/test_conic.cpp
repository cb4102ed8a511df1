#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vvc/conic.hpp"

using namespace vvc::conic;

namespace {

ConicProgram lp_corner() {
  // min -x - 2y  s.t.  x + y <= 4,  0 <= x <= 3,  0 <= y <= 3.
  // optimum (1, 3), objective -7; active set {x+y<=4, y<=3} with
  // stationarity giving row dual 1 and upper-bound dual on y of 1.
  ConicProgram p;
  int x = p.add_var("x", 0.0, 3.0, -1.0);
  int y = p.add_var("y", 0.0, 3.0, -2.0);
  p.add_ineq({{x, 1.0}, {y, 1.0}}, 4.0);
  return p;
}

ConicProgram unit_ball() {
  // min -x - y over the unit disk; the radius variable is pinned through its
  // bounds so the fixed-member handling inside cones is exercised.
  // optimum x = y = 1/sqrt(2), objective -sqrt(2).
  ConicProgram p;
  int x = p.add_var("x", -kInf, kInf, -1.0);
  int y = p.add_var("y", -kInf, kInf, -1.0);
  int t = p.add_var("t", 1.0, 1.0);
  p.add_cone({x, y}, t);
  return p;
}

}  // namespace

TEST_CASE("bound-constrained lp recovers primal and dual exactly") {
  ConicProgram p;
  int x = p.add_var("x", 3.0, kInf, 1.0);
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  CHECK(sol.x[x] == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(sol.objective == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(sol.z_lb[x] == doctest::Approx(1.0).epsilon(1e-7));
  auto rep = check_kkt(p, sol);
  CHECK(rep.max_residual() <= 1e-7);
}

TEST_CASE("lp with mixed active set matches the hand solution") {
  auto p = lp_corner();
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  CHECK(sol.x[0] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(sol.x[1] == doctest::Approx(3.0).epsilon(1e-7));
  CHECK(sol.objective == doctest::Approx(-7.0).epsilon(1e-8));
  CHECK(sol.z_ineq[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(sol.z_ub[1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(sol.z_lb[0] <= 1e-6);

  REQUIRE(!sol.trace.empty());
  auto [pcost, dcost] = sol.trace.back();
  CHECK(pcost == doctest::Approx(-7.0).epsilon(1e-6));
  CHECK(pcost - dcost <= 1e-5);
}

TEST_CASE("unit ball optimum is exact to 1e-8") {
  auto p = unit_ball();
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(std::abs(sol.x[0] - inv_sqrt2) <= 1e-8);
  CHECK(std::abs(sol.x[1] - inv_sqrt2) <= 1e-8);
  CHECK(std::abs(sol.objective + std::sqrt(2.0)) <= 1e-8);
  CHECK(sol.x[2] == doctest::Approx(1.0));

  // cone dual: u = (sqrt(2), -1, -1), absorbed pin dual sqrt(2) on t.
  REQUIRE(sol.cone_duals.size() == 1);
  CHECK(sol.cone_duals[0][0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
  CHECK(sol.cone_duals[0][1] == doctest::Approx(-1.0).epsilon(1e-6));
  auto rep = check_kkt(p, sol);
  CHECK(rep.max_residual() <= 1e-6);
}

TEST_CASE("objective scaling rescales duals but not the argmin") {
  auto p = unit_ball();
  auto base = solve_socp(p);
  auto q = unit_ball();
  for (auto& ci : q.c) ci *= 10.0;
  auto scaled = solve_socp(q);
  REQUIRE(scaled.status == SolveStatus::optimal);
  CHECK(std::abs(scaled.x[0] - base.x[0]) <= 1e-7);
  CHECK(std::abs(scaled.x[1] - base.x[1]) <= 1e-7);
  CHECK(scaled.objective == doctest::Approx(10.0 * base.objective).epsilon(1e-7));
  CHECK(scaled.cone_duals[0][0] ==
        doctest::Approx(10.0 * base.cone_duals[0][0]).epsilon(1e-6));
}

TEST_CASE("distance from a point to a hyperplane, via cone epigraph") {
  // min t  s.t.  d = x - a,  sum(x) = 0,  ||d|| <= t.  The projection of a
  // onto the hyperplane displaces every coordinate by mean(a), so the
  // optimal t equals |sum(a)| / sqrt(n).
  std::mt19937 rng(420);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = 5;
  std::vector<double> a(n);
  double suma = 0.0;
  for (auto& ai : a) {
    ai = gauss(rng);
    suma += ai;
  }

  ConicProgram p;
  std::vector<int> xs, ds;
  for (int i = 0; i < n; ++i) xs.push_back(p.add_var("x" + std::to_string(i), -kInf, kInf));
  for (int i = 0; i < n; ++i) ds.push_back(p.add_var("d" + std::to_string(i), -kInf, kInf));
  int t = p.add_var("t", 0.0, kInf, 1.0);
  for (int i = 0; i < n; ++i) p.add_eq({{ds[i], 1.0}, {xs[i], -1.0}}, -a[i]);
  std::vector<std::pair<int, double>> sum_terms;
  for (int i = 0; i < n; ++i) sum_terms.emplace_back(xs[i], 1.0);
  p.add_eq(sum_terms, 0.0);
  p.add_cone(ds, t);

  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  const double expect = std::abs(suma) / std::sqrt(double(n));
  CHECK(std::abs(sol.objective - expect) <= 1e-7);
  const double mean = suma / n;
  for (int i = 0; i < n; ++i) CHECK(std::abs(sol.x[xs[i]] - (a[i] - mean)) <= 1e-6);
}

TEST_CASE("kkt checker closes on a multi-cone program and flags tampering") {
  ConicProgram p;
  int u1 = p.add_var("u1", -2.0, 2.0, 0.3);
  int u2 = p.add_var("u2", -2.0, 2.0);
  int u3 = p.add_var("u3", -2.0, 2.0);
  int w1 = p.add_var("w1", 0.0, 3.0, -0.7);
  int w2 = p.add_var("w2", 0.0, 3.0, 0.1);
  int r1 = p.add_var("r1", 0.0, 10.0, 1.0);
  int r2 = p.add_var("r2", 0.0, 10.0, 1.0);
  p.add_eq({{u1, 1.0}, {u2, 1.0}, {u3, 1.0}, {w1, 1.0}}, 2.0);
  p.add_ineq({{u1, 1.0}, {w2, -1.0}}, 0.5);
  p.add_ineq({{u2, 2.0}, {w1, 1.0}}, 4.0);
  p.add_cone({u1, u2}, r1);
  p.add_cone({u3, w2}, r2);

  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  auto rep = check_kkt(p, sol);
  CHECK(rep.max_residual() <= 1e-6);

  // Same pair solved again must be bit-identical: the path is deterministic.
  auto again = solve_socp(p);
  REQUIRE(again.x.size() == sol.x.size());
  for (int i = 0; i < sol.x.size(); ++i) CHECK(again.x[i] == sol.x[i]);

  // Perturbing one multiplier must surface in stationarity at that column.
  auto bad = sol;
  bad.y_eq[0] += 0.1;
  auto rep_bad = check_kkt(p, bad);
  CHECK(rep_bad.stationarity == doctest::Approx(0.1).epsilon(1e-6));

  // Moving the primal point off the optimum breaks complementarity.
  auto moved = sol;
  moved.x[w1] = 0.1;
  moved.x[u1] = moved.x[u2] = moved.x[u3] = 0.0;
  auto rep_moved = check_kkt(p, moved);
  CHECK(rep_moved.max_residual() > 1e-3);
}

TEST_CASE("conflicting equalities yield a farkas certificate") {
  ConicProgram p;
  int x = p.add_var("x", -kInf, kInf);
  int y = p.add_var("y", -kInf, kInf, 1.0);
  p.add_eq({{x, 1.0}, {y, 1.0}}, 1.0);
  p.add_eq({{x, 1.0}, {y, 1.0}}, 2.0);
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::primal_infeasible);
  // certificate: A'y ~ 0 with b'y < 0.
  double col = sol.y_eq[0] + sol.y_eq[1];
  double by = sol.y_eq[0] + 2.0 * sol.y_eq[1];
  CHECK(std::abs(col) <= 1e-6 * std::max(1.0, std::abs(sol.y_eq[0])));
  CHECK(by < -1e-8);
}

TEST_CASE("bound against inequality infeasibility is certified") {
  ConicProgram p;
  int x = p.add_var("x", 3.0, kInf);
  p.add_ineq({{x, 1.0}}, 2.0);
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::primal_infeasible);
  CHECK(sol.z_ineq[0] > 1e-8);
  CHECK(std::abs(sol.z_ineq[0] - sol.z_lb[x]) <= 1e-6 * sol.z_ineq[0]);
  CHECK(2.0 * sol.z_ineq[0] - 3.0 * sol.z_lb[x] < -1e-8);
}

TEST_CASE("fixed variables are substituted and inconsistencies caught") {
  ConicProgram ok;
  int x = ok.add_var("x", 2.0, 2.0, 5.0);
  int y = ok.add_var("y", 0.0, 10.0, 1.0);
  ok.add_ineq({{x, 1.0}}, 5.0);
  ok.add_eq({{x, 1.0}, {y, 1.0}}, 6.0);
  auto sol = solve_socp(ok);
  REQUIRE(sol.status == SolveStatus::optimal);
  CHECK(sol.x[x] == doctest::Approx(2.0));
  CHECK(sol.x[y] == doctest::Approx(4.0).epsilon(1e-7));
  CHECK(sol.objective == doctest::Approx(14.0).epsilon(1e-7));
  auto rep = check_kkt(ok, sol);
  CHECK(rep.max_residual() <= 1e-6);

  ConicProgram bad;
  int z = bad.add_var("z", 2.0, 2.0);
  bad.add_eq({{z, 1.0}}, 3.0);
  auto infeas = solve_socp(bad);
  CHECK(infeas.status == SolveStatus::primal_infeasible);
}

TEST_CASE("equality-only problems route around the cone machinery") {
  ConicProgram p;
  int x = p.add_var("x", -kInf, kInf, 1.0);
  int y = p.add_var("y", -kInf, kInf, 1.0);
  p.add_eq({{x, 1.0}, {y, 1.0}}, 1.0);
  auto sol = solve_socp(p);
  REQUIRE(sol.status == SolveStatus::optimal);
  CHECK(sol.objective == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(sol.y_eq[0] == doctest::Approx(-1.0).epsilon(1e-7));

  ConicProgram unb;
  int a = unb.add_var("a", -kInf, kInf, 1.0);
  unb.add_var("b2", -kInf, kInf);
  unb.add_eq({{a, 1.0}}, 1.0);
  // second variable is free with zero cost on the equality subspace, but the
  // first is pinned; make the objective escape along the free one.
  unb.c[1] = -1.0;
  auto ray = solve_socp(unb);
  CHECK(ray.status == SolveStatus::dual_infeasible);
}

TEST_CASE("iteration cap reports without claiming optimality") {
  SocpOptions opt;
  opt.max_iter = 1;
  auto sol = solve_socp(unit_ball(), opt);
  CHECK(sol.status == SolveStatus::iteration_limit);
  CHECK(sol.message == "iteration limit reached");
}

TEST_CASE("validate rejects malformed programs") {
  ConicProgram p;
  int x = p.add_var("x", 1.0, -1.0);
  CHECK_THROWS_AS(p.validate(), std::runtime_error);
  p.lb[x] = -1.0;
  p.ub[x] = 1.0;

  int b = p.add_var("b", 0.0, 1.0, 0.0, true);
  int t = p.add_var("t", 0.0, kInf);
  p.add_cone({b}, t);
  CHECK_THROWS_AS(p.validate(), std::runtime_error);
  p.cones.clear();

  int y = p.add_var("y", -kInf, kInf);
  p.add_cone({x}, t);
  p.add_cone({x}, y);
  CHECK_THROWS_AS(p.validate(), std::runtime_error);
  p.cones.clear();

  p.add_cone({y}, t);
  CHECK_NOTHROW(p.validate());
  p.add_eq({{99, 1.0}}, 0.0);
  CHECK_THROWS_AS(p.validate(), std::runtime_error);
  (void)b;
}
