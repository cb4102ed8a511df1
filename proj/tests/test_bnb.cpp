#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "vvc/bnb.hpp"

using namespace vvc;
using conic::ConicProgram;
using conic::kInf;

namespace {

// min t + 0.3 b0 - 0.1 b1 + 0.05 b2
// s.t. x + b0 + 0.5 b1 = 1.5,  y - b2 = -0.2,  ||(x,y)|| <= t.
ConicProgram soc_toy() {
  ConicProgram p;
  int b0 = p.add_var("b0", 0.0, 1.0, 0.3, true);
  int b1 = p.add_var("b1", 0.0, 1.0, -0.1, true);
  int b2 = p.add_var("b2", 0.0, 1.0, 0.05, true);
  int x = p.add_var("x", -kInf, kInf);
  int y = p.add_var("y", -kInf, kInf);
  int t = p.add_var("t", 0.0, kInf, 1.0);
  p.add_eq({{x, 1.0}, {b0, 1.0}, {b1, 0.5}}, 1.5);
  p.add_eq({{y, 1.0}, {b2, -1.0}}, -0.2);
  p.add_cone({x, y}, t);
  return p;
}

// Exhaustive oracle: fix every binary combination, solve the relaxation,
// keep the best.
struct EnumBest {
  double objective = kInf;
  std::vector<int> combo;
};

EnumBest enumerate_binaries(const ConicProgram& prog) {
  std::vector<int> bins;
  for (int i = 0; i < prog.n_vars(); ++i)
    if (prog.is_binary[i]) bins.push_back(i);
  EnumBest best;
  ConicProgram scratch = prog;
  const int total = 1 << bins.size();
  for (int mask = 0; mask < total; ++mask) {
    std::vector<int> combo(bins.size());
    for (size_t k = 0; k < bins.size(); ++k) {
      combo[k] = (mask >> k) & 1;
      scratch.lb[bins[k]] = combo[k];
      scratch.ub[bins[k]] = combo[k];
    }
    auto sol = conic::solve_socp(scratch);
    if (sol.status != conic::SolveStatus::optimal) continue;
    if (sol.objective < best.objective) {
      best.objective = sol.objective;
      best.combo = combo;
    }
  }
  return best;
}

// Three groups of four one-hot binaries pick a level each; the chosen levels
// chase targets through a cone on the deviations.
ConicProgram onehot_levels() {
  ConicProgram p;
  const double levels[4] = {-0.3, 0.0, 0.4, 0.9};
  const double target[3] = {0.55, -0.18, 0.07};
  std::vector<std::vector<int>> w(3);
  for (int g = 0; g < 3; ++g)
    for (int k = 0; k < 4; ++k)
      w[g].push_back(p.add_var("w" + std::to_string(g) + std::to_string(k), 0.0, 1.0,
                               0.01 * k, true));
  int t = p.add_var("t", 0.0, kInf, 1.0);
  std::vector<int> devs;
  for (int g = 0; g < 3; ++g) {
    std::vector<std::pair<int, double>> sum;
    for (int k = 0; k < 4; ++k) sum.emplace_back(w[g][k], 1.0);
    p.add_eq(sum, 1.0);
    int d = p.add_var("d" + std::to_string(g), -kInf, kInf);
    std::vector<std::pair<int, double>> lvl{{d, 1.0}};
    for (int k = 0; k < 4; ++k) lvl.emplace_back(w[g][k], -levels[k]);
    p.add_eq(lvl, -target[g]);
    devs.push_back(d);
  }
  p.add_cone(devs, t);
  return p;
}

}  // namespace

TEST_CASE("three-binary cone program matches exhaustive enumeration") {
  auto prog = soc_toy();
  auto oracle = enumerate_binaries(prog);
  REQUIRE(oracle.objective < kInf);

  auto res = bnb::solve_misocp(prog);
  REQUIRE(res.status == bnb::BnbStatus::optimal);
  CHECK(std::abs(res.objective - oracle.objective) <= 1e-7);
  for (int k = 0; k < 3; ++k)
    CHECK(std::lround(res.incumbent.x[k]) == oracle.combo[k]);
  CHECK(res.gap <= 1e-6);
  CHECK(res.nodes >= 1);
  REQUIRE(!res.log.empty());

  // Every solved child carries a bound no worse than its parent's.
  std::map<int, double> bound_of;
  for (const auto& e : res.log)
    if (e.outcome == "branched" || e.outcome == "incumbent" || e.outcome == "integral")
      bound_of[e.id] = e.bound;
  for (const auto& e : res.log) {
    if (e.parent < 0 || !bound_of.count(e.parent)) continue;
    if (e.outcome == "infeasible" || e.outcome == "fathom_bound") continue;
    CHECK(e.bound >= bound_of[e.parent] - 1e-6);
  }

  // Accepted incumbents improve monotonically.
  double last = kInf;
  for (const auto& e : res.log)
    if (e.outcome == "incumbent") {
      CHECK(e.bound <= last + 1e-9);
      last = e.bound;
    }
}

TEST_CASE("twelve one-hot binaries match enumeration over admissible combos") {
  auto prog = onehot_levels();
  auto res = bnb::solve_misocp(prog);
  REQUIRE(res.status == bnb::BnbStatus::optimal);

  // Oracle enumerates the 4^3 admissible selections directly.
  const double levels[4] = {-0.3, 0.0, 0.4, 0.9};
  const double target[3] = {0.55, -0.18, 0.07};
  double best = kInf;
  std::vector<int> pick(3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k) {
        double dev = std::sqrt(std::pow(levels[i] - target[0], 2) +
                               std::pow(levels[j] - target[1], 2) +
                               std::pow(levels[k] - target[2], 2));
        double cost = dev + 0.01 * (i + j + k);
        if (cost < best) {
          best = cost;
          pick = {i, j, k};
        }
      }
  CHECK(std::abs(res.objective - best) <= 1e-6);
  for (int g = 0; g < 3; ++g)
    for (int k = 0; k < 4; ++k)
      CHECK(std::lround(res.incumbent.x[4 * g + k]) == (k == pick[g] ? 1 : 0));
}

TEST_CASE("already-fixed binaries solve in a single node") {
  auto prog = soc_toy();
  for (int k = 0; k < 3; ++k) {
    prog.lb[k] = 1.0;
    prog.ub[k] = 1.0;
  }
  auto res = bnb::solve_misocp(prog);
  REQUIRE(res.status == bnb::BnbStatus::optimal);
  CHECK(res.nodes == 1);
  CHECK(res.incumbent.x[0] == doctest::Approx(1.0));
}

TEST_CASE("continuous program passes straight through") {
  ConicProgram p;
  int x = p.add_var("x", 3.0, kInf, 1.0);
  auto res = bnb::solve_misocp(p);
  REQUIRE(res.status == bnb::BnbStatus::optimal);
  CHECK(res.nodes == 1);
  CHECK(res.objective == doctest::Approx(3.0).epsilon(1e-8));
  CHECK(res.gap <= 1e-9);
}

TEST_CASE("integer infeasibility is proven by exhaustion") {
  ConicProgram p;
  int b0 = p.add_var("b0", 0.0, 1.0, 0.0, true);
  int b1 = p.add_var("b1", 0.0, 1.0, 0.0, true);
  p.add_eq({{b0, 1.0}, {b1, 1.0}}, 0.5);
  auto res = bnb::solve_misocp(p);
  CHECK(res.status == bnb::BnbStatus::infeasible);
  CHECK(!res.has_incumbent);
}

TEST_CASE("node limit stops early with an honest bound") {
  bnb::BnbOptions opt;
  opt.max_nodes = 1;
  auto res = bnb::solve_misocp(soc_toy(), opt);
  CHECK(res.status == bnb::BnbStatus::node_limit);
  CHECK(res.nodes == 1);
  CHECK(!res.has_incumbent);
  CHECK(res.bound < kInf);
  CHECK(res.bound > -kInf);
}

TEST_CASE("preference hook arbitrates exact ties") {
  // x >= b, x >= 1-b: both binary values cost exactly 1.
  auto make = [] {
    ConicProgram p;
    int b = p.add_var("b", 0.0, 1.0, 0.0, true);
    int x = p.add_var("x", -kInf, kInf, 1.0);
    p.add_ineq({{b, 1.0}, {x, -1.0}}, 0.0);
    p.add_ineq({{b, -1.0}, {x, -1.0}}, -1.0);
    return p;
  };

  bnb::BnbOptions want_one;
  want_one.tie_tol = 1e-6;
  want_one.prefer = [](const Eigen::VectorXd& cand, const Eigen::VectorXd& inc) {
    return cand[0] > inc[0] + 0.5;
  };
  auto res1 = bnb::solve_misocp(make(), want_one);
  REQUIRE(res1.status == bnb::BnbStatus::optimal);
  CHECK(res1.objective == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(std::lround(res1.incumbent.x[0]) == 1);

  bnb::BnbOptions want_zero = want_one;
  want_zero.prefer = [](const Eigen::VectorXd& cand, const Eigen::VectorXd& inc) {
    return cand[0] < inc[0] - 0.5;
  };
  auto res0 = bnb::solve_misocp(make(), want_zero);
  REQUIRE(res0.status == bnb::BnbStatus::optimal);
  CHECK(std::lround(res0.incumbent.x[0]) == 0);
}

TEST_CASE("branch priorities steer equal fractionality") {
  // Two symmetric binaries at 0.5; priority should decide who branches first.
  ConicProgram p;
  int b0 = p.add_var("b0", 0.0, 1.0, 0.0, true, 5);
  int b1 = p.add_var("b1", 0.0, 1.0, 0.0, true, 1);
  int x = p.add_var("x", 0.0, kInf, 1.0);
  p.add_eq({{b0, 1.0}, {b1, 1.0}}, 1.0);
  p.add_ineq({{b0, 1.0}, {x, -1.0}}, 0.0);
  p.add_ineq({{b1, 1.0}, {x, -1.0}}, 0.0);
  auto res = bnb::solve_misocp(p);
  REQUIRE(res.status == bnb::BnbStatus::optimal);
  CHECK(res.objective == doctest::Approx(1.0).epsilon(1e-6));
  bool found = false;
  for (const auto& e : res.log)
    if (e.parent == 0 && e.branch_var >= 0) {
      CHECK(e.branch_var == b1);
      found = true;
    }
  CHECK(found);
  (void)b0;
}
