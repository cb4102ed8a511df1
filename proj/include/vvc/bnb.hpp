#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vvc/conic.hpp"

namespace vvc::bnb {

struct BnbOptions {
  conic::SocpOptions socp;
  double int_tol = 1e-6;
  double rel_gap = 1e-6;
  double abs_gap = 1e-9;
  int max_nodes = 200000;
  double time_limit_s = 0.0;  // 0 disables
  // With prefer() set, nodes whose bound ties the incumbent within tie_tol
  // stay open so the hook can arbitrate between equally good solutions.
  double tie_tol = 0.0;
  std::function<bool(const Eigen::VectorXd& candidate, const Eigen::VectorXd& incumbent)>
      prefer;
};

enum class BnbStatus { optimal, infeasible, node_limit, time_limit, numerical_error };
std::string to_string(BnbStatus s);

struct NodeLogEntry {
  int id = 0;
  int parent = -1;
  int depth = 0;
  int branch_var = -1;  // variable whose fixing created this node
  int branch_val = -1;
  double bound = 0.0;
  // outcome: branched | incumbent | integral | fathom_bound | infeasible | unresolved
  std::string outcome;
};

struct BnbResult {
  BnbStatus status = BnbStatus::numerical_error;
  bool has_incumbent = false;
  conic::ConicSolution incumbent;
  double objective = conic::kInf;
  double bound = -conic::kInf;  // proven lower bound on the optimum
  double gap = conic::kInf;
  int nodes = 0;       // relaxations solved
  int unresolved = 0;  // nodes whose relaxation did not resolve cleanly
  std::vector<NodeLogEntry> log;
};

/// Branch and bound over the binary-marked variables of `prog`. Best-first
/// on the relaxation bound with depth-first plunging: after a branching the
/// child on the rounding side of the fractional value is taken immediately.
/// Branching picks the most fractional binary; ties go to the lower
/// branch_priority, then the lower index.
BnbResult solve_misocp(const conic::ConicProgram& prog, const BnbOptions& opt = {});

}  // namespace vvc::bnb
