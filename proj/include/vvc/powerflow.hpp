#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "vvc/grid.hpp"

namespace vvc::pf {

/// One operating instant: per-bus loads, per-unit PV output, device states.
/// All vectors are indexed like the corresponding Network containers.
struct PfInput {
  Eigen::VectorXd load_p;       // per bus
  Eigen::VectorXd load_q;       // per bus
  Eigen::VectorXd pv_p;         // per pv unit
  Eigen::VectorXd pv_q;         // requested reactive, clipped to capability
  std::vector<int> tap_position;  // per oltc
  std::vector<int> cb_units;      // per capbank
  double slack_v_sq = 1.0;

  static PfInput nominal(const grid::Network& net);
};

struct PfOptions {
  double tol = 1e-10;   // max squared-voltage change between sweeps
  int max_iter = 500;
  double collapse_v_sq = 0.25;
};

struct PfSolution {
  Eigen::VectorXd v_sq;    // per bus
  Eigen::VectorXd l_sq;    // per branch, squared current
  Eigen::VectorXd p_flow;  // per branch, sending-end active flow
  Eigen::VectorXd q_flow;
  Eigen::VectorXd pv_q_applied;  // after capability clipping
  double total_loss = 0.0;       // sum r * l
  double slack_p = 0.0;          // injection at the substation
  double slack_q = 0.0;
  bool converged = false;
  int iterations = 0;
  double max_mismatch = 0.0;  // worst branch-equation residual at exit
  std::vector<int> clipped_pv;
  std::string diagnostic;
};

/// Exact radial solve of the branch-flow recursion by backward/forward
/// sweeps. Tap changers scale the downstream voltage recursion. Requested
/// inverter reactive outside the capability box is clipped with a warning
/// recorded in the solution.
PfSolution solve_pf(const grid::Network& net, const PfInput& in, const PfOptions& opt = {});

/// Total conic relaxation slack: sum over branches of
/// |l - (P^2 + Q^2) / v_from|. Zero at any exact power-flow solution.
double relaxation_gap(const grid::Network& net, const Eigen::VectorXd& v_sq,
                      const Eigen::VectorXd& l_sq, const Eigen::VectorXd& p_flow,
                      const Eigen::VectorXd& q_flow);
double relaxation_gap(const grid::Network& net, const PfSolution& sol);

std::string to_json(const grid::Network& net, const PfSolution& sol);

}  // namespace vvc::pf
