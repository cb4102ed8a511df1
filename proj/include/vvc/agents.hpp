#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vvc/conic.hpp"
#include "vvc/grid.hpp"
#include "vvc/powerflow.hpp"

namespace vvc::agents {

enum class ObjectiveKind { cost, loss, equal_ratio, weighted };
ObjectiveKind objective_kind_from(const std::string& name);
std::string to_string(ObjectiveKind k);

/// What the inverter group collectively minimizes between dispatches.
struct LowerObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::cost;
  double weight_cost = 1.0;  // weighted mode only
  double weight_loss = 0.0;
  int leader_bus = -1;  // equal_ratio only
  // Bus-id partition. Empty keeps the group labels already on the network.
  std::vector<std::vector<int>> groups;
};

/// f(q) = q' H q + b' q + c over a subset of PV units.
struct QuadObjective {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double c = 0.0;
  double value(const Eigen::VectorXd& q) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& q) const;
};

/// Assemble the quadratic for PV units `members` (indices into net.pv_units).
/// q_hi holds each member's instantaneous capability, which the equal-ratio
/// weights divide by. Throws on invalid weights or a non-PV leader.
QuadObjective build_objective(const grid::Network& net, const grid::SensitivityMatrix& X,
                              const LowerObjectiveSpec& spec, const std::vector<int>& members,
                              const Eigen::VectorXd& q_hi);

/// Coordination groups as ascending pv indices: the spec's bus-id partition
/// when given (validated as an exact cover of all units), else the group
/// labels on the network.
std::vector<std::vector<int>> group_partition(const grid::Network& net,
                                              const LowerObjectiveSpec& spec);

struct LowerOptions {
  bool refine_with_plant = true;  // iterate relinearization to the plant fixed point
  int max_plant_iters = 60;
  double fixed_point_tol = 1e-9;  // on max |q - q_prev|
  conic::SocpOptions socp;
};

struct LowerSolveResult {
  Eigen::VectorXd q;                    // per PV unit
  Eigen::VectorXd lam_lo, lam_hi;       // voltage duals per PV unit's bus
  Eigen::VectorXd mu_lo, mu_hi;         // box duals per PV unit
  Eigen::VectorXd v_sq;                 // plant voltages at the returned point
  double objective = 0.0;
  double kkt_residual = 0.0;            // stationarity+complementarity, linearized model
  bool feasible = true;                 // false: box-clipped least-violation point
  bool converged = true;                // plant fixed point reached
  int plant_solves = 0;
};

/// Centralized reference solve of the group problem: min f(q) subject to
/// voltage boxes at the constrained buses (linearized v = v0 + X (q - q0))
/// and capability boxes. in.pv_q seeds the linearization point; groups solve
/// round-robin against the shared plant until the joint fixed point.
LowerSolveResult solve_lower_central(const grid::Network& net, const grid::SensitivityMatrix& X,
                                     const pf::PfInput& in, const LowerObjectiveSpec& spec,
                                     const LowerOptions& opt = {});

/// Carry-over protocol state, so a caller can run rounds in short bursts.
struct AgentInit {
  Eigen::VectorXd lam_lo, lam_hi;  // distributed-mode duals, empty = zeros
  Eigen::VectorXd u;               // consensus ratio estimates, empty = zeros
  double xi_lo = 0.0, xi_hi = 0.0;  // consensus leader integrators
};

struct RoundConfig {
  double alpha = 10.0;  // dual ascent step
  double beta = 0.25;   // primal descent step
  double round_period_s = 0.5;
  double conv_tol = 1e-4;  // max |dq| threshold
  int conv_window = 10;    // consecutive rounds under threshold
  int max_rounds = 600;
  int divergence_window = 50;
  int message_delay = 0;   // extra rounds before a posted message is readable
  double noise_mag = 0.0;  // uniform +- on squared-voltage measurements
  unsigned seed = 1;
};

struct RoundRecord {
  int round = 0;
  double t_s = 0.0;
  Eigen::VectorXd q;
  Eigen::VectorXd v_meas;   // squared voltage at each PV bus
  Eigen::VectorXd lam_lo, lam_hi;
  Eigen::VectorXd ratio;    // utilization, consensus mode only
};

struct DistributedRun {
  std::vector<RoundRecord> trajectory;
  Eigen::VectorXd q_final;
  Eigen::VectorXd ratio_final;
  AgentInit state_final;
  bool converged = false;
  bool diverged = false;
  int rounds = 0;
  std::string message;
};

using PlantFn = std::function<pf::PfSolution(const Eigen::VectorXd& pv_q)>;

/// Synchronous-round simulation of the four-step protocol: measure local
/// voltage, integrate the local duals, descend the Lagrangian with dual
/// information flooded hop-by-hop from group peers, publish. Rejects the
/// equal_ratio kind (that runs through run_consensus_equal_ratio).
DistributedRun run_distributed(const grid::Network& net, const grid::SensitivityMatrix& X,
                               const PlantFn& plant, const pf::PfInput& in,
                               const LowerObjectiveSpec& spec, const RoundConfig& cfg = {},
                               const std::optional<AgentInit>& init = {});

/// Leader-follower consensus on the utilization ratio: the leader integrates
/// its own voltage violation into a command u in [-1, 1]; followers average
/// neighbor estimates; everyone applies q = clip(u * capability, box).
/// Box overrides let a unit be tighter than its capability.
DistributedRun run_consensus_equal_ratio(const grid::Network& net, const PlantFn& plant,
                                         int leader_bus, const pf::PfInput& in,
                                         const RoundConfig& cfg = {},
                                         const std::optional<Eigen::VectorXd>& box_lo = {},
                                         const std::optional<Eigen::VectorXd>& box_hi = {},
                                         const std::optional<AgentInit>& init = {});

/// round, time, then per-agent q, v, duals, ratio columns keyed by bus id.
std::string trajectory_csv(const grid::Network& net, const DistributedRun& run);

}  // namespace vvc::agents
