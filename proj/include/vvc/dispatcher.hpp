#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "vvc/agents.hpp"
#include "vvc/bnb.hpp"
#include "vvc/conic.hpp"
#include "vvc/grid.hpp"
#include "vvc/powerflow.hpp"

namespace vvc::dispatcher {

/// One dispatch period's inputs: forecast injections plus the device state
/// left by the previous period, which anchors the movement limits.
struct PeriodForecast {
  Eigen::VectorXd load_p, load_q;  // per bus
  Eigen::VectorXd pv_p;            // per pv unit, forecast active output
  std::vector<int> prev_tap;       // per oltc
  std::vector<int> prev_cb;        // per capbank
  double slack_v_sq = 1.0;

  /// Nominal loads, zero pv, devices as stored on the network.
  static PeriodForecast nominal(const grid::Network& net);
  /// Plant input with this forecast's injections and the previous devices.
  pf::PfInput to_pf_input(const grid::Network& net) const;
};

struct DispatchConfig {
  double big_m = 100.0;
  bool audit_big_m = true;
  double audit_fraction = 0.99;  // dual above this fraction of M re-solves with 10M
  double relax_penalty = 1e4;    // weight on squared voltage-band slack in the retry
  int enum_cap = 10000;          // admissible device tuples the oracle will visit
  // The KKT system admits spurious points at device tuples whose true
  // follower response leaves the voltage band off the dual-carrying buses.
  // A decision whose response deviates past fidelity_tol, or whose realized
  // voltages escape the band, excludes its tuple and the search repeats.
  double fidelity_tol = 1e-4;
  int repair_rounds = 5;
  double band_tol = 1e-7;  // slack when classifying voltages as in-band
  bnb::BnbOptions bnb;
  agents::LowerOptions lower;  // inner solves of the enumeration oracle
};

struct DispatchDecision {
  std::vector<int> tap;  // per oltc
  std::vector<int> cb;   // per capbank
  Eigen::VectorXd q;     // predicted inverter reactive outputs
  Eigen::VectorXd lam_lo, lam_hi, mu_lo, mu_hi;  // follower duals (bilevel only)
  Eigen::VectorXd v_sq, l_sq, p_flow, q_flow;
  double objective = 0.0;  // predicted losses sum r*l
  double eps_gap = 0.0;    // conic relaxation gap at the accepted point
  double solve_time_s = 0.0;
  double big_m_used = 0.0;
  int nodes = 0;
  bool feasible = false;
  bool relaxed = false;  // voltage bands were softened to recover a solution
  std::vector<std::string> warnings;
};

/// Assembled single-period program plus the variable maps needed to decode a
/// solution or inspect individual rows.
struct SingleLevelModel {
  conic::ConicProgram prog;
  std::vector<int> v_ix;                         // per bus
  std::vector<int> l_ix, p_ix, qf_ix;            // per branch
  std::vector<int> qg_ix;                        // per pv unit
  std::vector<int> lam_lo_ix, lam_hi_ix, mu_lo_ix, mu_hi_ix;  // per pv unit, -1 if absent
  std::vector<int> z_vlo_ix, z_vhi_ix, z_qlo_ix, z_qhi_ix;    // complementarity binaries
  std::vector<std::vector<int>> tap_ix;          // per oltc, binary per position
  std::vector<std::vector<int>> cb_ix;           // per capbank, binary per unit count 0..n
  Eigen::VectorXd box_lo, box_hi;                // follower boxes used

  int n_binary() const;
  std::vector<int> decode_tap(const Eigen::VectorXd& x) const;
  std::vector<int> decode_cb(const Eigen::VectorXd& x) const;
};

enum class UpperModel { bilevel, model1, model2 };

/// Single-period device dispatch as one conic program: branch-flow physics
/// with the relaxed cone, tap selection as an exact one-hot hull, device
/// movement limits, and (bilevel only) the follower's KKT system with big-M
/// complementarity. soft_voltage replaces hard bus-voltage bands with
/// penalized slack for the infeasibility retry.
SingleLevelModel build_single_level(const grid::Network& net, const PeriodForecast& fc,
                                    const agents::LowerObjectiveSpec& spec,
                                    const DispatchConfig& cfg = {},
                                    UpperModel model = UpperModel::bilevel,
                                    bool soft_voltage = false);

/// Solve the bilevel period dispatch. Ties between equal-loss device tuples
/// break toward fewest movements, then lowest tap, then fewest CB units.
DispatchDecision dispatch_period(const grid::Network& net, const PeriodForecast& fc,
                                 const agents::LowerObjectiveSpec& spec,
                                 const DispatchConfig& cfg = {});

/// Baseline: inverter outputs are upper-level variables (no follower system).
DispatchDecision dispatch_model1(const grid::Network& net, const PeriodForecast& fc,
                                 const DispatchConfig& cfg = {});

/// Baseline: inverters run at unity power factor (q fixed to zero).
DispatchDecision dispatch_model2(const grid::Network& net, const PeriodForecast& fc,
                                 const DispatchConfig& cfg = {});

/// Exact ground truth by enumerating every admissible device tuple: each
/// tuple's follower response comes from the central lower-level solver and
/// its losses from the continuous conic model with q fixed. Throws when the
/// admissible tuple count exceeds cfg.enum_cap.
DispatchDecision enumerate_bilevel(const grid::Network& net, const PeriodForecast& fc,
                                   const agents::LowerObjectiveSpec& spec,
                                   const DispatchConfig& cfg = {});

/// Max per-inverter gap between the decision's predicted q and the central
/// follower solve under the decision's device settings.
double follower_fidelity(const grid::Network& net, const PeriodForecast& fc,
                         const agents::LowerObjectiveSpec& spec, const DispatchDecision& dec,
                         const DispatchConfig& cfg = {});

std::string to_json(const grid::Network& net, const DispatchDecision& dec);

}  // namespace vvc::dispatcher
