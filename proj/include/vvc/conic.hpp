#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <limits>
#include <string>
#include <vector>

namespace vvc::conic {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// ||x[norm_vars]||_2 <= x[bound_var]
struct SecondOrderCone {
  std::vector<int> norm_vars;
  int bound_var = -1;
};

/// Sparse continuous conic program with optional binary markers:
///   min c'x  s.t.  A x = b,  G x <= h,  lb <= x <= ub,  cones,
/// binaries additionally restricted to {0,1} by the branch-and-bound layer.
/// Built incrementally; rows and columns are never removed.
struct ConicProgram {
  std::vector<double> c;
  double obj_offset = 0.0;
  std::vector<double> lb, ub;
  std::vector<bool> is_binary;
  std::vector<int> branch_priority;  // lower branches first on fractionality ties
  std::vector<std::string> var_name;

  std::vector<Eigen::Triplet<double>> a_trip;
  std::vector<double> b;
  std::vector<Eigen::Triplet<double>> g_trip;
  std::vector<double> h;
  std::vector<SecondOrderCone> cones;

  int n_vars() const { return static_cast<int>(c.size()); }
  int n_eq() const { return static_cast<int>(b.size()); }
  int n_ineq() const { return static_cast<int>(h.size()); }

  int add_var(const std::string& name, double lo, double hi, double cost = 0.0,
              bool binary = false, int priority = 0);
  /// terms are (variable, coefficient) pairs; duplicates are summed.
  int add_eq(const std::vector<std::pair<int, double>>& terms, double rhs);
  int add_ineq(const std::vector<std::pair<int, double>>& terms, double rhs);
  void add_cone(std::vector<int> norm_vars, int bound_var);

  /// Structural sanity: indices in range, bounds ordered, no variable in two
  /// cones, binaries not cone members. Throws std::runtime_error.
  void validate() const;
};

enum class SolveStatus {
  optimal,
  primal_infeasible,  // duals carry a Farkas ray
  dual_infeasible,    // x carries an unbounded descent ray
  iteration_limit,
  numerical_error,
};

std::string to_string(SolveStatus s);

struct Residuals {
  double primal = 0.0;  // feasibility of equalities/inequalities/cones
  double dual = 0.0;    // stationarity
  double gap = 0.0;     // complementarity
};

struct SocpOptions {
  double feastol = 1e-8;
  double reltol = 1e-8;   // relative duality gap
  double abstol = 1e-9;
  int max_iter = 200;
  double reg = 1e-9;  // static KKT regularization
  bool verbose = false;
};

struct ConicSolution {
  SolveStatus status = SolveStatus::numerical_error;
  Eigen::VectorXd x;
  double objective = 0.0;
  // Duals, sign convention: c + A'y + G'z - z_lb + z_ub - P'u = 0 where P
  // stacks the cone member selections (bound variable first).
  Eigen::VectorXd y_eq;
  Eigen::VectorXd z_ineq;
  Eigen::VectorXd z_lb, z_ub;
  std::vector<Eigen::VectorXd> cone_duals;  // per cone: (u0, u_norm...)
  Residuals residuals;
  int iterations = 0;
  double mu = 0.0;
  std::string message;
  // Duality trace, one entry per iteration: (primal cost, dual cost).
  std::vector<std::pair<double, double>> trace;
};

/// Interior-point solve of the continuous relaxation (binary markers are
/// treated as plain bounded variables).
ConicSolution solve_socp(const ConicProgram& prog, const SocpOptions& opt = {});

/// Residuals of a (solution, program) pair recomputed from first principles,
/// independent of solver internals.
struct KktReport {
  double eq_resid = 0.0;        // max |Ax-b|
  double ineq_viol = 0.0;       // max (Gx-h)+ and bound violations
  double cone_viol = 0.0;       // max (||x_n|| - x_b)+
  double stationarity = 0.0;    // max |c + A'y + G'z - z_lb + z_ub - P'u|
  double dual_sign_viol = 0.0;  // negative parts of z, cone dual violations
  double complementarity = 0.0; // max slack*dual pairing
  double max_residual() const;
};
KktReport check_kkt(const ConicProgram& prog, const ConicSolution& sol);

}  // namespace vvc::conic
