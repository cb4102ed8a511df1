#include "vvc/conic.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vvc::conic {

int ConicProgram::add_var(const std::string& name, double lo, double hi, double cost,
                          bool binary, int priority) {
  c.push_back(cost);
  lb.push_back(lo);
  ub.push_back(hi);
  is_binary.push_back(binary);
  branch_priority.push_back(priority);
  var_name.push_back(name);
  return n_vars() - 1;
}

int ConicProgram::add_eq(const std::vector<std::pair<int, double>>& terms, double rhs) {
  int row = n_eq();
  for (auto [v, coef] : terms)
    if (coef != 0.0) a_trip.emplace_back(row, v, coef);
  b.push_back(rhs);
  return row;
}

int ConicProgram::add_ineq(const std::vector<std::pair<int, double>>& terms, double rhs) {
  int row = n_ineq();
  for (auto [v, coef] : terms)
    if (coef != 0.0) g_trip.emplace_back(row, v, coef);
  h.push_back(rhs);
  return row;
}

void ConicProgram::add_cone(std::vector<int> norm_vars, int bound_var) {
  cones.push_back({std::move(norm_vars), bound_var});
}

void ConicProgram::validate() const {
  const int n = n_vars();
  auto check_var = [&](int v, const char* what) {
    if (v < 0 || v >= n) throw std::runtime_error(std::string(what) + ": variable out of range");
  };
  for (int i = 0; i < n; ++i)
    if (!(lb[i] <= ub[i]))
      throw std::runtime_error("inverted bounds on variable " + var_name[i]);
  for (const auto& t : a_trip) check_var(t.col(), "equality");
  for (const auto& t : g_trip) check_var(t.col(), "inequality");
  std::vector<int> cone_member(n, -1);
  for (size_t k = 0; k < cones.size(); ++k) {
    const auto& cn = cones[k];
    check_var(cn.bound_var, "cone");
    if (cn.norm_vars.empty()) throw std::runtime_error("cone without members");
    std::vector<int> all = cn.norm_vars;
    all.push_back(cn.bound_var);
    for (int v : all) {
      check_var(v, "cone");
      if (is_binary[v]) throw std::runtime_error("binary variable inside a cone");
      if (cone_member[v] != -1) throw std::runtime_error("variable in two cones: " + var_name[v]);
      cone_member[v] = static_cast<int>(k);
    }
  }
  for (size_t i = 0; i < is_binary.size(); ++i)
    if (is_binary[i] && (lb[i] < -1e-9 || ub[i] > 1.0 + 1e-9))
      throw std::runtime_error("binary variable with bounds outside [0,1]: " + var_name[i]);
}

std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::primal_infeasible: return "primal_infeasible";
    case SolveStatus::dual_infeasible: return "dual_infeasible";
    case SolveStatus::iteration_limit: return "iteration_limit";
    case SolveStatus::numerical_error: return "numerical_error";
  }
  return "unknown";
}

double KktReport::max_residual() const {
  return std::max({eq_resid, ineq_viol, cone_viol, stationarity, dual_sign_viol,
                   complementarity});
}

namespace {

using Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// ---------------------------------------------------------------------------
// Cone layout and Jordan-algebra helpers. The inequality slack lives in
// K = R+^nl x Q^{d1} x ... ; all vectors below are flat of size m.
// ---------------------------------------------------------------------------

struct ConeLayout {
  int nl = 0;                  // leading nonnegative-orthant coordinates
  std::vector<int> soc_start;  // offsets of the second-order blocks
  std::vector<int> soc_dim;
  int m = 0;
  int degree = 0;  // nl + number of SOC blocks

  void finish() {
    m = nl;
    for (int d : soc_dim) m += d;
    degree = nl + static_cast<int>(soc_dim.size());
  }
};

VectorXd cone_identity(const ConeLayout& lay) {
  VectorXd e = VectorXd::Zero(lay.m);
  e.head(lay.nl).setOnes();
  for (size_t k = 0; k < lay.soc_dim.size(); ++k) e[lay.soc_start[k]] = 1.0;
  return e;
}

// Smallest spectral value: min over LP coords and SOC (u0 - ||u1||).
double min_eig(const ConeLayout& lay, const VectorXd& u) {
  double m = std::numeric_limits<double>::infinity();
  for (int i = 0; i < lay.nl; ++i) m = std::min(m, u[i]);
  for (size_t k = 0; k < lay.soc_dim.size(); ++k) {
    int s = lay.soc_start[k], d = lay.soc_dim[k];
    m = std::min(m, u[s] - u.segment(s + 1, d - 1).norm());
  }
  return m;
}

VectorXd jordan_prod(const ConeLayout& lay, const VectorXd& u, const VectorXd& v) {
  VectorXd w(lay.m);
  w.head(lay.nl) = u.head(lay.nl).cwiseProduct(v.head(lay.nl));
  for (size_t k = 0; k < lay.soc_dim.size(); ++k) {
    int s = lay.soc_start[k], d = lay.soc_dim[k];
    w[s] = u.segment(s, d).dot(v.segment(s, d));
    w.segment(s + 1, d - 1) =
        u[s] * v.segment(s + 1, d - 1) + v[s] * u.segment(s + 1, d - 1);
  }
  return w;
}

// Solve lambda o x = w for x (inverse of the arrow operator).
VectorXd jordan_solve(const ConeLayout& lay, const VectorXd& lam, const VectorXd& w) {
  VectorXd x(lay.m);
  x.head(lay.nl) = w.head(lay.nl).cwiseQuotient(lam.head(lay.nl));
  for (size_t k = 0; k < lay.soc_dim.size(); ++k) {
    int s = lay.soc_start[k], d = lay.soc_dim[k];
    double l0 = lam[s];
    auto l1 = lam.segment(s + 1, d - 1);
    double det = l0 * l0 - l1.squaredNorm();
    double x0 = (l0 * w[s] - l1.dot(w.segment(s + 1, d - 1))) / det;
    x[s] = x0;
    x.segment(s + 1, d - 1) = (w.segment(s + 1, d - 1) - x0 * l1) / l0;
  }
  return x;
}

// Largest step alpha with u + alpha d staying in the cone (u interior).
double max_step(const ConeLayout& lay, const VectorXd& u, const VectorXd& d) {
  double alpha = std::numeric_limits<double>::infinity();
  for (int i = 0; i < lay.nl; ++i)
    if (d[i] < 0.0) alpha = std::min(alpha, -u[i] / d[i]);
  for (size_t k = 0; k < lay.soc_dim.size(); ++k) {
    int s = lay.soc_start[k], dim = lay.soc_dim[k];
    double u0 = u[s], d0 = d[s];
    auto u1 = u.segment(s + 1, dim - 1);
    auto d1 = d.segment(s + 1, dim - 1);
    double a = d0 * d0 - d1.squaredNorm();
    double bq = u0 * d0 - u1.dot(d1);
    double c0 = u0 * u0 - u1.squaredNorm();
    // Roots of c0 + 2 bq t + a t^2; first positive crossing bounds the step.
    double best = std::numeric_limits<double>::infinity();
    if (std::abs(a) < 1e-14) {
      if (bq < 0.0) best = -c0 / (2.0 * bq);
    } else {
      double disc = bq * bq - a * c0;
      if (disc >= 0.0) {
        double sq = std::sqrt(disc);
        for (double root : {(-bq - sq) / a, (-bq + sq) / a})
          if (root > 0.0) best = std::min(best, root);
      }
    }
    alpha = std::min(alpha, best);
  }
  return alpha;
}

// Nesterov-Todd scaling state. W maps the dual to the scaled point,
// lambda = W z = W^{-1} s.
struct Scaling {
  const ConeLayout* lay = nullptr;
  VectorXd w_lp;                     // per LP coordinate, W = diag(w_lp)
  std::vector<VectorXd> wbar;        // per SOC block
  std::vector<double> eta;
  VectorXd lambda;

  bool compute(const ConeLayout& layout, const VectorXd& s, const VectorXd& z) {
    lay = &layout;
    w_lp.resize(layout.nl);
    for (int i = 0; i < layout.nl; ++i) {
      if (s[i] <= 0.0 || z[i] <= 0.0) return false;
      w_lp[i] = std::sqrt(s[i] / z[i]);
    }
    wbar.assign(layout.soc_dim.size(), {});
    eta.assign(layout.soc_dim.size(), 1.0);
    for (size_t k = 0; k < layout.soc_dim.size(); ++k) {
      int st = layout.soc_start[k], d = layout.soc_dim[k];
      auto sb = s.segment(st, d);
      auto zb = z.segment(st, d);
      double sdet = sb[0] * sb[0] - sb.tail(d - 1).squaredNorm();
      double zdet = zb[0] * zb[0] - zb.tail(d - 1).squaredNorm();
      if (sdet <= 0.0 || zdet <= 0.0 || sb[0] <= 0.0 || zb[0] <= 0.0) return false;
      VectorXd sn = sb / std::sqrt(sdet);
      VectorXd zn = zb / std::sqrt(zdet);
      double gamma = std::sqrt((1.0 + sn.dot(zn)) / 2.0);
      VectorXd w = zn;
      w.tail(d - 1) = -w.tail(d - 1);  // J z_normalized
      w = (sn + w) / (2.0 * gamma);
      wbar[k] = w;
      eta[k] = std::pow(sdet / zdet, 0.25);
    }
    lambda = apply(z);
    return true;
  }

  // W v via the bordered square-root form.
  VectorXd apply(const VectorXd& v) const {
    VectorXd out(lay->m);
    out.head(lay->nl) = w_lp.cwiseProduct(v.head(lay->nl));
    for (size_t k = 0; k < lay->soc_dim.size(); ++k) {
      int st = lay->soc_start[k], d = lay->soc_dim[k];
      const VectorXd& w = wbar[k];
      auto v1 = v.segment(st + 1, d - 1);
      auto w1 = w.tail(d - 1);
      double w1v1 = w1.dot(v1);
      out[st] = eta[k] * (w[0] * v[st] + w1v1);
      out.segment(st + 1, d - 1) =
          eta[k] * (v[st] * w1 + v1 + (w1v1 / (1.0 + w[0])) * w1);
    }
    return out;
  }

  VectorXd apply_inv(const VectorXd& v) const {
    VectorXd out(lay->m);
    out.head(lay->nl) = v.head(lay->nl).cwiseQuotient(w_lp);
    for (size_t k = 0; k < lay->soc_dim.size(); ++k) {
      int st = lay->soc_start[k], d = lay->soc_dim[k];
      const VectorXd& w = wbar[k];
      auto v1 = v.segment(st + 1, d - 1);
      auto w1 = w.tail(d - 1);
      double w1v1 = w1.dot(v1);
      out[st] = (w[0] * v[st] - w1v1) / eta[k];
      out.segment(st + 1, d - 1) =
          (-v[st] * w1 + v1 + (w1v1 / (1.0 + w[0])) * w1) / eta[k];
    }
    return out;
  }

  // Append the lower triangle of W^2 at diagonal offset `off` (negated).
  void add_neg_w2(std::vector<Triplet>& trips, int off) const {
    for (int i = 0; i < lay->nl; ++i)
      trips.emplace_back(off + i, off + i, -w_lp[i] * w_lp[i]);
    for (size_t k = 0; k < lay->soc_dim.size(); ++k) {
      int st = off + lay->soc_start[k], d = lay->soc_dim[k];
      const VectorXd& w = wbar[k];
      double e2 = eta[k] * eta[k];
      // W^2 = eta^2 (2 w w' - J), J = diag(1, -I).
      for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) {
          double val = 2.0 * w[i] * w[j];
          if (i == j) val += (i == 0 ? -1.0 : 1.0);
          trips.emplace_back(st + i, st + j, -e2 * val);
        }
    }
  }
};

// ---------------------------------------------------------------------------
// Standard form:  min c'x  s.t.  A x = b,  G x + s = h,  s in K.
// Fixed variables are substituted out unless they belong to a cone, in which
// case they stay and gain an equality row.
// ---------------------------------------------------------------------------

struct StdForm {
  int n = 0;
  VectorXd c;
  double c0 = 0.0;
  SpMat A, At;
  VectorXd b;
  SpMat G, Gt;
  VectorXd h;
  ConeLayout lay;

  // Mapping back to the original program.
  std::vector<int> var_map;     // original var -> std var (-1 if substituted)
  std::vector<double> fixed;    // original n, value where substituted
  std::vector<int> eq_map;      // original eq row -> std row (-1 if dropped)
  int n_extra_eq = 0;           // fixing rows appended for cone members
  std::vector<int> extra_eq_var;
  std::vector<int> ineq_map;    // original ineq row -> G row (-1 if dropped)
  std::vector<int> lb_row;      // original var -> G row of its lower bound
  std::vector<int> ub_row;
  std::vector<int> cone_row;    // cone k -> first G row of its block

  // Immediate presolve outcome, if any.
  bool decided = false;
  SolveStatus early_status = SolveStatus::optimal;
  std::string early_message;
  int bad_eq_row = -1;    // inconsistent fixed equality row
  int bad_ineq_row = -1;  // violated constant inequality row
};

constexpr double kFixTol = 1e-12;

StdForm build_std_form(const ConicProgram& p) {
  StdForm f;
  const int n0 = p.n_vars();

  std::vector<bool> in_cone(n0, false);
  for (const auto& cn : p.cones) {
    in_cone[cn.bound_var] = true;
    for (int v : cn.norm_vars) in_cone[v] = true;
  }

  f.var_map.assign(n0, -1);
  f.fixed.assign(n0, 0.0);
  std::vector<bool> subst(n0, false);
  int n = 0;
  for (int j = 0; j < n0; ++j) {
    if (p.ub[j] - p.lb[j] <= kFixTol && !in_cone[j]) {
      subst[j] = true;
      f.fixed[j] = 0.5 * (p.lb[j] + p.ub[j]);
    } else {
      f.var_map[j] = n++;
    }
  }
  f.n = n;

  f.c = VectorXd::Zero(n);
  f.c0 = p.obj_offset;
  for (int j = 0; j < n0; ++j) {
    if (subst[j])
      f.c0 += p.c[j] * f.fixed[j];
    else
      f.c[f.var_map[j]] = p.c[j];
  }

  // Equalities: substitute fixed vars, drop empty rows, then append a fixing
  // row per pinned cone member.
  std::vector<std::vector<Triplet>> arows(p.n_eq());
  VectorXd brhs = Eigen::Map<const VectorXd>(p.b.data(), p.n_eq());
  for (const auto& t : p.a_trip) {
    if (subst[t.col()])
      brhs[t.row()] -= t.value() * f.fixed[t.col()];
    else
      arows[t.row()].emplace_back(t.row(), f.var_map[t.col()], t.value());
  }
  std::vector<Triplet> atr;
  std::vector<double> bv;
  f.eq_map.assign(p.n_eq(), -1);
  for (int r = 0; r < p.n_eq(); ++r) {
    if (arows[r].empty()) {
      double scale = 1.0 + std::abs(p.b[r]);
      if (std::abs(brhs[r]) > 1e-9 * scale) {
        f.decided = true;
        f.early_status = SolveStatus::primal_infeasible;
        f.early_message = "equality row " + std::to_string(r) + " fixed inconsistent";
        f.bad_eq_row = r;
        return f;
      }
      continue;
    }
    int nr = static_cast<int>(bv.size());
    f.eq_map[r] = nr;
    for (auto& t : arows[r]) atr.emplace_back(nr, t.col(), t.value());
    bv.push_back(brhs[r]);
  }
  for (int j = 0; j < n0; ++j) {
    if (p.ub[j] - p.lb[j] <= kFixTol && in_cone[j]) {
      int nr = static_cast<int>(bv.size());
      atr.emplace_back(nr, f.var_map[j], 1.0);
      bv.push_back(0.5 * (p.lb[j] + p.ub[j]));
      f.extra_eq_var.push_back(j);
      ++f.n_extra_eq;
    }
  }

  // Inequalities: user rows, bounds, cone selections.
  std::vector<Triplet> gtr;
  std::vector<double> hv;
  std::vector<std::vector<Triplet>> grows(p.n_ineq());
  VectorXd hrhs = Eigen::Map<const VectorXd>(p.h.data(), p.n_ineq());
  for (const auto& t : p.g_trip) {
    if (subst[t.col()])
      hrhs[t.row()] -= t.value() * f.fixed[t.col()];
    else
      grows[t.row()].emplace_back(t.row(), f.var_map[t.col()], t.value());
  }
  f.ineq_map.assign(p.n_ineq(), -1);
  for (int r = 0; r < p.n_ineq(); ++r) {
    if (grows[r].empty()) {
      double scale = 1.0 + std::abs(p.h[r]);
      if (hrhs[r] < -1e-9 * scale) {
        f.decided = true;
        f.early_status = SolveStatus::primal_infeasible;
        f.early_message = "inequality row " + std::to_string(r) + " fixed violated";
        f.bad_ineq_row = r;
        return f;
      }
      continue;
    }
    int nr = static_cast<int>(hv.size());
    f.ineq_map[r] = nr;
    for (auto& t : grows[r]) gtr.emplace_back(nr, t.col(), t.value());
    hv.push_back(hrhs[r]);
  }
  f.lb_row.assign(n0, -1);
  f.ub_row.assign(n0, -1);
  for (int j = 0; j < n0; ++j) {
    if (subst[j]) continue;
    if (p.lb[j] > -kInf && p.ub[j] - p.lb[j] > kFixTol) {
      int nr = static_cast<int>(hv.size());
      f.lb_row[j] = nr;
      gtr.emplace_back(nr, f.var_map[j], -1.0);
      hv.push_back(-p.lb[j]);
    }
    if (p.ub[j] < kInf && p.ub[j] - p.lb[j] > kFixTol) {
      int nr = static_cast<int>(hv.size());
      f.ub_row[j] = nr;
      gtr.emplace_back(nr, f.var_map[j], 1.0);
      hv.push_back(p.ub[j]);
    }
  }
  f.lay.nl = static_cast<int>(hv.size());
  for (const auto& cn : p.cones) {
    int nr = static_cast<int>(hv.size());
    f.cone_row.push_back(nr);
    f.lay.soc_start.push_back(nr);
    f.lay.soc_dim.push_back(static_cast<int>(cn.norm_vars.size()) + 1);
    gtr.emplace_back(nr, f.var_map[cn.bound_var], -1.0);
    hv.push_back(0.0);
    for (int v : cn.norm_vars) {
      gtr.emplace_back(static_cast<int>(hv.size()), f.var_map[v], -1.0);
      hv.push_back(0.0);
    }
  }
  f.lay.finish();

  f.A = SpMat(static_cast<int>(bv.size()), n);
  f.A.setFromTriplets(atr.begin(), atr.end());
  f.b = Eigen::Map<VectorXd>(bv.data(), bv.size());
  f.G = SpMat(static_cast<int>(hv.size()), n);
  f.G.setFromTriplets(gtr.begin(), gtr.end());
  f.h = Eigen::Map<VectorXd>(hv.data(), hv.size());
  f.At = f.A.transpose();
  f.Gt = f.G.transpose();
  return f;
}

// ---------------------------------------------------------------------------
// KKT solver: regularized quasi-definite LDL' with iterative refinement.
// ---------------------------------------------------------------------------

struct KktSolver {
  int n = 0, p = 0, m = 0;
  SpMat K;  // lower triangle, with static regularization
  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  bool analyzed = false;
  double reg = 1e-9;

  bool factor(const StdForm& f, const Scaling& sc) {
    n = f.n;
    p = static_cast<int>(f.b.size());
    m = f.lay.m;
    const int N = n + p + m;
    std::vector<Triplet> trips;
    trips.reserve(f.A.nonZeros() + f.G.nonZeros() + N + 4 * m);
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, reg);
    for (int k = 0; k < f.A.outerSize(); ++k)
      for (SpMat::InnerIterator it(f.A, k); it; ++it)
        trips.emplace_back(n + it.row(), it.col(), it.value());
    for (int k = 0; k < f.G.outerSize(); ++k)
      for (SpMat::InnerIterator it(f.G, k); it; ++it)
        trips.emplace_back(n + p + it.row(), it.col(), it.value());
    for (int i = 0; i < p; ++i) trips.emplace_back(n + i, n + i, -reg);
    sc.add_neg_w2(trips, n + p);
    for (int i = 0; i < m; ++i) trips.emplace_back(n + p + i, n + p + i, -reg);

    K = SpMat(N, N);
    K.setFromTriplets(trips.begin(), trips.end());
    if (!analyzed) {
      ldlt.analyzePattern(K);
      analyzed = true;
    }
    ldlt.factorize(K);
    return ldlt.info() == Eigen::Success;
  }

  // Solve against the unregularized KKT operator by refinement.
  VectorXd solve(const StdForm& f, const Scaling& sc, const VectorXd& rhs) const {
    auto apply_true = [&](const VectorXd& v) {
      VectorXd out(n + p + m);
      VectorXd vx = v.head(n), vy = v.segment(n, p), vz = v.tail(m);
      out.head(n) = f.At * vy + f.Gt * vz;
      out.segment(n, p) = f.A * vx;
      out.tail(m) = f.G * vx - sc.apply(sc.apply(vz));
      return out;
    };
    VectorXd u = ldlt.solve(rhs);
    for (int it = 0; it < 2; ++it) {
      VectorXd r = rhs - apply_true(u);
      u += ldlt.solve(r);
    }
    return u;
  }
};

struct IpmState {
  VectorXd x, y, z, s;
  double tau = 1.0, kappa = 1.0;
};

// Split helper for KKT solutions.
struct XyzView {
  VectorXd x, y, z;
};
XyzView split(const VectorXd& u, int n, int p, int m) {
  return {u.head(n), u.segment(n, p), u.tail(m)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Main solve
// ---------------------------------------------------------------------------

namespace {

ConicSolution map_back(const ConicProgram& p, const StdForm& f, const IpmState& st,
                       SolveStatus status, double scale_primal, double scale_dual) {
  ConicSolution sol;
  sol.status = status;
  const int n0 = p.n_vars();
  sol.x = VectorXd::Zero(n0);
  for (int j = 0; j < n0; ++j)
    sol.x[j] = f.var_map[j] >= 0 ? st.x[f.var_map[j]] * scale_primal : f.fixed[j];
  sol.objective = 0.0;
  for (int j = 0; j < n0; ++j) sol.objective += p.c[j] * sol.x[j];
  sol.objective += p.obj_offset;

  sol.y_eq = VectorXd::Zero(p.n_eq());
  for (int r = 0; r < p.n_eq(); ++r)
    if (f.eq_map[r] >= 0) sol.y_eq[r] = st.y[f.eq_map[r]] * scale_dual;
  sol.z_ineq = VectorXd::Zero(p.n_ineq());
  for (int r = 0; r < p.n_ineq(); ++r)
    if (f.ineq_map[r] >= 0) sol.z_ineq[r] = st.z[f.ineq_map[r]] * scale_dual;
  sol.z_lb = VectorXd::Zero(n0);
  sol.z_ub = VectorXd::Zero(n0);
  for (int j = 0; j < n0; ++j) {
    if (f.lb_row[j] >= 0) sol.z_lb[j] = st.z[f.lb_row[j]] * scale_dual;
    if (f.ub_row[j] >= 0) sol.z_ub[j] = st.z[f.ub_row[j]] * scale_dual;
  }
  for (size_t k = 0; k < p.cones.size(); ++k) {
    int row = f.cone_row[k];
    int d = static_cast<int>(p.cones[k].norm_vars.size()) + 1;
    sol.cone_duals.push_back(st.z.segment(row, d) * scale_dual);
  }

  // Duals pinned to substituted variables: absorb the stationarity residual
  // into the appropriate bound multiplier so downstream checks close.
  if (status == SolveStatus::optimal) {
    VectorXd stat = VectorXd::Zero(n0);
    for (int j = 0; j < n0; ++j) stat[j] = p.c[j];
    for (const auto& t : p.a_trip) stat[t.col()] += sol.y_eq[t.row()] * t.value();
    for (const auto& t : p.g_trip) stat[t.col()] += sol.z_ineq[t.row()] * t.value();
    for (size_t k = 0; k < p.cones.size(); ++k) {
      stat[p.cones[k].bound_var] -= sol.cone_duals[k][0];
      for (size_t i = 0; i < p.cones[k].norm_vars.size(); ++i)
        stat[p.cones[k].norm_vars[i]] -= sol.cone_duals[k][static_cast<int>(i) + 1];
    }
    for (int j = 0; j < n0; ++j) {
      if (f.var_map[j] >= 0) continue;
      if (stat[j] > 0.0)
        sol.z_lb[j] = stat[j];
      else
        sol.z_ub[j] = -stat[j];
    }
    // Fixing rows of pinned cone members act as a pair of bound multipliers.
    for (int k = 0; k < f.n_extra_eq; ++k) {
      int j = f.extra_eq_var[k];
      int row = static_cast<int>(f.b.size()) - f.n_extra_eq + k;
      double yv = st.y[row] * scale_dual;
      if (yv < 0.0)
        sol.z_lb[j] = -yv;
      else
        sol.z_ub[j] = yv;
    }
  }
  return sol;
}

ConicSolution solve_no_ineq(const ConicProgram& p, const StdForm& f, const SocpOptions&) {
  // Equality-constrained linear objective. Normal equations with a small
  // shift stay factorable even for rank-deficient A; feasibility and
  // boundedness both reduce to projection residuals.
  const int n = f.n, m_eq = static_cast<int>(f.b.size());
  IpmState st;
  st.z = VectorXd::Zero(0);
  st.s = VectorXd::Zero(0);

  if (m_eq == 0) {
    st.x = VectorXd::Zero(n);
    st.y = VectorXd::Zero(0);
    double dr = f.c.lpNorm<Eigen::Infinity>();
    if (dr > 1e-9) {
      st.x = -f.c;  // descent ray
      auto sol = map_back(p, f, st, SolveStatus::dual_infeasible, 1.0, 1.0);
      sol.message = "objective unbounded on the equality subspace";
      return sol;
    }
    return map_back(p, f, st, SolveStatus::optimal, 1.0, 1.0);
  }

  SpMat aat = (f.A * f.At).pruned();
  double diag_max = 0.0;
  for (int i = 0; i < m_eq; ++i) diag_max = std::max(diag_max, aat.coeff(i, i));
  double delta = 1e-12 * (1.0 + diag_max);
  SpMat shifted = aat;
  for (int i = 0; i < m_eq; ++i) shifted.coeffRef(i, i) += delta;
  Eigen::SimplicialLLT<SpMat, Eigen::Lower> llt(shifted);
  if (llt.info() != Eigen::Success) {
    ConicSolution sol;
    sol.status = SolveStatus::numerical_error;
    sol.message = "equality-only factorization failed";
    return sol;
  }
  auto nsolve = [&](const VectorXd& rhs) {
    VectorXd w = llt.solve(rhs);
    for (int it = 0; it < 2; ++it) w += llt.solve(rhs - aat * w);
    return w;
  };

  VectorXd w = nsolve(f.b);
  st.x = f.At * w;
  double eqr = (f.A * st.x - f.b).lpNorm<Eigen::Infinity>();
  if (eqr > 1e-6 * (1.0 + f.b.lpNorm<Eigen::Infinity>())) {
    ConicSolution sol;
    sol.status = SolveStatus::primal_infeasible;
    sol.x = VectorXd::Zero(p.n_vars());
    sol.y_eq = VectorXd::Zero(p.n_eq());
    sol.z_ineq = VectorXd::Zero(p.n_ineq());
    sol.z_lb = VectorXd::Zero(p.n_vars());
    sol.z_ub = VectorXd::Zero(p.n_vars());
    // Farkas direction: the component of b outside range(A). It satisfies
    // A'y ~ 0, and the scaling pins b'y to -1.
    VectorXd resid = f.b - f.A * st.x;
    VectorXd ray = -resid / resid.squaredNorm();
    for (int r = 0; r < p.n_eq(); ++r)
      if (f.eq_map[r] >= 0) sol.y_eq[r] = ray[f.eq_map[r]];
    sol.message = "inconsistent equalities";
    return sol;
  }

  st.y = -nsolve(f.A * f.c);
  double dr = (f.c + f.At * st.y).lpNorm<Eigen::Infinity>();
  if (dr > 1e-6 * (1.0 + f.c.lpNorm<Eigen::Infinity>())) {
    st.x = -(f.c + f.At * st.y);  // descent ray in null(A)
    auto sol = map_back(p, f, st, SolveStatus::dual_infeasible, 1.0, 1.0);
    sol.message = "objective unbounded on the equality subspace";
    return sol;
  }
  auto sol = map_back(p, f, st, SolveStatus::optimal, 1.0, 1.0);
  sol.residuals.primal = eqr;
  sol.residuals.dual = dr;
  return sol;
}

}  // namespace

ConicSolution solve_socp(const ConicProgram& prog, const SocpOptions& opt) {
  prog.validate();
  StdForm f = build_std_form(prog);

  if (f.decided) {
    ConicSolution sol;
    sol.status = f.early_status;
    sol.message = f.early_message;
    sol.x = VectorXd::Zero(prog.n_vars());
    for (int j = 0; j < prog.n_vars(); ++j)
      if (f.var_map[j] < 0) sol.x[j] = f.fixed[j];
    sol.y_eq = VectorXd::Zero(prog.n_eq());
    sol.z_ineq = VectorXd::Zero(prog.n_ineq());
    sol.z_lb = VectorXd::Zero(prog.n_vars());
    sol.z_ub = VectorXd::Zero(prog.n_vars());
    // Mark the offending row; bound duals of the fixed variables complete
    // the certificate but carry no extra information here.
    if (f.bad_eq_row >= 0) sol.y_eq[f.bad_eq_row] = 1.0;
    if (f.bad_ineq_row >= 0) sol.z_ineq[f.bad_ineq_row] = 1.0;
    return sol;
  }

  if (f.n == 0) {
    // Everything fixed; constraints were checked during presolve.
    IpmState st;
    st.x = VectorXd::Zero(0);
    st.y = VectorXd::Zero(f.b.size());
    st.z = VectorXd::Zero(f.lay.m);
    return map_back(prog, f, st, SolveStatus::optimal, 1.0, 1.0);
  }

  if (f.lay.m == 0) return solve_no_ineq(prog, f, opt);

  const int n = f.n, p = static_cast<int>(f.b.size()), m = f.lay.m;
  const double norm_bh = 1.0 + std::hypot(f.b.norm(), f.h.norm());
  const double norm_c = 1.0 + f.c.norm();

  KktSolver kkt;
  kkt.reg = opt.reg;

  // Unit scaling for the starting point.
  Scaling sc;
  {
    VectorXd e = cone_identity(f.lay);
    if (!sc.compute(f.lay, e, e)) throw std::runtime_error("cone identity rejected");
  }
  if (!kkt.factor(f, sc)) {
    for (int bump = 0; bump < 3 && kkt.ldlt.info() != Eigen::Success; ++bump) {
      kkt.reg *= 100.0;
      kkt.factor(f, sc);
    }
    if (kkt.ldlt.info() != Eigen::Success) {
      ConicSolution sol;
      sol.status = SolveStatus::numerical_error;
      sol.message = "initial KKT factorization failed";
      return sol;
    }
  }

  IpmState st;
  {
    VectorXd rhs = VectorXd::Zero(n + p + m);
    rhs.segment(n, p) = f.b;
    rhs.tail(m) = f.h;
    auto u = split(kkt.solve(f, sc, rhs), n, p, m);
    st.x = u.x;
    st.s = -u.z;  // h - Gx
    double me = min_eig(f.lay, st.s);
    if (me < 1e-4) st.s += (1.0 - me) * cone_identity(f.lay);

    rhs.setZero();
    rhs.head(n) = -f.c;
    auto ud = split(kkt.solve(f, sc, rhs), n, p, m);
    st.y = ud.y;
    st.z = ud.z;
    me = min_eig(f.lay, st.z);
    if (me < 1e-4) st.z += (1.0 - me) * cone_identity(f.lay);
  }
  st.tau = 1.0;
  st.kappa = 1.0;

  ConicSolution out;
  const VectorXd e = cone_identity(f.lay);
  const double deg = f.lay.degree + 1;

  for (int iter = 0; iter <= opt.max_iter; ++iter) {
    VectorXd rx = f.At * st.y + f.Gt * st.z + f.c * st.tau;
    VectorXd ry = f.A * st.x - f.b * st.tau;
    VectorXd rz = f.G * st.x + st.s - f.h * st.tau;
    double cx = f.c.dot(st.x), by = f.b.dot(st.y), hz = f.h.dot(st.z);
    double rkap = cx + by + hz + st.kappa;
    double mu = (st.s.dot(st.z) + st.tau * st.kappa) / deg;
    out.mu = mu;
    out.iterations = iter;

    double pcost = cx / st.tau + f.c0;
    double dcost = -(by + hz) / st.tau + f.c0;
    out.trace.push_back({pcost, dcost});
    double gap_abs = st.s.dot(st.z) / (st.tau * st.tau);
    double relgap = gap_abs / std::max(1.0, std::abs(pcost));
    double pres = std::hypot(ry.norm(), rz.norm()) / (st.tau * norm_bh);
    double dres = rx.norm() / (st.tau * norm_c);

    if (pres <= opt.feastol && dres <= opt.feastol &&
        (gap_abs <= opt.abstol || relgap <= opt.reltol)) {
      double inv_tau = 1.0 / st.tau;
      IpmState fin = st;
      fin.x *= inv_tau;
      fin.y *= inv_tau;
      fin.z *= inv_tau;
      fin.s *= inv_tau;
      auto sol = map_back(prog, f, fin, SolveStatus::optimal, 1.0, 1.0);
      sol.iterations = iter;
      sol.mu = mu;
      sol.trace = std::move(out.trace);
      sol.residuals.primal = pres;
      sol.residuals.dual = dres;
      sol.residuals.gap = gap_abs;
      return sol;
    }

    // Certificates. A'y + G'z = rx - c tau; Ax = ry + b tau; Gx + s = rz + h tau.
    if (by + hz < -1e-10) {
      double scale = -1.0 / (by + hz);
      double cert = (rx - f.c * st.tau).norm() * scale;
      if (cert <= opt.feastol * norm_c) {
        IpmState ray = st;
        ray.x.setZero();
        ray.y *= scale;
        ray.z *= scale;
        auto sol = map_back(prog, f, ray, SolveStatus::primal_infeasible, 1.0, 1.0);
        sol.message = "primal infeasibility certificate (Farkas dual ray)";
        sol.iterations = iter;
        sol.trace = std::move(out.trace);
        return sol;
      }
    }
    if (cx < -1e-10) {
      double scale = -1.0 / cx;
      double cert_a = (ry + f.b * st.tau).norm() * scale;
      double cert_g = (rz + f.h * st.tau).norm() * scale;
      if (cert_a <= opt.feastol * norm_bh && cert_g <= opt.feastol * norm_bh) {
        IpmState ray = st;
        ray.x *= scale;
        ray.y.setZero();
        ray.z.setZero();
        auto sol = map_back(prog, f, ray, SolveStatus::dual_infeasible, 1.0, 1.0);
        sol.message = "unbounded descent ray";
        sol.iterations = iter;
        sol.trace = std::move(out.trace);
        return sol;
      }
    }

    if (iter == opt.max_iter) break;

    if (!sc.compute(f.lay, st.s, st.z)) {
      out.message = "iterate left the cone interior";
      break;
    }
    if (!kkt.factor(f, sc)) {
      bool ok = false;
      for (int bump = 0; bump < 3 && !ok; ++bump) {
        kkt.reg *= 100.0;
        ok = kkt.factor(f, sc);
      }
      if (!ok) {
        out.message = "KKT factorization failed";
        break;
      }
    }

    // Static column: K u1 = (-c, b, h).
    VectorXd rhs1(n + p + m);
    rhs1.head(n) = -f.c;
    rhs1.segment(n, p) = f.b;
    rhs1.tail(m) = f.h;
    auto u1 = split(kkt.solve(f, sc, rhs1), n, p, m);
    double denom = f.c.dot(u1.x) + f.b.dot(u1.y) + f.h.dot(u1.z) - st.kappa / st.tau;

    auto direction = [&](const VectorXd& ds_tilde, double dtk, double res_scale,
                         VectorXd& dx, VectorXd& dy, VectorXd& dz, VectorXd& ds,
                         double& dtau, double& dkappa) {
      VectorXd rhs(n + p + m);
      rhs.head(n) = -res_scale * rx;
      rhs.segment(n, p) = -res_scale * ry;
      rhs.tail(m) = -res_scale * rz - sc.apply(ds_tilde);
      auto u2 = split(kkt.solve(f, sc, rhs), n, p, m);
      double num =
          -res_scale * rkap - dtk / st.tau - (f.c.dot(u2.x) + f.b.dot(u2.y) + f.h.dot(u2.z));
      dtau = num / denom;
      dx = u2.x + dtau * u1.x;
      dy = u2.y + dtau * u1.y;
      dz = u2.z + dtau * u1.z;
      ds = sc.apply(ds_tilde - sc.apply(dz));
      dkappa = (dtk - st.kappa * dtau) / st.tau;
    };

    // Affine direction.
    VectorXd dx_a, dy_a, dz_a, ds_a;
    double dtau_a, dkap_a;
    direction(-sc.lambda, -st.tau * st.kappa, 1.0, dx_a, dy_a, dz_a, ds_a, dtau_a, dkap_a);

    VectorXd dz_scaled = sc.apply(dz_a);
    VectorXd ds_scaled = sc.apply_inv(ds_a);
    double alpha = std::min(max_step(f.lay, sc.lambda, ds_scaled),
                            max_step(f.lay, sc.lambda, dz_scaled));
    if (dtau_a < 0.0) alpha = std::min(alpha, -st.tau / dtau_a);
    if (dkap_a < 0.0) alpha = std::min(alpha, -st.kappa / dkap_a);
    alpha = std::min(alpha, 1.0);
    double sigma = std::pow(1.0 - alpha, 3);
    sigma = std::clamp(sigma, 1e-8, 0.999);

    // Combined direction with Mehrotra correction.
    VectorXd corr = jordan_prod(f.lay, ds_scaled, dz_scaled);
    VectorXd ds_tilde = -sc.lambda + jordan_solve(f.lay, sc.lambda, sigma * mu * e - corr);
    double dtk = -st.tau * st.kappa + sigma * mu - dtau_a * dkap_a;

    VectorXd dx, dy, dz, ds;
    double dtau, dkap;
    direction(ds_tilde, dtk, 1.0 - sigma, dx, dy, dz, ds, dtau, dkap);

    dz_scaled = sc.apply(dz);
    ds_scaled = sc.apply_inv(ds);
    double step = std::min(max_step(f.lay, sc.lambda, ds_scaled),
                           max_step(f.lay, sc.lambda, dz_scaled));
    if (dtau < 0.0) step = std::min(step, -st.tau / dtau);
    if (dkap < 0.0) step = std::min(step, -st.kappa / dkap);
    step = 0.99 * std::min(step, 1.0);
    if (!std::isfinite(step) || step <= 0.0) {
      out.message = "step computation failed";
      break;
    }

    st.x += step * dx;
    st.y += step * dy;
    st.z += step * dz;
    st.s += step * ds;
    st.tau += step * dtau;
    st.kappa += step * dkap;
    if (st.tau <= 0.0 || st.kappa < 0.0) {
      out.message = "tau collapsed";
      break;
    }
  }

  // Iteration cap or numerical stop: return the best current scaled iterate.
  double inv_tau = 1.0 / st.tau;
  IpmState fin = st;
  fin.x *= inv_tau;
  fin.y *= inv_tau;
  fin.z *= inv_tau;
  fin.s *= inv_tau;
  auto sol = map_back(prog, f, fin,
                      out.message.empty() ? SolveStatus::iteration_limit
                                          : SolveStatus::numerical_error,
                      1.0, 1.0);
  sol.iterations = out.iterations;
  sol.mu = out.mu;
  sol.message = out.message.empty() ? "iteration limit reached" : out.message;
  sol.trace = std::move(out.trace);
  VectorXd rx = f.At * fin.y + f.Gt * fin.z + f.c;
  sol.residuals.dual = rx.norm() / norm_c;
  sol.residuals.primal =
      std::hypot((f.A * fin.x - f.b).norm(), (f.G * fin.x + fin.s - f.h).norm()) / norm_bh;
  sol.residuals.gap = fin.s.dot(fin.z);
  return sol;
}

KktReport check_kkt(const ConicProgram& p, const ConicSolution& sol) {
  KktReport rep;
  const int n = p.n_vars();
  const VectorXd& x = sol.x;

  VectorXd ax = VectorXd::Zero(p.n_eq());
  for (const auto& t : p.a_trip) ax[t.row()] += t.value() * x[t.col()];
  for (int r = 0; r < p.n_eq(); ++r)
    rep.eq_resid = std::max(rep.eq_resid, std::abs(ax[r] - p.b[r]));

  VectorXd gx = VectorXd::Zero(p.n_ineq());
  for (const auto& t : p.g_trip) gx[t.row()] += t.value() * x[t.col()];
  for (int r = 0; r < p.n_ineq(); ++r)
    rep.ineq_viol = std::max(rep.ineq_viol, gx[r] - p.h[r]);
  for (int j = 0; j < n; ++j) {
    if (p.lb[j] > -kInf) rep.ineq_viol = std::max(rep.ineq_viol, p.lb[j] - x[j]);
    if (p.ub[j] < kInf) rep.ineq_viol = std::max(rep.ineq_viol, x[j] - p.ub[j]);
  }
  rep.ineq_viol = std::max(rep.ineq_viol, 0.0);

  for (const auto& cn : p.cones) {
    double nn = 0.0;
    for (int v : cn.norm_vars) nn += x[v] * x[v];
    rep.cone_viol = std::max(rep.cone_viol, std::sqrt(nn) - x[cn.bound_var]);
  }
  rep.cone_viol = std::max(rep.cone_viol, 0.0);

  // Stationarity: c + A'y + G'z - z_lb + z_ub - P'u.
  VectorXd stat = Eigen::Map<const VectorXd>(p.c.data(), n);
  for (const auto& t : p.a_trip) stat[t.col()] += sol.y_eq[t.row()] * t.value();
  for (const auto& t : p.g_trip) stat[t.col()] += sol.z_ineq[t.row()] * t.value();
  stat -= sol.z_lb;
  stat += sol.z_ub;
  for (size_t k = 0; k < p.cones.size(); ++k) {
    const auto& cn = p.cones[k];
    const VectorXd& u = sol.cone_duals[k];
    stat[cn.bound_var] -= u[0];
    for (size_t i = 0; i < cn.norm_vars.size(); ++i)
      stat[cn.norm_vars[i]] -= u[static_cast<int>(i) + 1];
  }
  rep.stationarity = stat.lpNorm<Eigen::Infinity>();

  for (int r = 0; r < p.n_ineq(); ++r)
    rep.dual_sign_viol = std::max(rep.dual_sign_viol, -sol.z_ineq[r]);
  for (int j = 0; j < n; ++j) {
    rep.dual_sign_viol = std::max(rep.dual_sign_viol, -sol.z_lb[j]);
    rep.dual_sign_viol = std::max(rep.dual_sign_viol, -sol.z_ub[j]);
  }
  for (const auto& u : sol.cone_duals)
    rep.dual_sign_viol =
        std::max(rep.dual_sign_viol, u.tail(u.size() - 1).norm() - u[0]);
  rep.dual_sign_viol = std::max(rep.dual_sign_viol, 0.0);

  for (int r = 0; r < p.n_ineq(); ++r)
    rep.complementarity =
        std::max(rep.complementarity, std::abs(sol.z_ineq[r] * (p.h[r] - gx[r])));
  for (int j = 0; j < n; ++j) {
    if (p.lb[j] > -kInf)
      rep.complementarity =
          std::max(rep.complementarity, std::abs(sol.z_lb[j] * (x[j] - p.lb[j])));
    if (p.ub[j] < kInf)
      rep.complementarity =
          std::max(rep.complementarity, std::abs(sol.z_ub[j] * (p.ub[j] - x[j])));
  }
  for (size_t k = 0; k < p.cones.size(); ++k) {
    const auto& cn = p.cones[k];
    const VectorXd& u = sol.cone_duals[k];
    double dot = u[0] * x[cn.bound_var];
    for (size_t i = 0; i < cn.norm_vars.size(); ++i)
      dot += u[static_cast<int>(i) + 1] * x[cn.norm_vars[i]];
    rep.complementarity = std::max(rep.complementarity, std::abs(dot));
  }
  return rep;
}

}  // namespace vvc::conic
