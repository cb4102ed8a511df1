#include "vvc/agents.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace vvc::agents {

namespace {

struct GroupDef {
  std::vector<int> members;    // pv indices, ascending
  std::vector<int> cbus;       // bus indices carrying voltage constraints
  std::vector<int> dual_slot;  // pv index where each cbus dual is reported
  QuadObjective quad;
};

}  // namespace

std::vector<std::vector<int>> group_partition(const grid::Network& net,
                                              const LowerObjectiveSpec& spec) {
  const int npv = static_cast<int>(net.pv_units.size());
  std::vector<std::vector<int>> out;
  std::vector<char> seen(npv, 0);
  if (!spec.groups.empty()) {
    for (const auto& bus_ids : spec.groups) {
      std::vector<int> members;
      for (int id : bus_ids) {
        int b = net.index_of(id);
        int pv = net.pv_at_bus[b];
        if (pv < 0)
          throw std::invalid_argument("group bus " + std::to_string(id) + " hosts no pv unit");
        if (seen[pv])
          throw std::invalid_argument("pv bus " + std::to_string(id) + " listed in two groups");
        seen[pv] = 1;
        members.push_back(pv);
      }
      std::sort(members.begin(), members.end());
      if (!members.empty()) out.push_back(std::move(members));
    }
    for (int k = 0; k < npv; ++k)
      if (!seen[k])
        throw std::invalid_argument("pv unit at bus " + std::to_string(net.pv_units[k].bus) +
                                    " missing from the group partition");
  } else {
    std::map<int, std::vector<int>> by_label;
    for (int k = 0; k < npv; ++k) by_label[net.pv_units[k].group].push_back(k);
    for (auto& [label, members] : by_label) out.push_back(std::move(members));
  }
  return out;
}

namespace {

std::vector<GroupDef> make_group_defs(const grid::Network& net, const grid::SensitivityMatrix& X,
                                      const LowerObjectiveSpec& spec,
                                      const Eigen::VectorXd& caps) {
  auto groups = group_partition(net, spec);
  if (spec.kind == ObjectiveKind::equal_ratio && groups.size() != 1)
    throw std::invalid_argument("equal_ratio objective expects a single inverter group");
  std::vector<GroupDef> defs;
  for (auto& members : groups) {
    GroupDef d;
    d.members = std::move(members);
    d.quad = build_objective(net, X, spec, d.members, caps);
    if (spec.kind == ObjectiveKind::equal_ratio) {
      int lb = net.index_of(spec.leader_bus);
      d.cbus = {lb};
      d.dual_slot = {net.pv_at_bus[lb]};
    } else {
      for (int pv : d.members) {
        d.cbus.push_back(X.pv_bus_index[pv]);
        d.dual_slot.push_back(pv);
      }
    }
    defs.push_back(std::move(d));
  }
  return defs;
}

void capability_boxes(const grid::Network& net, const Eigen::VectorXd& pv_p, Eigen::VectorXd& lo,
                      Eigen::VectorXd& hi) {
  const int npv = static_cast<int>(net.pv_units.size());
  if (pv_p.size() != npv)
    throw std::invalid_argument("pv_p has " + std::to_string(pv_p.size()) + " entries, expected " +
                                std::to_string(npv));
  lo.resize(npv);
  hi.resize(npv);
  for (int k = 0; k < npv; ++k) {
    auto [l, h] = grid::q_limits(net.pv_units[k], pv_p[k]);
    lo[k] = l;
    hi[k] = h;
  }
}

struct GroupQpOut {
  Eigen::VectorXd q;                // per member
  Eigen::VectorXd lam_lo, lam_hi;   // per constrained bus
  Eigen::VectorXd mu_lo, mu_hi;     // per member
  bool feasible = true;
};

GroupQpOut solve_group_qp(const grid::Network& net, const grid::SensitivityMatrix& X,
                          const GroupDef& def, const Eigen::VectorXd& q_full,
                          const Eigen::VectorXd& v0, const Eigen::VectorXd& box_lo,
                          const Eigen::VectorXd& box_hi, const conic::SocpOptions& socp) {
  const int m = static_cast<int>(def.members.size());
  const int mc = static_cast<int>(def.cbus.size());

  // Row data shared by the main program and the least-violation fallback.
  std::vector<std::vector<std::pair<int, double>>> up_terms(mc), lo_terms(mc);
  Eigen::VectorXd up_rhs(mc), lo_rhs(mc);
  for (int c = 0; c < mc; ++c) {
    int cb = def.cbus[c];
    double shift = 0.0;
    for (int k = 0; k < m; ++k) {
      double coef = X.full(cb, X.pv_bus_index[def.members[k]]);
      up_terms[c].push_back({k, coef});
      lo_terms[c].push_back({k, -coef});
      shift += coef * q_full[def.members[k]];
    }
    up_rhs[c] = net.buses[cb].v_max_sq - v0[cb] + shift;
    lo_rhs[c] = -(net.buses[cb].v_min_sq - v0[cb] + shift);
  }

  conic::ConicProgram prog;
  std::vector<int> qv(m);
  for (int k = 0; k < m; ++k)
    qv[k] = prog.add_var("q" + std::to_string(net.pv_units[def.members[k]].bus),
                         box_lo[def.members[k]], box_hi[def.members[k]], def.quad.b[k]);
  prog.obj_offset = def.quad.c;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(def.quad.H);
  const Eigen::VectorXd ev = es.eigenvalues();
  double cut = 1e-12 * std::max(1.0, ev.size() > 0 ? ev.cwiseAbs().maxCoeff() : 0.0);
  std::vector<int> keep;
  for (int r = 0; r < ev.size(); ++r)
    if (ev[r] > cut) keep.push_back(r);

  if (!keep.empty()) {
    int s = prog.add_var("obj_epi", 0.0, conic::kInf, 1.0);
    int tp = prog.add_var("epi_hi", 0.0, conic::kInf);
    int tm = prog.add_var("epi_lo", -conic::kInf, conic::kInf);
    prog.add_eq({{tp, 1.0}, {s, -1.0}}, 1.0);
    prog.add_eq({{tm, 1.0}, {s, -1.0}}, -1.0);
    std::vector<int> norm = {tm};
    for (int r : keep) {
      int yr = prog.add_var("epi_n" + std::to_string(r), -conic::kInf, conic::kInf);
      std::vector<std::pair<int, double>> terms = {{yr, 1.0}};
      double scale = 2.0 * std::sqrt(ev[r]);
      for (int k = 0; k < m; ++k) {
        double coef = scale * es.eigenvectors()(k, r);
        if (coef != 0.0) terms.push_back({qv[k], -coef});
      }
      prog.add_eq(terms, 0.0);
      norm.push_back(yr);
    }
    prog.add_cone(norm, tp);
  }

  std::vector<int> up_row(mc), lo_row(mc);
  auto with_vars = [&](const std::vector<std::pair<int, double>>& terms) {
    std::vector<std::pair<int, double>> out;
    for (auto [k, coef] : terms) out.push_back({qv[k], coef});
    return out;
  };
  for (int c = 0; c < mc; ++c) {
    up_row[c] = prog.add_ineq(with_vars(up_terms[c]), up_rhs[c]);
    lo_row[c] = prog.add_ineq(with_vars(lo_terms[c]), lo_rhs[c]);
  }

  GroupQpOut out;
  out.q.resize(m);
  out.lam_lo = Eigen::VectorXd::Zero(mc);
  out.lam_hi = Eigen::VectorXd::Zero(mc);
  out.mu_lo = Eigen::VectorXd::Zero(m);
  out.mu_hi = Eigen::VectorXd::Zero(m);

  conic::ConicSolution sol = conic::solve_socp(prog, socp);
  if (sol.status == conic::SolveStatus::optimal) {
    for (int k = 0; k < m; ++k) {
      out.q[k] = std::clamp(sol.x[qv[k]], box_lo[def.members[k]], box_hi[def.members[k]]);
      out.mu_lo[k] = sol.z_lb[qv[k]];
      out.mu_hi[k] = sol.z_ub[qv[k]];
    }
    for (int c = 0; c < mc; ++c) {
      out.lam_hi[c] = sol.z_ineq[up_row[c]];
      out.lam_lo[c] = sol.z_ineq[lo_row[c]];
    }
    return out;
  }
  if (sol.status != conic::SolveStatus::primal_infeasible)
    throw std::runtime_error("inverter group subproblem failed: " + sol.message);

  // The voltage band is out of reach; park at the least-violation point.
  conic::ConicProgram relax;
  std::vector<int> rq(m);
  for (int k = 0; k < m; ++k)
    rq[k] = relax.add_var("q" + std::to_string(k), box_lo[def.members[k]],
                          box_hi[def.members[k]]);
  for (int c = 0; c < mc; ++c) {
    int tu = relax.add_var("viol_hi" + std::to_string(c), 0.0, conic::kInf, 1.0);
    int tl = relax.add_var("viol_lo" + std::to_string(c), 0.0, conic::kInf, 1.0);
    auto up = up_terms[c];
    auto lo = lo_terms[c];
    std::vector<std::pair<int, double>> upv, lov;
    for (auto [k, coef] : up) upv.push_back({rq[k], coef});
    for (auto [k, coef] : lo) lov.push_back({rq[k], coef});
    upv.push_back({tu, -1.0});
    lov.push_back({tl, -1.0});
    relax.add_ineq(upv, up_rhs[c]);
    relax.add_ineq(lov, lo_rhs[c]);
  }
  conic::ConicSolution rsol = conic::solve_socp(relax, socp);
  if (rsol.status != conic::SolveStatus::optimal)
    throw std::runtime_error("least-violation fallback failed: " + rsol.message);
  for (int k = 0; k < m; ++k)
    out.q[k] = std::clamp(rsol.x[rq[k]], box_lo[def.members[k]], box_hi[def.members[k]]);
  out.feasible = false;
  return out;
}

// Convergence/divergence bookkeeping shared by both protocols.
struct RoundMonitor {
  const RoundConfig& cfg;
  std::vector<double> dq_hist;
  int streak = 0;
  bool converged = false, diverged = false;
  std::string message;

  explicit RoundMonitor(const RoundConfig& c) : cfg(c) {}

  // True when the run should stop.
  bool observe(double dq, int round) {
    if (!std::isfinite(dq) || dq > 1e8) {
      diverged = true;
      message = "iterate blew up at round " + std::to_string(round) +
                "; reduce alpha or beta";
      return true;
    }
    dq_hist.push_back(dq);
    streak = dq < cfg.conv_tol ? streak + 1 : 0;
    if (streak >= cfg.conv_window) {
      converged = true;
      return true;
    }
    const int w = cfg.divergence_window;
    if (w > 0 && static_cast<int>(dq_hist.size()) >= 2 * w) {
      double last = 0.0, prev = 0.0;
      size_t n = dq_hist.size();
      for (size_t i = n - w; i < n; ++i) last = std::max(last, dq_hist[i]);
      for (size_t i = n - 2 * w; i < n - w; ++i) prev = std::max(prev, dq_hist[i]);
      bool growing = last >= 1.5 * prev && last > 100.0 * cfg.conv_tol;
      bool thrashing = last > 1000.0 * cfg.conv_tol && last >= 0.999 * prev;
      if (growing || thrashing) {
        diverged = true;
        std::ostringstream os;
        os << (growing ? "step growth" : "persistent large oscillation") << " over the last "
           << w << " rounds (max |dq| " << last
           << "); alpha or beta too large for this network";
        message = os.str();
        return true;
      }
    }
    return false;
  }
};

std::vector<std::vector<int>> pv_adjacency(const grid::Network& net,
                                           const std::vector<std::pair<int, int>>& edges) {
  std::vector<std::vector<int>> adj(net.pv_units.size());
  for (auto [a, b] : edges) {
    int pa = net.pv_at_bus[net.index_of(a)];
    int pb = net.pv_at_bus[net.index_of(b)];
    adj[pa].push_back(pb);
    adj[pb].push_back(pa);
  }
  for (auto& lst : adj) std::sort(lst.begin(), lst.end());
  return adj;
}

}  // namespace

ObjectiveKind objective_kind_from(const std::string& name) {
  if (name == "cost") return ObjectiveKind::cost;
  if (name == "loss") return ObjectiveKind::loss;
  if (name == "equal_ratio") return ObjectiveKind::equal_ratio;
  if (name == "weighted") return ObjectiveKind::weighted;
  throw std::invalid_argument("unknown lower objective: " + name);
}

std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::cost: return "cost";
    case ObjectiveKind::loss: return "loss";
    case ObjectiveKind::equal_ratio: return "equal_ratio";
    case ObjectiveKind::weighted: return "weighted";
  }
  return "?";
}

double QuadObjective::value(const Eigen::VectorXd& q) const {
  return q.dot(H * q) + b.dot(q) + c;
}

Eigen::VectorXd QuadObjective::gradient(const Eigen::VectorXd& q) const {
  return 2.0 * (H * q) + b;
}

QuadObjective build_objective(const grid::Network& net, const grid::SensitivityMatrix& X,
                              const LowerObjectiveSpec& spec, const std::vector<int>& members,
                              const Eigen::VectorXd& q_hi) {
  const int m = static_cast<int>(members.size());
  QuadObjective f;
  f.H = Eigen::MatrixXd::Zero(m, m);
  f.b = Eigen::VectorXd::Zero(m);

  double w_cost = 0.0, w_loss = 0.0;
  switch (spec.kind) {
    case ObjectiveKind::cost: w_cost = 1.0; break;
    case ObjectiveKind::loss: w_loss = 1.0; break;
    case ObjectiveKind::weighted:
      if (spec.weight_cost < 0.0 || spec.weight_loss < 0.0 ||
          spec.weight_cost + spec.weight_loss <= 0.0)
        throw std::invalid_argument("weighted objective needs nonnegative, nonzero weights");
      w_cost = spec.weight_cost;
      w_loss = spec.weight_loss;
      break;
    case ObjectiveKind::equal_ratio: {
      int lb = net.index_of(spec.leader_bus);
      if (net.pv_at_bus[lb] < 0)
        throw std::invalid_argument("equal_ratio leader bus " + std::to_string(spec.leader_bus) +
                                    " hosts no pv unit");
      for (int k = 0; k < m; ++k) {
        double xl = X.full(lb, X.pv_bus_index[members[k]]);
        f.H(k, k) = xl / (2.0 * std::max(q_hi[members[k]], 1e-9));
      }
      return f;
    }
  }
  for (int k = 0; k < m; ++k) {
    const auto& pv = net.pv_units[members[k]];
    f.H(k, k) += w_cost * pv.cost_a * pv.cost_a;
    f.b[k] += w_cost * pv.cost_b;
    f.c += w_cost * pv.cost_c;
  }
  if (w_loss > 0.0)
    for (int k = 0; k < m; ++k)
      for (int l = 0; l < m; ++l) f.H(k, l) += w_loss * X.gg(members[k], members[l]);
  return f;
}

LowerSolveResult solve_lower_central(const grid::Network& net, const grid::SensitivityMatrix& X,
                                     const pf::PfInput& in, const LowerObjectiveSpec& spec,
                                     const LowerOptions& opt) {
  const int npv = static_cast<int>(net.pv_units.size());
  Eigen::VectorXd box_lo, box_hi;
  capability_boxes(net, in.pv_p, box_lo, box_hi);
  auto defs = make_group_defs(net, X, spec, box_hi);

  LowerSolveResult res;
  res.q = in.pv_q.cwiseMax(box_lo).cwiseMin(box_hi);
  res.lam_lo = Eigen::VectorXd::Zero(npv);
  res.lam_hi = Eigen::VectorXd::Zero(npv);
  res.mu_lo = Eigen::VectorXd::Zero(npv);
  res.mu_hi = Eigen::VectorXd::Zero(npv);
  res.converged = false;

  pf::PfInput work = in;
  const int iters = opt.refine_with_plant ? opt.max_plant_iters : 1;
  for (int it = 0; it < iters; ++it) {
    work.pv_q = res.q;
    pf::PfSolution ps = pf::solve_pf(net, work);
    if (!ps.converged)
      throw std::runtime_error("plant power flow diverged during lower-level solve: " +
                               ps.diagnostic);
    ++res.plant_solves;

    Eigen::VectorXd q_prev = res.q;
    bool pass_feasible = true;
    for (const auto& def : defs) {
      GroupQpOut qp = solve_group_qp(net, X, def, res.q, ps.v_sq, box_lo, box_hi, opt.socp);
      for (size_t k = 0; k < def.members.size(); ++k) {
        res.q[def.members[k]] = qp.q[k];
        res.mu_lo[def.members[k]] = qp.mu_lo[k];
        res.mu_hi[def.members[k]] = qp.mu_hi[k];
      }
      for (size_t c = 0; c < def.cbus.size(); ++c) {
        res.lam_lo[def.dual_slot[c]] = qp.lam_lo[c];
        res.lam_hi[def.dual_slot[c]] = qp.lam_hi[c];
      }
      pass_feasible = pass_feasible && qp.feasible;
    }
    res.feasible = pass_feasible;

    double dq = npv > 0 ? (res.q - q_prev).cwiseAbs().maxCoeff() : 0.0;
    if (!opt.refine_with_plant || dq < opt.fixed_point_tol) {
      res.converged = true;
      break;
    }
  }

  work.pv_q = res.q;
  pf::PfSolution ps = pf::solve_pf(net, work);
  if (!ps.converged)
    throw std::runtime_error("plant power flow diverged at the lower-level solution: " +
                             ps.diagnostic);
  ++res.plant_solves;
  res.v_sq = ps.v_sq;

  res.objective = 0.0;
  res.kkt_residual = 0.0;
  for (const auto& def : defs) {
    const int m = static_cast<int>(def.members.size());
    Eigen::VectorXd qg(m);
    for (int k = 0; k < m; ++k) qg[k] = res.q[def.members[k]];
    res.objective += def.quad.value(qg);

    Eigen::VectorXd grad = def.quad.gradient(qg);
    for (int k = 0; k < m; ++k) {
      int pv = def.members[k];
      double stat = grad[k] - res.mu_lo[pv] + res.mu_hi[pv];
      for (size_t c = 0; c < def.cbus.size(); ++c) {
        double coef = X.full(def.cbus[c], X.pv_bus_index[pv]);
        stat += coef * (res.lam_hi[def.dual_slot[c]] - res.lam_lo[def.dual_slot[c]]);
      }
      res.kkt_residual = std::max(res.kkt_residual, std::abs(stat));
      double slack_lo = res.q[pv] - box_lo[pv];
      double slack_hi = box_hi[pv] - res.q[pv];
      res.kkt_residual = std::max({res.kkt_residual, -slack_lo, -slack_hi,
                                   std::abs(res.mu_lo[pv] * slack_lo),
                                   std::abs(res.mu_hi[pv] * slack_hi)});
    }
    for (size_t c = 0; c < def.cbus.size(); ++c) {
      int cb = def.cbus[c];
      double slack_hi = net.buses[cb].v_max_sq - res.v_sq[cb];
      double slack_lo = res.v_sq[cb] - net.buses[cb].v_min_sq;
      res.kkt_residual = std::max({res.kkt_residual, -slack_hi, -slack_lo,
                                   std::abs(res.lam_hi[def.dual_slot[c]] * slack_hi),
                                   std::abs(res.lam_lo[def.dual_slot[c]] * slack_lo)});
    }
  }
  return res;
}

DistributedRun run_distributed(const grid::Network& net, const grid::SensitivityMatrix& X,
                               const PlantFn& plant, const pf::PfInput& in,
                               const LowerObjectiveSpec& spec, const RoundConfig& cfg,
                               const std::optional<AgentInit>& init) {
  if (spec.kind == ObjectiveKind::equal_ratio)
    throw std::invalid_argument("equal_ratio runs through run_consensus_equal_ratio");
  const int npv = static_cast<int>(net.pv_units.size());

  Eigen::VectorXd box_lo, box_hi;
  capability_boxes(net, in.pv_p, box_lo, box_hi);
  auto defs = make_group_defs(net, X, spec, box_hi);

  // Group lookup per pv unit, plus each unit's position inside its group.
  std::vector<int> group_of(npv, -1), pos_in_group(npv, 0);
  for (size_t g = 0; g < defs.size(); ++g)
    for (size_t k = 0; k < defs[g].members.size(); ++k) {
      group_of[defs[g].members[k]] = static_cast<int>(g);
      pos_in_group[defs[g].members[k]] = static_cast<int>(k);
    }

  std::vector<std::pair<int, int>> edges;
  if (spec.groups.empty()) {
    edges = grid::build_comm_graph(net);
  } else {
    grid::Network relabeled = net;
    for (size_t g = 0; g < defs.size(); ++g)
      for (int pv : defs[g].members) relabeled.pv_units[pv].group = static_cast<int>(g);
    edges = grid::build_comm_graph(relabeled);
  }
  auto adj = pv_adjacency(net, edges);

  DistributedRun run;
  Eigen::VectorXd q = in.pv_q.cwiseMax(box_lo).cwiseMin(box_hi);
  Eigen::VectorXd lam_lo = Eigen::VectorXd::Zero(npv), lam_hi = Eigen::VectorXd::Zero(npv);
  if (init) {
    if (init->lam_lo.size() == npv) lam_lo = init->lam_lo.cwiseMax(0.0);
    if (init->lam_hi.size() == npv) lam_hi = init->lam_hi.cwiseMax(0.0);
  }

  struct Entry {
    int seq = -1;
    double lam_lo = 0.0, lam_hi = 0.0, q = 0.0;
  };
  using Table = std::vector<Entry>;
  std::vector<Table> tables(npv, Table(npv));
  for (int i = 0; i < npv; ++i)
    tables[i][i] = {0, lam_lo[i], lam_hi[i], q[i]};
  std::vector<std::vector<Table>> snapshots = {tables};

  std::mt19937 rng(cfg.seed);
  std::uniform_real_distribution<double> noise(-cfg.noise_mag, cfg.noise_mag);

  RoundMonitor mon(cfg);
  Eigen::VectorXd v_meas(npv);
  for (int r = 1; r <= cfg.max_rounds; ++r) {
    run.rounds = r;
    pf::PfSolution ps = plant(q);
    if (!ps.converged) {
      run.diverged = true;
      run.message = "plant power flow diverged at round " + std::to_string(r);
      break;
    }
    for (int i = 0; i < npv; ++i) {
      v_meas[i] = ps.v_sq[X.pv_bus_index[i]];
      if (cfg.noise_mag > 0.0) v_meas[i] += noise(rng);
    }

    for (int i = 0; i < npv; ++i) {
      const auto& bus = net.buses[X.pv_bus_index[i]];
      lam_lo[i] = std::max(0.0, lam_lo[i] + cfg.alpha * (bus.v_min_sq - v_meas[i]));
      lam_hi[i] = std::max(0.0, lam_hi[i] + cfg.alpha * (v_meas[i] - bus.v_max_sq));
    }

    // One flooding hop: adopt the freshest entry per source from the
    // delayed neighbor snapshots, then post own state.
    const auto& src = snapshots[std::max(0, r - 1 - cfg.message_delay)];
    for (int i = 0; i < npv; ++i) {
      tables[i][i] = {r, lam_lo[i], lam_hi[i], q[i]};
      for (int s = 0; s < npv; ++s) {
        if (s == i || group_of[s] != group_of[i]) continue;
        for (int j : adj[i])
          if (src[j][s].seq > tables[i][s].seq) tables[i][s] = src[j][s];
      }
    }

    Eigen::VectorXd q_next(npv);
    for (int i = 0; i < npv; ++i) {
      const GroupDef& def = defs[group_of[i]];
      const int ki = pos_in_group[i];
      double grad = def.quad.b[ki];
      for (size_t l = 0; l < def.members.size(); ++l) {
        int pv = def.members[l];
        const Entry& e = tables[i][pv];
        grad += 2.0 * def.quad.H(ki, l) * e.q;
        grad += X.full(X.pv_bus_index[pv], X.pv_bus_index[i]) * (e.lam_hi - e.lam_lo);
      }
      q_next[i] = std::clamp(q[i] - cfg.beta * grad, box_lo[i], box_hi[i]);
    }

    double dq = npv > 0 ? (q_next - q).cwiseAbs().maxCoeff() : 0.0;
    q = q_next;
    snapshots.push_back(tables);

    RoundRecord rec;
    rec.round = r;
    rec.t_s = r * cfg.round_period_s;
    rec.q = q;
    rec.v_meas = v_meas;
    rec.lam_lo = lam_lo;
    rec.lam_hi = lam_hi;
    run.trajectory.push_back(std::move(rec));

    if (mon.observe(dq, r)) break;
  }

  run.q_final = q;
  run.converged = mon.converged;
  run.diverged = run.diverged || mon.diverged;
  if (run.message.empty()) run.message = mon.message;
  if (!run.converged && !run.diverged && run.message.empty())
    run.message = "round limit reached before convergence";
  run.state_final.lam_lo = lam_lo;
  run.state_final.lam_hi = lam_hi;
  return run;
}

DistributedRun run_consensus_equal_ratio(const grid::Network& net, const PlantFn& plant,
                                         int leader_bus, const pf::PfInput& in,
                                         const RoundConfig& cfg,
                                         const std::optional<Eigen::VectorXd>& box_lo_in,
                                         const std::optional<Eigen::VectorXd>& box_hi_in,
                                         const std::optional<AgentInit>& init) {
  const int npv = static_cast<int>(net.pv_units.size());
  const int lb = net.index_of(leader_bus);
  const int leader_pv = net.pv_at_bus[lb];
  if (leader_pv < 0)
    throw std::invalid_argument("leader bus " + std::to_string(leader_bus) + " hosts no pv unit");

  Eigen::VectorXd cap_lo, cap_hi;
  capability_boxes(net, in.pv_p, cap_lo, cap_hi);
  Eigen::VectorXd box_lo = box_lo_in ? box_lo_in->cwiseMax(cap_lo) : cap_lo;
  Eigen::VectorXd box_hi = box_hi_in ? box_hi_in->cwiseMin(cap_hi) : cap_hi;

  auto adj = pv_adjacency(net, grid::build_comm_graph(net));

  Eigen::VectorXd u = Eigen::VectorXd::Zero(npv);
  double xi_lo = 0.0, xi_hi = 0.0;
  if (init) {
    if (init->u.size() == npv) u = init->u;
    xi_lo = std::max(0.0, init->xi_lo);
    xi_hi = std::max(0.0, init->xi_hi);
  }
  std::vector<Eigen::VectorXd> u_hist = {u};

  Eigen::VectorXd q = in.pv_q.cwiseMax(box_lo).cwiseMin(box_hi);

  std::mt19937 rng(cfg.seed);
  std::uniform_real_distribution<double> noise(-cfg.noise_mag, cfg.noise_mag);

  auto ratio_of = [&](int i) {
    double cmd = u[i] * cap_hi[i];
    if (cmd > box_hi[i] || cmd < box_lo[i]) {
      double edge = q[i] >= 0.0 ? box_hi[i] : -box_lo[i];
      return edge > 1e-12 ? q[i] / edge : 0.0;
    }
    return cap_hi[i] > 1e-12 ? q[i] / cap_hi[i] : 0.0;
  };

  DistributedRun run;
  RoundMonitor mon(cfg);
  Eigen::VectorXd v_meas(npv), ratio(npv);
  for (int r = 1; r <= cfg.max_rounds; ++r) {
    run.rounds = r;
    pf::PfSolution ps = plant(q);
    if (!ps.converged) {
      run.diverged = true;
      run.message = "plant power flow diverged at round " + std::to_string(r);
      break;
    }
    for (int i = 0; i < npv; ++i) {
      v_meas[i] = ps.v_sq[net.index_of(net.pv_units[i].bus)];
      if (cfg.noise_mag > 0.0) v_meas[i] += noise(rng);
    }

    const auto& bus = net.buses[lb];
    xi_lo = std::max(0.0, xi_lo + cfg.alpha * (bus.v_min_sq - v_meas[leader_pv]));
    xi_hi = std::max(0.0, xi_hi + cfg.alpha * (v_meas[leader_pv] - bus.v_max_sq));

    const Eigen::VectorXd& u_src =
        u_hist[std::max(0, static_cast<int>(u_hist.size()) - 1 - cfg.message_delay)];
    Eigen::VectorXd u_next(npv);
    for (int i = 0; i < npv; ++i) {
      if (i == leader_pv) {
        u_next[i] = std::clamp(xi_lo - xi_hi, -1.0, 1.0);
      } else {
        double sum = u[i];
        for (int j : adj[i]) sum += u_src[j];
        u_next[i] = sum / (1.0 + adj[i].size());
      }
    }
    u = u_next;
    u_hist.push_back(u);

    Eigen::VectorXd q_next(npv);
    for (int i = 0; i < npv; ++i)
      q_next[i] = std::clamp(u[i] * cap_hi[i], box_lo[i], box_hi[i]);
    double dq = (q_next - q).cwiseAbs().maxCoeff();
    q = q_next;
    for (int i = 0; i < npv; ++i) ratio[i] = ratio_of(i);

    RoundRecord rec;
    rec.round = r;
    rec.t_s = r * cfg.round_period_s;
    rec.q = q;
    rec.v_meas = v_meas;
    rec.lam_lo = Eigen::VectorXd::Zero(npv);
    rec.lam_hi = Eigen::VectorXd::Zero(npv);
    rec.lam_lo[leader_pv] = xi_lo;
    rec.lam_hi[leader_pv] = xi_hi;
    rec.ratio = ratio;
    run.trajectory.push_back(std::move(rec));

    if (mon.observe(dq, r)) break;
  }

  run.q_final = q;
  run.ratio_final = ratio;
  run.converged = mon.converged;
  run.diverged = run.diverged || mon.diverged;
  if (run.message.empty()) run.message = mon.message;
  if (!run.converged && !run.diverged && run.message.empty())
    run.message = "round limit reached before convergence";
  run.state_final.u = u;
  run.state_final.xi_lo = xi_lo;
  run.state_final.xi_hi = xi_hi;
  return run;
}

std::string trajectory_csv(const grid::Network& net, const DistributedRun& run) {
  const int npv = static_cast<int>(net.pv_units.size());
  std::ostringstream os;
  os.precision(12);
  os << "round,t_s";
  const char* fields[] = {"q", "v", "lam_lo", "lam_hi", "ratio"};
  for (const char* f : fields)
    for (int i = 0; i < npv; ++i) os << "," << f << "_b" << net.pv_units[i].bus;
  os << "\n";
  for (const auto& rec : run.trajectory) {
    os << rec.round << "," << rec.t_s;
    auto dump = [&](const Eigen::VectorXd& v) {
      for (int i = 0; i < npv; ++i) os << "," << (v.size() == npv ? v[i] : 0.0);
    };
    dump(rec.q);
    dump(rec.v_meas);
    dump(rec.lam_lo);
    dump(rec.lam_hi);
    dump(rec.ratio);
    os << "\n";
  }
  return os.str();
}

}  // namespace vvc::agents
