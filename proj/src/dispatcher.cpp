#include "vvc/dispatcher.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace vvc::dispatcher {

namespace {

constexpr double kLooseVLo = 0.25;  // squared-voltage bounds when bands are softened
constexpr double kLooseVHi = 4.0;
constexpr double kRecursionLo = 0.2;  // pre-ratio recursion value, covers both modes
constexpr double kRecursionHi = 4.5;

std::pair<int, int> tap_window(const grid::Oltc& o, int prev) {
  return {std::max(1, prev - o.max_move), std::min(o.n_positions, prev + o.max_move)};
}

std::pair<int, int> cb_window(const grid::CapBank& cb, int prev) {
  return {std::max(0, prev - cb.max_move), std::min(cb.n_units_total, prev + cb.max_move)};
}

void validate_forecast(const grid::Network& net, const PeriodForecast& fc) {
  if (fc.load_p.size() != net.n_bus() || fc.load_q.size() != net.n_bus())
    throw std::invalid_argument("forecast load vectors do not match the bus count");
  if (fc.pv_p.size() != static_cast<int>(net.pv_units.size()))
    throw std::invalid_argument("forecast pv vector does not match the unit count");
  if (fc.prev_tap.size() != net.oltcs.size())
    throw std::invalid_argument("previous tap vector does not match the oltc count");
  if (fc.prev_cb.size() != net.capbanks.size())
    throw std::invalid_argument("previous capbank vector does not match the bank count");
  for (size_t t = 0; t < net.oltcs.size(); ++t)
    if (fc.prev_tap[t] < 1 || fc.prev_tap[t] > net.oltcs[t].n_positions)
      throw std::invalid_argument("previous tap position outside the device domain");
  for (size_t c = 0; c < net.capbanks.size(); ++c)
    if (fc.prev_cb[c] < 0 || fc.prev_cb[c] > net.capbanks[c].n_units_total)
      throw std::invalid_argument("previous capbank count outside the device domain");
}

// Movement count, tap sum, then cb sum; used for both the branch-and-bound
// tie hook and the enumeration oracle.
struct DeviceKey {
  int movement = 0;
  int tap_sum = 0;
  int cb_sum = 0;
  bool operator<(const DeviceKey& o) const {
    if (movement != o.movement) return movement < o.movement;
    if (tap_sum != o.tap_sum) return tap_sum < o.tap_sum;
    return cb_sum < o.cb_sum;
  }
};

DeviceKey device_key(const std::vector<int>& tap, const std::vector<int>& cb,
                     const PeriodForecast& fc) {
  DeviceKey k;
  for (size_t t = 0; t < tap.size(); ++t) {
    k.movement += std::abs(tap[t] - fc.prev_tap[t]);
    k.tap_sum += tap[t];
  }
  for (size_t c = 0; c < cb.size(); ++c) {
    k.movement += std::abs(cb[c] - fc.prev_cb[c]);
    k.cb_sum += cb[c];
  }
  return k;
}

}  // namespace

PeriodForecast PeriodForecast::nominal(const grid::Network& net) {
  PeriodForecast fc;
  fc.load_p.resize(net.n_bus());
  fc.load_q.resize(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) {
    fc.load_p[i] = net.buses[i].load_p;
    fc.load_q[i] = net.buses[i].load_q;
  }
  fc.pv_p = Eigen::VectorXd::Zero(net.pv_units.size());
  for (const auto& t : net.oltcs) fc.prev_tap.push_back(t.position);
  for (const auto& cb : net.capbanks) fc.prev_cb.push_back(cb.units_on);
  return fc;
}

pf::PfInput PeriodForecast::to_pf_input(const grid::Network& net) const {
  pf::PfInput in;
  in.load_p = load_p;
  in.load_q = load_q;
  in.pv_p = pv_p;
  in.pv_q = Eigen::VectorXd::Zero(pv_p.size());
  in.tap_position = prev_tap;
  in.cb_units = prev_cb;
  in.slack_v_sq = slack_v_sq;
  return in;
}

int SingleLevelModel::n_binary() const {
  return static_cast<int>(std::count(prog.is_binary.begin(), prog.is_binary.end(), true));
}

std::vector<int> SingleLevelModel::decode_tap(const Eigen::VectorXd& x) const {
  std::vector<int> out;
  for (const auto& pos_vars : tap_ix) {
    int best = 1;
    for (size_t k = 0; k < pos_vars.size(); ++k)
      if (x[pos_vars[k]] > x[pos_vars[best - 1]]) best = static_cast<int>(k) + 1;
    out.push_back(best);
  }
  return out;
}

std::vector<int> SingleLevelModel::decode_cb(const Eigen::VectorXd& x) const {
  std::vector<int> out;
  for (const auto& cnt_vars : cb_ix) {
    int best = 0;
    for (size_t u = 0; u < cnt_vars.size(); ++u)
      if (x[cnt_vars[u]] > x[cnt_vars[best]]) best = static_cast<int>(u);
    out.push_back(best);
  }
  return out;
}

SingleLevelModel build_single_level(const grid::Network& net, const PeriodForecast& fc,
                                    const agents::LowerObjectiveSpec& spec,
                                    const DispatchConfig& cfg, UpperModel model,
                                    bool soft_voltage) {
  validate_forecast(net, fc);
  const int nb = net.n_bus();
  const int ne = net.n_branch();
  const int npv = static_cast<int>(net.pv_units.size());
  const double M = cfg.big_m;

  SingleLevelModel m;
  conic::ConicProgram& pr = m.prog;

  m.v_ix.resize(nb);
  for (int i = 0; i < nb; ++i) {
    double lo = soft_voltage ? kLooseVLo : net.buses[i].v_min_sq;
    double hi = soft_voltage ? kLooseVHi : net.buses[i].v_max_sq;
    if (i == net.slack) lo = hi = fc.slack_v_sq;
    m.v_ix[i] = pr.add_var("v_" + std::to_string(net.buses[i].id), lo, hi);
  }
  m.l_ix.resize(ne);
  m.p_ix.resize(ne);
  m.qf_ix.resize(ne);
  for (int e = 0; e < ne; ++e) {
    std::string tag = std::to_string(net.branches[e].from) + "_" + std::to_string(net.branches[e].to);
    m.p_ix[e] = pr.add_var("P_" + tag, -conic::kInf, conic::kInf);
    m.qf_ix[e] = pr.add_var("Q_" + tag, -conic::kInf, conic::kInf);
    m.l_ix[e] = pr.add_var("l_" + tag, 0.0, net.branches[e].i_max_sq, net.branches[e].r);
  }

  // Relaxed branch cone l*v_from >= P^2 + Q^2 through an auxiliary rotation.
  for (int e = 0; e < ne; ++e) {
    int from = net.index_of(net.branches[e].from);
    std::string tag = std::to_string(e);
    int ca = pr.add_var("cone_p_" + tag, -conic::kInf, conic::kInf);
    int cb = pr.add_var("cone_q_" + tag, -conic::kInf, conic::kInf);
    int cd = pr.add_var("cone_d_" + tag, -conic::kInf, conic::kInf);
    int cs = pr.add_var("cone_s_" + tag, 0.0, conic::kInf);
    pr.add_eq({{ca, 1.0}, {m.p_ix[e], -2.0}}, 0.0);
    pr.add_eq({{cb, 1.0}, {m.qf_ix[e], -2.0}}, 0.0);
    pr.add_eq({{cd, 1.0}, {m.l_ix[e], -1.0}, {m.v_ix[from], 1.0}}, 0.0);
    pr.add_eq({{cs, 1.0}, {m.l_ix[e], -1.0}, {m.v_ix[from], -1.0}}, 0.0);
    pr.add_cone({ca, cb, cd}, cs);
  }

  // Voltage recursion; a tap-changer scales the downstream value through the
  // one-hot hull v_to = sum_k ratio_k^2 w_k, sum_k w_k = recursion value.
  m.tap_ix.resize(net.oltcs.size());
  for (int e = 0; e < ne; ++e) {
    const grid::Branch& br = net.branches[e];
    int i = net.index_of(br.from), j = net.index_of(br.to);
    double zz = br.r * br.r + br.x * br.x;
    int t = net.oltc_on_branch[e];
    if (t < 0) {
      pr.add_eq({{m.v_ix[j], 1.0},
                 {m.v_ix[i], -1.0},
                 {m.p_ix[e], 2.0 * br.r},
                 {m.qf_ix[e], 2.0 * br.x},
                 {m.l_ix[e], -zz}},
                0.0);
      continue;
    }
    const grid::Oltc& o = net.oltcs[t];
    int u = pr.add_var("tap_pre_" + std::to_string(t), kRecursionLo, kRecursionHi);
    pr.add_eq({{u, 1.0},
               {m.v_ix[i], -1.0},
               {m.p_ix[e], 2.0 * br.r},
               {m.qf_ix[e], 2.0 * br.x},
               {m.l_ix[e], -zz}},
              0.0);
    auto [wlo, whi] = tap_window(o, fc.prev_tap[t]);
    std::vector<std::pair<int, double>> one_hot, weight_sum, pos_sum, v_link{{m.v_ix[j], 1.0}};
    for (int k = 1; k <= o.n_positions; ++k) {
      bool admissible = k >= wlo && k <= whi;
      int d = pr.add_var("tap_" + std::to_string(t) + "_" + std::to_string(k), 0.0,
                         admissible ? 1.0 : 0.0, 0.0, true, 0);
      int w = pr.add_var("tap_w_" + std::to_string(t) + "_" + std::to_string(k), 0.0,
                         admissible ? kRecursionHi : 0.0);
      m.tap_ix[t].push_back(d);
      pr.add_ineq({{w, 1.0}, {d, -kRecursionHi}}, 0.0);
      pr.add_ineq({{w, -1.0}, {d, kRecursionLo}}, 0.0);
      one_hot.push_back({d, 1.0});
      weight_sum.push_back({w, 1.0});
      pos_sum.push_back({d, static_cast<double>(k)});
      v_link.push_back({w, -o.ratio_at(k)});
    }
    pr.add_eq(one_hot, 1.0);
    weight_sum.push_back({u, -1.0});
    pr.add_eq(weight_sum, 0.0);
    pr.add_eq(v_link, 0.0);
    auto move_hi = pos_sum, move_lo = pos_sum;
    pr.add_ineq(move_hi, static_cast<double>(fc.prev_tap[t] + o.max_move));
    for (auto& term : move_lo) term.second = -term.second;
    pr.add_ineq(move_lo, static_cast<double>(-(fc.prev_tap[t] - o.max_move)));
  }

  // Capacitor banks: one-hot over unit counts with a movement window.
  m.cb_ix.resize(net.capbanks.size());
  for (size_t c = 0; c < net.capbanks.size(); ++c) {
    const grid::CapBank& bank = net.capbanks[c];
    auto [wlo, whi] = cb_window(bank, fc.prev_cb[c]);
    std::vector<std::pair<int, double>> one_hot, count_sum;
    for (int u = 0; u <= bank.n_units_total; ++u) {
      bool admissible = u >= wlo && u <= whi;
      int g = pr.add_var("cb_" + std::to_string(c) + "_" + std::to_string(u), 0.0,
                         admissible ? 1.0 : 0.0, 0.0, true, 0);
      m.cb_ix[c].push_back(g);
      one_hot.push_back({g, 1.0});
      count_sum.push_back({g, static_cast<double>(u)});
    }
    pr.add_eq(one_hot, 1.0);
    auto move_hi = count_sum, move_lo = count_sum;
    pr.add_ineq(move_hi, static_cast<double>(fc.prev_cb[c] + bank.max_move));
    for (auto& term : move_lo) term.second = -term.second;
    pr.add_ineq(move_lo, static_cast<double>(-(fc.prev_cb[c] - bank.max_move)));
  }

  // Inverter outputs inside the instantaneous capability boxes.
  m.box_lo.resize(npv);
  m.box_hi.resize(npv);
  m.qg_ix.resize(npv);
  for (int g = 0; g < npv; ++g) {
    auto [qlo, qhi] = grid::q_limits(net.pv_units[g], fc.pv_p[g]);
    if (model == UpperModel::model2) qlo = qhi = 0.0;
    m.box_lo[g] = qlo;
    m.box_hi[g] = qhi;
    m.qg_ix[g] = pr.add_var("qg_" + std::to_string(net.pv_units[g].bus), qlo, qhi);
  }

  // Branch flow balance at each receiving bus.
  for (int e = 0; e < ne; ++e) {
    const grid::Branch& br = net.branches[e];
    int j = net.index_of(br.to);
    std::vector<std::pair<int, double>> p_row{{m.p_ix[e], 1.0}, {m.l_ix[e], -br.r}};
    std::vector<std::pair<int, double>> q_row{{m.qf_ix[e], 1.0}, {m.l_ix[e], -br.x}};
    for (int ce : net.child_branches[j]) {
      p_row.push_back({m.p_ix[ce], -1.0});
      q_row.push_back({m.qf_ix[ce], -1.0});
    }
    double p_rhs = fc.load_p[j];
    double q_rhs = fc.load_q[j];
    int g = net.pv_at_bus[j];
    if (g >= 0) {
      p_rhs -= fc.pv_p[g];
      q_row.push_back({m.qg_ix[g], 1.0});
    }
    int c = net.cb_at_bus[j];
    if (c >= 0) {
      const grid::CapBank& bank = net.capbanks[c];
      double per_unit = bank.q_total / static_cast<double>(bank.n_units_total);
      for (int u = 1; u <= bank.n_units_total; ++u)
        q_row.push_back({m.cb_ix[c][u], per_unit * static_cast<double>(u)});
    }
    pr.add_eq(p_row, p_rhs);
    pr.add_eq(q_row, q_rhs);
  }

  m.lam_lo_ix.assign(npv, -1);
  m.lam_hi_ix.assign(npv, -1);
  m.mu_lo_ix.assign(npv, -1);
  m.mu_hi_ix.assign(npv, -1);
  m.z_vlo_ix.assign(npv, -1);
  m.z_vhi_ix.assign(npv, -1);
  m.z_qlo_ix.assign(npv, -1);
  m.z_qhi_ix.assign(npv, -1);

  if (model == UpperModel::bilevel && npv > 0) {
    auto groups = agents::group_partition(net, spec);
    if (spec.kind == agents::ObjectiveKind::equal_ratio && groups.size() != 1)
      throw std::invalid_argument("equal_ratio objective expects a single inverter group");

    std::vector<int>& z_vlo = m.z_vlo_ix;
    std::vector<int>& z_vhi = m.z_vhi_ix;
    // Units carrying a voltage-band dual pair: every member generally, only
    // the leader in equal-ratio mode.
    std::vector<char> has_vdual(npv, 0);
    if (spec.kind == agents::ObjectiveKind::equal_ratio) {
      int lpv = net.pv_at_bus[net.index_of(spec.leader_bus)];
      if (lpv < 0) throw std::invalid_argument("equal_ratio leader bus hosts no pv unit");
      has_vdual[lpv] = 1;
    } else {
      std::fill(has_vdual.begin(), has_vdual.end(), 1);
    }

    for (int g = 0; g < npv; ++g) {
      std::string tag = std::to_string(net.pv_units[g].bus);
      if (has_vdual[g]) {
        m.lam_lo_ix[g] = pr.add_var("lam_lo_" + tag, 0.0, conic::kInf);
        m.lam_hi_ix[g] = pr.add_var("lam_hi_" + tag, 0.0, conic::kInf);
        z_vlo[g] = pr.add_var("z_vlo_" + tag, 0.0, 1.0, 0.0, true, 1);
        z_vhi[g] = pr.add_var("z_vhi_" + tag, 0.0, 1.0, 0.0, true, 1);
      }
      m.mu_lo_ix[g] = pr.add_var("mu_lo_" + tag, 0.0, conic::kInf);
      m.mu_hi_ix[g] = pr.add_var("mu_hi_" + tag, 0.0, conic::kInf);
    }
    std::vector<int>& z_qlo = m.z_qlo_ix;
    std::vector<int>& z_qhi = m.z_qhi_ix;
    for (int g = 0; g < npv; ++g) {
      std::string tag = std::to_string(net.pv_units[g].bus);
      z_qlo[g] = pr.add_var("z_qlo_" + tag, 0.0, 1.0, 0.0, true, 1);
      z_qhi[g] = pr.add_var("z_qhi_" + tag, 0.0, 1.0, 0.0, true, 1);
    }

    auto X = grid::compute_x_matrix(net);
    for (const auto& members : groups) {
      auto quad = agents::build_objective(net, X, spec, members, m.box_hi);
      const int n = static_cast<int>(members.size());
      // Voltage duals entering this group's stationarity.
      std::vector<int> vdual_units;
      for (int i : members)
        if (has_vdual[i]) vdual_units.push_back(i);
      for (int li = 0; li < n; ++li) {
        int gi = members[li];
        int bi = X.pv_bus_index[gi];
        std::vector<std::pair<int, double>> row;
        for (int lk = 0; lk < n; ++lk)
          if (quad.H(li, lk) != 0.0) row.push_back({m.qg_ix[members[lk]], 2.0 * quad.H(li, lk)});
        for (int j : vdual_units) {
          double xc = X.full(X.pv_bus_index[j], bi);
          row.push_back({m.lam_hi_ix[j], xc});
          row.push_back({m.lam_lo_ix[j], -xc});
        }
        row.push_back({m.mu_lo_ix[gi], -1.0});
        row.push_back({m.mu_hi_ix[gi], 1.0});
        pr.add_eq(row, -quad.b[li]);
      }
    }

    // Complementarity via indicator binaries: the dual is capped by M z and
    // the matching primal slack by its own width times (1-z).
    for (int g = 0; g < npv; ++g) {
      int b = X.pv_bus_index[g];
      if (has_vdual[g]) {
        double w = soft_voltage ? M : net.buses[b].v_max_sq - net.buses[b].v_min_sq;
        pr.add_ineq({{m.lam_hi_ix[g], 1.0}, {z_vhi[g], -M}}, 0.0);
        pr.add_ineq({{m.v_ix[b], -1.0}, {z_vhi[g], w}}, w - net.buses[b].v_max_sq);
        pr.add_ineq({{m.lam_lo_ix[g], 1.0}, {z_vlo[g], -M}}, 0.0);
        pr.add_ineq({{m.v_ix[b], 1.0}, {z_vlo[g], w}}, w + net.buses[b].v_min_sq);
      }
      double wq = m.box_hi[g] - m.box_lo[g];
      pr.add_ineq({{m.mu_hi_ix[g], 1.0}, {z_qhi[g], -M}}, 0.0);
      pr.add_ineq({{m.qg_ix[g], -1.0}, {z_qhi[g], wq}}, wq - m.box_hi[g]);
      pr.add_ineq({{m.mu_lo_ix[g], 1.0}, {z_qlo[g], -M}}, 0.0);
      pr.add_ineq({{m.qg_ix[g], 1.0}, {z_qlo[g], wq}}, wq + m.box_lo[g]);
      // Both sides of one band cannot bind with a one-sided multiplier.
      if (has_vdual[g]) pr.add_ineq({{z_vlo[g], 1.0}, {z_vhi[g], 1.0}}, 1.0);
      pr.add_ineq({{z_qlo[g], 1.0}, {z_qhi[g], 1.0}}, 1.0);
    }
  }

  if (soft_voltage) {
    std::vector<int> slacks;
    for (int i = 0; i < nb; ++i) {
      if (i == net.slack) continue;
      int s_lo = pr.add_var("vslack_lo_" + std::to_string(net.buses[i].id), 0.0, conic::kInf);
      int s_hi = pr.add_var("vslack_hi_" + std::to_string(net.buses[i].id), 0.0, conic::kInf);
      pr.add_ineq({{m.v_ix[i], 1.0}, {s_hi, -1.0}}, net.buses[i].v_max_sq);
      pr.add_ineq({{m.v_ix[i], -1.0}, {s_lo, -1.0}}, -net.buses[i].v_min_sq);
      slacks.push_back(s_lo);
      slacks.push_back(s_hi);
    }
    int t = pr.add_var("vslack_sq", 0.0, conic::kInf, cfg.relax_penalty);
    int e1 = pr.add_var("vslack_e1", -conic::kInf, conic::kInf);
    int e2 = pr.add_var("vslack_e2", 0.0, conic::kInf);
    pr.add_eq({{e1, 1.0}, {t, -0.5}}, -0.5);
    pr.add_eq({{e2, 1.0}, {t, -0.5}}, 0.5);
    slacks.push_back(e1);
    pr.add_cone(slacks, e2);
  }

  pr.validate();
  return m;
}

namespace {

DispatchDecision decode(const grid::Network& net, const PeriodForecast& fc,
                        const SingleLevelModel& m, const conic::ConicSolution& sol) {
  const Eigen::VectorXd& x = sol.x;
  DispatchDecision d;
  d.tap = m.decode_tap(x);
  d.cb = m.decode_cb(x);
  const int nb = net.n_bus(), ne = net.n_branch();
  const int npv = static_cast<int>(net.pv_units.size());
  d.v_sq.resize(nb);
  for (int i = 0; i < nb; ++i) d.v_sq[i] = x[m.v_ix[i]];
  d.l_sq.resize(ne);
  d.p_flow.resize(ne);
  d.q_flow.resize(ne);
  d.objective = 0.0;
  for (int e = 0; e < ne; ++e) {
    d.l_sq[e] = x[m.l_ix[e]];
    d.p_flow[e] = x[m.p_ix[e]];
    d.q_flow[e] = x[m.qf_ix[e]];
    d.objective += net.branches[e].r * d.l_sq[e];
  }
  d.q.resize(npv);
  d.lam_lo = Eigen::VectorXd::Zero(npv);
  d.lam_hi = Eigen::VectorXd::Zero(npv);
  d.mu_lo = Eigen::VectorXd::Zero(npv);
  d.mu_hi = Eigen::VectorXd::Zero(npv);
  for (int g = 0; g < npv; ++g) {
    d.q[g] = x[m.qg_ix[g]];
    if (m.lam_lo_ix[g] >= 0) d.lam_lo[g] = x[m.lam_lo_ix[g]];
    if (m.lam_hi_ix[g] >= 0) d.lam_hi[g] = x[m.lam_hi_ix[g]];
    if (m.mu_lo_ix[g] >= 0) d.mu_lo[g] = x[m.mu_lo_ix[g]];
    if (m.mu_hi_ix[g] >= 0) d.mu_hi[g] = x[m.mu_hi_ix[g]];
  }
  d.eps_gap = pf::relaxation_gap(net, d.v_sq, d.l_sq, d.p_flow, d.q_flow);
  d.feasible = true;
  (void)fc;
  return d;
}

struct EvalOut {
  bool ok = false;
  double losses = 0.0;
  double eps = 0.0;
  Eigen::VectorXd v_sq, l_sq, p_flow, q_flow;
};

EvalOut eval_losses(const grid::Network& net, const PeriodForecast& fc,
                    const std::vector<int>& tap, const std::vector<int>& cb,
                    const Eigen::VectorXd& qg, const conic::SocpOptions& socp);

// Root probing: fix one binary to 1 and solve the continuous relaxation;
// infeasibility there proves the whole z=1 subtree empty, so the binary and
// its paired dual fix to zero for good. With an objective cutoff row in the
// program this also prunes device positions that cannot beat the seed.
int probe_fix_binaries(const grid::Network& net, SingleLevelModel& m,
                       const conic::SocpOptions& socp) {
  conic::SocpOptions po = socp;
  po.max_iter = std::min(po.max_iter, 100);
  auto try_fix = [&](int z_ix, int dual_ix) {
    if (z_ix < 0 || m.prog.ub[z_ix] < 0.5 || m.prog.lb[z_ix] > 0.5) return 0;
    m.prog.lb[z_ix] = 1.0;
    auto sol = conic::solve_socp(m.prog, po);
    m.prog.lb[z_ix] = 0.0;
    if (sol.status != conic::SolveStatus::primal_infeasible) return 0;
    m.prog.ub[z_ix] = 0.0;
    if (dual_ix >= 0) m.prog.ub[dual_ix] = 0.0;
    return 1;
  };
  int fixed = 0;
  for (const auto& col : m.tap_ix)
    for (int ix : col) fixed += try_fix(ix, -1);
  for (const auto& col : m.cb_ix)
    for (int ix : col) fixed += try_fix(ix, -1);
  const int npv = static_cast<int>(net.pv_units.size());
  for (int g = 0; g < npv; ++g) {
    fixed += try_fix(m.z_vhi_ix[g], m.lam_hi_ix[g]);
    fixed += try_fix(m.z_vlo_ix[g], m.lam_lo_ix[g]);
    fixed += try_fix(m.z_qhi_ix[g], m.mu_hi_ix[g]);
    fixed += try_fix(m.z_qlo_ix[g], m.mu_lo_ix[g]);
  }
  return fixed;
}

// Re-solve with the binaries pinned at the incumbent so the decision carries
// full interior-point accuracy even when the tree ran at a looser tolerance.
bool polish_incumbent(const SingleLevelModel& m, const conic::SocpOptions& socp,
                      conic::ConicSolution& inc) {
  conic::ConicProgram p = m.prog;
  for (int i = 0; i < p.n_vars(); ++i) {
    if (!p.is_binary[i]) continue;
    double v = std::round(inc.x[i]);
    p.lb[i] = v;
    p.ub[i] = v;
  }
  conic::SocpOptions po = socp;
  po.feastol = std::min(po.feastol, 1e-9);
  po.reltol = std::min(po.reltol, 1e-9);
  po.abstol = std::min(po.abstol, 1e-10);
  po.max_iter = std::max(po.max_iter, 300);
  auto sol = conic::solve_socp(p, po);
  if (sol.status != conic::SolveStatus::optimal) return false;
  inc = std::move(sol);
  return true;
}

DispatchDecision solve_model(const grid::Network& net, const PeriodForecast& fc,
                             const agents::LowerObjectiveSpec& spec, const DispatchConfig& cfg,
                             UpperModel model) {
  auto t0 = std::chrono::steady_clock::now();
  DispatchDecision d;
  d.big_m_used = cfg.big_m;

  bnb::BnbOptions opt = cfg.bnb;
  opt.tie_tol = std::max(opt.tie_tol, 1e-8);

  // A feasible point, when the previous device tuple admits one, gives a
  // valid objective ceiling: the optimum can only improve on holding the
  // devices still. The margin keeps loss ties alive for the device-key
  // arbitration below.
  const int npv = static_cast<int>(net.pv_units.size());

  // Objective ceiling from feasible device tuples near the previous state: a
  // short greedy descent over single-step device moves, each evaluated by the
  // follower response and the plant it implies. The margin keeps loss ties
  // alive for the device-key arbitration below.
  double cutoff = conic::kInf;
  if (model == UpperModel::bilevel && npv > 0) {
    auto xm = grid::compute_x_matrix(net);
    auto tuple_losses = [&](const std::vector<int>& tp, const std::vector<int>& cu) {
      try {
        pf::PfInput in = fc.to_pf_input(net);
        in.tap_position = tp;
        in.cb_units = cu;
        auto lower = agents::solve_lower_central(net, xm, in, spec, cfg.lower);
        if (!lower.feasible || !lower.converged) return conic::kInf;
        in.pv_q = lower.q;
        auto ps = pf::solve_pf(net, in);
        if (!ps.converged) return conic::kInf;
        for (int i = 0; i < net.n_bus(); ++i)
          if (ps.v_sq[i] < net.buses[i].v_min_sq - cfg.band_tol ||
              ps.v_sq[i] > net.buses[i].v_max_sq + cfg.band_tol)
            return conic::kInf;
        return ps.total_loss;
      } catch (const std::runtime_error&) {
        return conic::kInf;  // plant collapse under this tuple
      }
    };
    std::vector<std::pair<int, int>> tap_rng, cb_rng;
    long long tuples = 1;
    for (size_t t = 0; t < net.oltcs.size(); ++t) {
      tap_rng.push_back(tap_window(net.oltcs[t], fc.prev_tap[t]));
      tuples *= tap_rng.back().second - tap_rng.back().first + 1;
    }
    for (size_t c = 0; c < net.capbanks.size(); ++c) {
      cb_rng.push_back(cb_window(net.capbanks[c], fc.prev_cb[c]));
      tuples *= cb_rng.back().second - cb_rng.back().first + 1;
    }
    double best = conic::kInf;
    if (tuples <= 512) {
      std::vector<int> tp(net.oltcs.size()), cu(net.capbanks.size());
      for (size_t t = 0; t < tp.size(); ++t) tp[t] = tap_rng[t].first;
      for (size_t c = 0; c < cu.size(); ++c) cu[c] = cb_rng[c].first;
      auto advance = [&]() {
        for (size_t t = 0; t < tp.size(); ++t) {
          if (++tp[t] <= tap_rng[t].second) return true;
          tp[t] = tap_rng[t].first;
        }
        for (size_t c = 0; c < cu.size(); ++c) {
          if (++cu[c] <= cb_rng[c].second) return true;
          cu[c] = cb_rng[c].first;
        }
        return false;
      };
      do best = std::min(best, tuple_losses(tp, cu));
      while (advance());
    } else {
      // Window too large to sweep: coordinate descent from the held tuple.
      std::vector<int> tp = fc.prev_tap, cu = fc.prev_cb;
      best = tuple_losses(tp, cu);
      for (bool improved = true; improved;) {
        improved = false;
        for (size_t t = 0; t < net.oltcs.size(); ++t)
          for (int step : {-1, 1}) {
            auto cand = tp;
            cand[t] += step;
            if (cand[t] < tap_rng[t].first || cand[t] > tap_rng[t].second) continue;
            double f = tuple_losses(cand, cu);
            if (f < best - 1e-12) {
              best = f;
              tp = cand;
              improved = true;
            }
          }
        for (size_t c = 0; c < net.capbanks.size(); ++c)
          for (int step : {-1, 1}) {
            auto cand = cu;
            cand[c] += step;
            if (cand[c] < cb_rng[c].first || cand[c] > cb_rng[c].second) continue;
            double f = tuple_losses(tp, cand);
            if (f < best - 1e-12) {
              best = f;
              cu = cand;
              improved = true;
            }
          }
      }
    }
    if (std::isfinite(best)) cutoff = best + 1e-6 + 1e-6 * best;
  }

  // Device tuples proven spurious by the post-solve follower check.
  std::vector<std::pair<std::vector<int>, std::vector<int>>> excluded;

  auto run = [&](const DispatchConfig& c, bool soft) {
    SingleLevelModel m = build_single_level(net, fc, spec, c, model, soft);
    bnb::BnbOptions o = opt;
    // Tree nodes only need enough accuracy for sound bounds and branching;
    // the polish solve below restores the final precision.
    o.socp.feastol = std::max(o.socp.feastol, 1e-7);
    o.socp.reltol = std::max(o.socp.reltol, 1e-7);
    o.socp.abstol = std::max(o.socp.abstol, 1e-8);
    for (const auto& [etap, ecb] : excluded) {
      std::vector<std::pair<int, double>> cut;
      for (size_t t = 0; t < etap.size(); ++t) cut.push_back({m.tap_ix[t][etap[t] - 1], 1.0});
      for (size_t c2 = 0; c2 < ecb.size(); ++c2) cut.push_back({m.cb_ix[c2][ecb[c2]], 1.0});
      m.prog.add_ineq(cut, static_cast<double>(cut.size()) - 1.0);
    }
    if (model == UpperModel::bilevel && !soft) {
      if (std::isfinite(cutoff)) {
        std::vector<std::pair<int, double>> row;
        for (int e = 0; e < net.n_branch(); ++e) row.push_back({m.l_ix[e], net.branches[e].r});
        m.prog.add_ineq(row, cutoff);
      }
      if (npv > 0) probe_fix_binaries(net, m, opt.socp);
    }
    o.prefer = [&net, &fc, &m](const Eigen::VectorXd& cand, const Eigen::VectorXd& inc) {
      return device_key(m.decode_tap(cand), m.decode_cb(cand), fc) <
             device_key(m.decode_tap(inc), m.decode_cb(inc), fc);
    };
    auto res = bnb::solve_misocp(m.prog, o);
    if (res.has_incumbent && !polish_incumbent(m, opt.socp, res.incumbent))
      d.warnings.push_back("polish solve at fixed binaries did not converge; keeping tree solution");
    return std::make_pair(std::move(m), std::move(res));
  };

  DispatchDecision dec;
  int total_nodes = 0;
  for (int round = 0;; ++round) {
    auto [m, res] = run(cfg, false);
    bool soft = false;
    if (res.status == bnb::BnbStatus::infeasible) {
      soft = true;
      std::tie(m, res) = run(cfg, true);
      d.warnings.push_back("hard voltage bands infeasible; re-solved with penalized slack");
    }
    total_nodes += res.nodes;
    if (!res.has_incumbent) {
      d.warnings.push_back("no incumbent: " + bnb::to_string(res.status));
      d.nodes = total_nodes;
      d.solve_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      return d;
    }
    dec = decode(net, fc, m, res.incumbent);
    dec.relaxed = soft;
    dec.big_m_used = cfg.big_m;

    if (model == UpperModel::bilevel && cfg.audit_big_m) {
      double top = 0.0;
      top = std::max(top, dec.lam_lo.size() ? dec.lam_lo.maxCoeff() : 0.0);
      top = std::max(top, dec.lam_hi.size() ? dec.lam_hi.maxCoeff() : 0.0);
      top = std::max(top, dec.mu_lo.size() ? dec.mu_lo.maxCoeff() : 0.0);
      top = std::max(top, dec.mu_hi.size() ? dec.mu_hi.maxCoeff() : 0.0);
      if (top >= cfg.audit_fraction * cfg.big_m) {
        DispatchConfig wide = cfg;
        wide.big_m = 10.0 * cfg.big_m;
        auto [m2, res2] = run(wide, soft);
        if (res2.has_incumbent) {
          DispatchDecision dec2 = decode(net, fc, m2, res2.incumbent);
          dec2.relaxed = soft;
          dec = std::move(dec2);
          total_nodes += res2.nodes;
        }
        dec.big_m_used = wide.big_m;
        d.warnings.push_back("big-M audit: a dual reached " + std::to_string(top) +
                             "; re-solved with M=" + std::to_string(wide.big_m));
      }
    }

    if (model != UpperModel::bilevel || soft || npv == 0) break;

    // Screen the winning tuple against the follower it claims to anticipate:
    // the predicted q must match the actual response and the realized state
    // must hold the band everywhere, else the KKT point was spurious.
    bool reject = false;
    std::string why;
    try {
      grid::SensitivityMatrix xm = grid::compute_x_matrix(net);
      pf::PfInput in = fc.to_pf_input(net);
      in.tap_position = dec.tap;
      in.cb_units = dec.cb;
      auto lower = agents::solve_lower_central(net, xm, in, spec, cfg.lower);
      if (!lower.feasible || !lower.converged) {
        reject = true;
        why = "follower solve did not converge feasibly";
      } else {
        double fid = (lower.q - dec.q).cwiseAbs().maxCoeff();
        if (fid > cfg.fidelity_tol) {
          reject = true;
          why = "predicted q deviates from the follower response by " + std::to_string(fid);
        } else {
          in.pv_q = lower.q;
          auto ps = pf::solve_pf(net, in);
          for (int i = 0; !reject && i < net.n_bus(); ++i)
            if (ps.v_sq[i] < net.buses[i].v_min_sq - cfg.band_tol ||
                ps.v_sq[i] > net.buses[i].v_max_sq + cfg.band_tol) {
              reject = true;
              why = "realized voltage leaves the band at bus " + std::to_string(net.buses[i].id);
            }
        }
      }
    } catch (const std::runtime_error& e) {
      reject = true;
      why = std::string("plant solve failed: ") + e.what();
    }
    if (!reject) break;
    if (round >= cfg.repair_rounds) {
      dec.feasible = false;
      d.warnings.push_back("repair rounds exhausted; last tuple still spurious (" + why + ")");
      break;
    }
    std::string tup = "tap";
    for (int t : dec.tap) tup += " " + std::to_string(t);
    tup += " cb";
    for (int c2 : dec.cb) tup += " " + std::to_string(c2);
    d.warnings.push_back("excluded spurious tuple " + tup + ": " + why);
    excluded.push_back({dec.tap, dec.cb});
  }

  dec.nodes = total_nodes;
  dec.warnings = d.warnings;
  dec.solve_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return dec;
}

}  // namespace

DispatchDecision dispatch_period(const grid::Network& net, const PeriodForecast& fc,
                                 const agents::LowerObjectiveSpec& spec,
                                 const DispatchConfig& cfg) {
  return solve_model(net, fc, spec, cfg, UpperModel::bilevel);
}

DispatchDecision dispatch_model1(const grid::Network& net, const PeriodForecast& fc,
                                 const DispatchConfig& cfg) {
  return solve_model(net, fc, agents::LowerObjectiveSpec{}, cfg, UpperModel::model1);
}

DispatchDecision dispatch_model2(const grid::Network& net, const PeriodForecast& fc,
                                 const DispatchConfig& cfg) {
  return solve_model(net, fc, agents::LowerObjectiveSpec{}, cfg, UpperModel::model2);
}

namespace {

// Losses of one fixed device tuple with q pinned: the continuous cone model
// with bands dropped, whose minimum reproduces the power flow.
EvalOut eval_losses(const grid::Network& net, const PeriodForecast& fc,
                    const std::vector<int>& tap, const std::vector<int>& cb,
                    const Eigen::VectorXd& qg, const conic::SocpOptions& socp) {
  const int nb = net.n_bus(), ne = net.n_branch();
  conic::ConicProgram pr;
  std::vector<int> v_ix(nb), l_ix(ne), p_ix(ne), q_ix(ne);
  for (int i = 0; i < nb; ++i) {
    double lo = kLooseVLo, hi = kLooseVHi;
    if (i == net.slack) lo = hi = fc.slack_v_sq;
    v_ix[i] = pr.add_var("v_" + std::to_string(i), lo, hi);
  }
  for (int e = 0; e < ne; ++e) {
    p_ix[e] = pr.add_var("P", -conic::kInf, conic::kInf);
    q_ix[e] = pr.add_var("Q", -conic::kInf, conic::kInf);
    l_ix[e] = pr.add_var("l", 0.0, net.branches[e].i_max_sq, net.branches[e].r);
  }
  for (int e = 0; e < ne; ++e) {
    const grid::Branch& br = net.branches[e];
    int i = net.index_of(br.from), j = net.index_of(br.to);
    int ca = pr.add_var("ca", -conic::kInf, conic::kInf);
    int cbv = pr.add_var("cb", -conic::kInf, conic::kInf);
    int cd = pr.add_var("cd", -conic::kInf, conic::kInf);
    int cs = pr.add_var("cs", 0.0, conic::kInf);
    pr.add_eq({{ca, 1.0}, {p_ix[e], -2.0}}, 0.0);
    pr.add_eq({{cbv, 1.0}, {q_ix[e], -2.0}}, 0.0);
    pr.add_eq({{cd, 1.0}, {l_ix[e], -1.0}, {v_ix[i], 1.0}}, 0.0);
    pr.add_eq({{cs, 1.0}, {l_ix[e], -1.0}, {v_ix[i], -1.0}}, 0.0);
    pr.add_cone({ca, cbv, cd}, cs);

    double zz = br.r * br.r + br.x * br.x;
    double rho = 1.0;
    int t = net.oltc_on_branch[e];
    if (t >= 0) rho = net.oltcs[t].ratio_at(tap[t]);
    pr.add_eq({{v_ix[j], 1.0},
               {v_ix[i], -rho},
               {p_ix[e], rho * 2.0 * br.r},
               {q_ix[e], rho * 2.0 * br.x},
               {l_ix[e], -rho * zz}},
              0.0);

    std::vector<std::pair<int, double>> p_row{{p_ix[e], 1.0}, {l_ix[e], -br.r}};
    std::vector<std::pair<int, double>> q_row{{q_ix[e], 1.0}, {l_ix[e], -br.x}};
    for (int ce : net.child_branches[j]) {
      p_row.push_back({p_ix[ce], -1.0});
      q_row.push_back({q_ix[ce], -1.0});
    }
    double p_rhs = fc.load_p[j], q_rhs = fc.load_q[j];
    int g = net.pv_at_bus[j];
    if (g >= 0) {
      p_rhs -= fc.pv_p[g];
      q_rhs -= qg[g];
    }
    int c = net.cb_at_bus[j];
    if (c >= 0) q_rhs -= net.capbanks[c].injection(cb[c]);
    pr.add_eq(p_row, p_rhs);
    pr.add_eq(q_row, q_rhs);
  }
  pr.validate();
  auto sol = conic::solve_socp(pr, socp);
  EvalOut out;
  if (sol.status != conic::SolveStatus::optimal) return out;
  out.ok = true;
  out.v_sq.resize(nb);
  for (int i = 0; i < nb; ++i) out.v_sq[i] = sol.x[v_ix[i]];
  out.l_sq.resize(ne);
  out.p_flow.resize(ne);
  out.q_flow.resize(ne);
  for (int e = 0; e < ne; ++e) {
    out.l_sq[e] = sol.x[l_ix[e]];
    out.p_flow[e] = sol.x[p_ix[e]];
    out.q_flow[e] = sol.x[q_ix[e]];
    out.losses += net.branches[e].r * out.l_sq[e];
  }
  out.eps = pf::relaxation_gap(net, out.v_sq, out.l_sq, out.p_flow, out.q_flow);
  return out;
}

}  // namespace

DispatchDecision enumerate_bilevel(const grid::Network& net, const PeriodForecast& fc,
                                   const agents::LowerObjectiveSpec& spec,
                                   const DispatchConfig& cfg) {
  validate_forecast(net, fc);
  auto t0 = std::chrono::steady_clock::now();
  auto X = grid::compute_x_matrix(net);

  std::vector<std::pair<int, int>> tap_rng, cb_rng;
  long long tuples = 1;
  for (size_t t = 0; t < net.oltcs.size(); ++t) {
    tap_rng.push_back(tap_window(net.oltcs[t], fc.prev_tap[t]));
    tuples *= tap_rng.back().second - tap_rng.back().first + 1;
  }
  for (size_t c = 0; c < net.capbanks.size(); ++c) {
    cb_rng.push_back(cb_window(net.capbanks[c], fc.prev_cb[c]));
    tuples *= cb_rng.back().second - cb_rng.back().first + 1;
  }
  if (tuples > cfg.enum_cap)
    throw std::runtime_error("enumeration oracle: " + std::to_string(tuples) +
                             " admissible device tuples exceed the cap of " +
                             std::to_string(cfg.enum_cap));

  DispatchDecision best;
  best.big_m_used = 0.0;
  DeviceKey best_key;
  bool have = false;

  std::vector<int> tap(net.oltcs.size()), cb(net.capbanks.size());
  for (size_t t = 0; t < tap.size(); ++t) tap[t] = tap_rng[t].first;
  for (size_t c = 0; c < cb.size(); ++c) cb[c] = cb_rng[c].first;

  auto advance = [&]() {
    for (size_t t = 0; t < tap.size(); ++t) {
      if (++tap[t] <= tap_rng[t].second) return true;
      tap[t] = tap_rng[t].first;
    }
    for (size_t c = 0; c < cb.size(); ++c) {
      if (++cb[c] <= cb_rng[c].second) return true;
      cb[c] = cb_rng[c].first;
    }
    return false;
  };

  do {
    pf::PfInput in = fc.to_pf_input(net);
    in.tap_position = tap;
    in.cb_units = cb;
    agents::LowerSolveResult lower;
    if (net.pv_units.empty()) {
      lower.feasible = true;
      lower.converged = true;
      lower.q = Eigen::VectorXd::Zero(0);
      lower.lam_lo = lower.lam_hi = lower.mu_lo = lower.mu_hi = Eigen::VectorXd::Zero(0);
    } else {
      try {
        lower = agents::solve_lower_central(net, X, in, spec, cfg.lower);
      } catch (const std::runtime_error&) {
        continue;  // plant collapse under this tuple
      }
    }
    if (!lower.feasible || !lower.converged) continue;
    EvalOut ev = eval_losses(net, fc, tap, cb, lower.q, cfg.lower.socp);
    if (!ev.ok) continue;
    // The realized state must also satisfy the upper level's band at every
    // bus, not only the buses the follower itself polices.
    bool in_band = true;
    for (int i = 0; in_band && i < net.n_bus(); ++i)
      in_band = ev.v_sq[i] >= net.buses[i].v_min_sq - cfg.band_tol &&
                ev.v_sq[i] <= net.buses[i].v_max_sq + cfg.band_tol;
    if (!in_band) continue;
    DeviceKey key = device_key(tap, cb, fc);
    bool better = !have || ev.losses < best.objective - 1e-8 ||
                  (ev.losses <= best.objective + 1e-8 && key < best_key);
    if (better) {
      have = true;
      best_key = key;
      best.tap = tap;
      best.cb = cb;
      best.q = lower.q;
      best.lam_lo = lower.lam_lo;
      best.lam_hi = lower.lam_hi;
      best.mu_lo = lower.mu_lo;
      best.mu_hi = lower.mu_hi;
      best.v_sq = ev.v_sq;
      best.l_sq = ev.l_sq;
      best.p_flow = ev.p_flow;
      best.q_flow = ev.q_flow;
      best.objective = ev.losses;
      best.eps_gap = ev.eps;
      best.feasible = true;
    }
    ++best.nodes;
  } while (advance());

  if (!have) best.warnings.push_back("no admissible device tuple admits a feasible follower");
  best.solve_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return best;
}

double follower_fidelity(const grid::Network& net, const PeriodForecast& fc,
                         const agents::LowerObjectiveSpec& spec, const DispatchDecision& dec,
                         const DispatchConfig& cfg) {
  if (net.pv_units.empty()) return 0.0;
  auto X = grid::compute_x_matrix(net);
  pf::PfInput in = fc.to_pf_input(net);
  in.tap_position = dec.tap;
  in.cb_units = dec.cb;
  auto lower = agents::solve_lower_central(net, X, in, spec, cfg.lower);
  return (lower.q - dec.q).cwiseAbs().maxCoeff();
}

std::string to_json(const grid::Network& net, const DispatchDecision& dec) {
  nlohmann::json j;
  j["feasible"] = dec.feasible;
  j["relaxed"] = dec.relaxed;
  j["objective_pu"] = dec.objective;
  j["objective_kw"] = dec.objective * net.mva_base * 1000.0;
  j["eps_gap"] = dec.eps_gap;
  j["solve_time_s"] = dec.solve_time_s;
  j["big_m_used"] = dec.big_m_used;
  j["nodes"] = dec.nodes;
  for (size_t t = 0; t < dec.tap.size(); ++t)
    j["oltc"].push_back({{"branch", net.oltcs[t].branch}, {"position", dec.tap[t]}});
  for (size_t c = 0; c < dec.cb.size(); ++c)
    j["capbank"].push_back({{"bus", net.capbanks[c].bus}, {"units_on", dec.cb[c]}});
  for (int g = 0; g < dec.q.size(); ++g) {
    nlohmann::json unit{{"bus", net.pv_units[g].bus}, {"q", dec.q[g]}};
    if (dec.lam_lo.size() == dec.q.size()) {
      unit["lam_lo"] = dec.lam_lo[g];
      unit["lam_hi"] = dec.lam_hi[g];
      unit["mu_lo"] = dec.mu_lo[g];
      unit["mu_hi"] = dec.mu_hi[g];
    }
    j["pv"].push_back(unit);
  }
  for (int i = 0; i < dec.v_sq.size(); ++i)
    j["v_sq"].push_back(dec.v_sq[i]);
  if (!dec.warnings.empty()) j["warnings"] = dec.warnings;
  return j.dump(2);
}

}  // namespace vvc::dispatcher
