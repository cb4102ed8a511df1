#include "vvc/powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace vvc::pf {

PfInput PfInput::nominal(const grid::Network& net) {
  PfInput in;
  in.load_p.resize(net.n_bus());
  in.load_q.resize(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) {
    in.load_p[i] = net.buses[i].load_p;
    in.load_q[i] = net.buses[i].load_q;
  }
  in.pv_p = Eigen::VectorXd::Zero(net.pv_units.size());
  in.pv_q = Eigen::VectorXd::Zero(net.pv_units.size());
  for (const auto& t : net.oltcs) in.tap_position.push_back(t.position);
  for (const auto& cb : net.capbanks) in.cb_units.push_back(cb.units_on);
  return in;
}

PfSolution solve_pf(const grid::Network& net, const PfInput& in, const PfOptions& opt) {
  const int nb = net.n_bus();
  const int ne = net.n_branch();
  if (in.load_p.size() != nb || in.load_q.size() != nb)
    throw std::invalid_argument("load vector size mismatch");
  if (in.pv_p.size() != static_cast<int>(net.pv_units.size()) ||
      in.pv_q.size() != in.pv_p.size())
    throw std::invalid_argument("pv vector size mismatch");
  if (in.tap_position.size() != net.oltcs.size())
    throw std::invalid_argument("tap vector size mismatch");
  if (in.cb_units.size() != net.capbanks.size())
    throw std::invalid_argument("capbank vector size mismatch");

  PfSolution sol;
  sol.pv_q_applied = in.pv_q;

  // Net nodal extraction: load minus generation and capacitor injection.
  Eigen::VectorXd inj_p = in.load_p;
  Eigen::VectorXd inj_q = in.load_q;
  for (size_t g = 0; g < net.pv_units.size(); ++g) {
    const grid::PvUnit& pv = net.pv_units[g];
    double p = in.pv_p[g];
    if (p < -1e-12 || p > pv.s_rating + 1e-9)
      throw std::invalid_argument("pv active output outside [0, s] at bus " +
                                  std::to_string(pv.bus));
    auto [qlo, qhi] = grid::q_limits(pv, std::min(p, pv.s_rating));
    double q = in.pv_q[g];
    if (q < qlo - 1e-12 || q > qhi + 1e-12) {
      q = std::clamp(q, qlo, qhi);
      sol.clipped_pv.push_back(static_cast<int>(g));
    }
    sol.pv_q_applied[g] = q;
    int bi = net.index_of(pv.bus);
    inj_p[bi] -= p;
    inj_q[bi] -= q;
  }
  for (size_t c = 0; c < net.capbanks.size(); ++c) {
    const grid::CapBank& cb = net.capbanks[c];
    if (in.cb_units[c] < 0 || in.cb_units[c] > cb.n_units_total)
      throw std::invalid_argument("capbank unit count out of range");
    inj_q[net.index_of(cb.bus)] -= cb.injection(in.cb_units[c]);
  }

  std::vector<double> ratio(ne, 1.0);
  for (size_t t = 0; t < net.oltcs.size(); ++t) {
    const grid::Oltc& o = net.oltcs[t];
    int pos = in.tap_position[t];
    if (pos < 1 || pos > o.n_positions)
      throw std::invalid_argument("tap position out of range");
    ratio[o.branch] = o.ratio_at(pos);
  }

  sol.v_sq = Eigen::VectorXd::Constant(nb, in.slack_v_sq);
  sol.l_sq = Eigen::VectorXd::Zero(ne);
  sol.p_flow = Eigen::VectorXd::Zero(ne);
  sol.q_flow = Eigen::VectorXd::Zero(ne);

  // Reverse topological order visits children before parents.
  std::vector<int> reverse_order(net.bus_topo_order.rbegin(), net.bus_topo_order.rend());

  double dv = 0.0, dl = 0.0;
  for (sol.iterations = 1; sol.iterations <= opt.max_iter; ++sol.iterations) {
    // Backward: accumulate sending-end flows with the current loss estimate.
    for (int u : reverse_order) {
      int e = net.parent_branch[u];
      if (e < 0) continue;
      const grid::Branch& br = net.branches[e];
      double p = inj_p[u] + br.r * sol.l_sq[e];
      double q = inj_q[u] + br.x * sol.l_sq[e];
      for (int ce : net.child_branches[u]) {
        p += sol.p_flow[ce];
        q += sol.q_flow[ce];
      }
      sol.p_flow[e] = p;
      sol.q_flow[e] = q;
    }
    // Current update from sending-end voltage.
    dl = 0.0;
    for (int u : net.bus_topo_order) {
      int e = net.parent_branch[u];
      if (e < 0) continue;
      int from = net.parent_bus[u];
      double l = (sol.p_flow[e] * sol.p_flow[e] + sol.q_flow[e] * sol.q_flow[e]) / sol.v_sq[from];
      dl = std::max(dl, std::abs(l - sol.l_sq[e]));
      sol.l_sq[e] = l;
    }
    // Forward: voltage recursion, tap ratio scales the downstream value.
    dv = 0.0;
    for (int u : net.bus_topo_order) {
      int e = net.parent_branch[u];
      if (e < 0) continue;
      const grid::Branch& br = net.branches[e];
      int from = net.parent_bus[u];
      double rhs = sol.v_sq[from] - 2.0 * (br.r * sol.p_flow[e] + br.x * sol.q_flow[e]) +
                   (br.r * br.r + br.x * br.x) * sol.l_sq[e];
      double v = ratio[e] * rhs;
      dv = std::max(dv, std::abs(v - sol.v_sq[u]));
      sol.v_sq[u] = v;
      if (v < opt.collapse_v_sq) {
        sol.converged = false;
        sol.diagnostic = "voltage collapse at bus " + std::to_string(net.buses[u].id) +
                         " (v_sq=" + std::to_string(v) + ")";
        return sol;
      }
    }
    if (dv < opt.tol && dl < opt.tol) {
      sol.converged = true;
      break;
    }
  }

  if (!sol.converged) {
    sol.diagnostic = "no convergence after " + std::to_string(opt.max_iter) +
                     " sweeps, last dv=" + std::to_string(dv);
    return sol;
  }

  // Residual audit over the branch equations.
  double worst = 0.0;
  for (int u : net.bus_topo_order) {
    int e = net.parent_branch[u];
    if (e < 0) continue;
    const grid::Branch& br = net.branches[e];
    int from = net.parent_bus[u];
    double p = inj_p[u] + br.r * sol.l_sq[e];
    double q = inj_q[u] + br.x * sol.l_sq[e];
    for (int ce : net.child_branches[u]) {
      p += sol.p_flow[ce];
      q += sol.q_flow[ce];
    }
    worst = std::max(worst, std::abs(p - sol.p_flow[e]));
    worst = std::max(worst, std::abs(q - sol.q_flow[e]));
    double rhs = sol.v_sq[from] - 2.0 * (br.r * sol.p_flow[e] + br.x * sol.q_flow[e]) +
                 (br.r * br.r + br.x * br.x) * sol.l_sq[e];
    worst = std::max(worst, std::abs(ratio[e] * rhs - sol.v_sq[u]));
    worst = std::max(worst,
                     std::abs(sol.l_sq[e] * sol.v_sq[from] -
                              (sol.p_flow[e] * sol.p_flow[e] + sol.q_flow[e] * sol.q_flow[e])));
  }
  sol.max_mismatch = worst;

  sol.total_loss = 0.0;
  for (int e = 0; e < ne; ++e) sol.total_loss += net.branches[e].r * sol.l_sq[e];
  for (int ce : net.child_branches[net.slack]) {
    sol.slack_p += sol.p_flow[ce];
    sol.slack_q += sol.q_flow[ce];
  }
  return sol;
}

double relaxation_gap(const grid::Network& net, const Eigen::VectorXd& v_sq,
                      const Eigen::VectorXd& l_sq, const Eigen::VectorXd& p_flow,
                      const Eigen::VectorXd& q_flow) {
  double eps = 0.0;
  for (int e = 0; e < net.n_branch(); ++e) {
    int from = net.index_of(net.branches[e].from);
    eps += std::abs(l_sq[e] -
                    (p_flow[e] * p_flow[e] + q_flow[e] * q_flow[e]) / v_sq[from]);
  }
  return eps;
}

double relaxation_gap(const grid::Network& net, const PfSolution& sol) {
  return relaxation_gap(net, sol.v_sq, sol.l_sq, sol.p_flow, sol.q_flow);
}

std::string to_json(const grid::Network& net, const PfSolution& sol) {
  nlohmann::json j;
  j["converged"] = sol.converged;
  j["iterations"] = sol.iterations;
  j["total_loss_pu"] = sol.total_loss;
  j["total_loss_kw"] = sol.total_loss * net.mva_base * 1000.0;
  j["slack_p_pu"] = sol.slack_p;
  j["slack_q_pu"] = sol.slack_q;
  j["max_mismatch"] = sol.max_mismatch;
  if (!sol.diagnostic.empty()) j["diagnostic"] = sol.diagnostic;
  for (int i = 0; i < net.n_bus(); ++i) {
    j["bus"].push_back({{"id", net.buses[i].id},
                        {"v_sq", sol.v_sq[i]},
                        {"v", std::sqrt(std::max(0.0, sol.v_sq[i]))}});
  }
  for (int e = 0; e < net.n_branch(); ++e) {
    j["branch"].push_back({{"from", net.branches[e].from},
                           {"to", net.branches[e].to},
                           {"p", sol.p_flow[e]},
                           {"q", sol.q_flow[e]},
                           {"l_sq", sol.l_sq[e]}});
  }
  if (!sol.clipped_pv.empty()) j["clipped_pv"] = sol.clipped_pv;
  return j.dump(2);
}

}  // namespace vvc::pf
