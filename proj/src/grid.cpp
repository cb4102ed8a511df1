#include "vvc/grid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace vvc::grid {

using nlohmann::json;

int Network::index_of(int bus_id) const {
  for (int i = 0; i < n_bus(); ++i)
    if (buses[i].id == bus_id) return i;
  throw std::runtime_error("unknown bus id " + std::to_string(bus_id));
}

void Network::finalize() {
  const int nb = n_bus();
  if (nb == 0) throw std::runtime_error("network has no buses");

  std::unordered_map<int, int> idx;
  for (int i = 0; i < nb; ++i) {
    if (!idx.emplace(buses[i].id, i).second)
      throw std::runtime_error("duplicate bus id " + std::to_string(buses[i].id));
    if (buses[i].v_min_sq <= 0.0 || buses[i].v_min_sq >= buses[i].v_max_sq)
      throw std::runtime_error("bad voltage limits at bus " + std::to_string(buses[i].id));
  }

  int slack_count = 0;
  for (int i = 0; i < nb; ++i)
    if (buses[i].is_slack) {
      slack = i;
      ++slack_count;
    }
  if (slack_count != 1)
    throw std::runtime_error("network needs exactly one slack bus, found " +
                             std::to_string(slack_count));

  if (n_branch() != nb - 1)
    throw std::runtime_error("not radial: " + std::to_string(n_branch()) + " branches for " +
                             std::to_string(nb) + " buses");

  // Build adjacency, then orient every branch away from the slack.
  std::vector<std::vector<std::pair<int, int>>> adj(nb);  // (neighbor bus, branch)
  for (int e = 0; e < n_branch(); ++e) {
    Branch& br = branches[e];
    auto fi = idx.find(br.from);
    auto ti = idx.find(br.to);
    if (fi == idx.end() || ti == idx.end())
      throw std::runtime_error("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                               " references an unknown bus");
    if (fi->second == ti->second)
      throw std::runtime_error("branch loops at bus " + std::to_string(br.from));
    if (br.r < 0.0 || br.x < 0.0 || (br.r == 0.0 && br.x == 0.0))
      throw std::runtime_error("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                               " has invalid impedance");
    adj[fi->second].push_back({ti->second, e});
    adj[ti->second].push_back({fi->second, e});
  }

  parent_bus.assign(nb, -2);
  parent_branch.assign(nb, -1);
  child_branches.assign(nb, {});
  bus_topo_order.clear();
  bus_topo_order.reserve(nb);

  std::deque<int> q{slack};
  parent_bus[slack] = -1;
  while (!q.empty()) {
    int u = q.front();
    q.pop_front();
    bus_topo_order.push_back(u);
    for (auto [v, e] : adj[u]) {
      if (parent_bus[v] != -2) {
        if (v != parent_bus[u])
          throw std::runtime_error("network contains a loop through bus " +
                                   std::to_string(buses[v].id));
        continue;
      }
      parent_bus[v] = u;
      parent_branch[v] = e;
      // Normalize branch orientation: from = parent side.
      if (branches[e].from != buses[u].id) std::swap(branches[e].from, branches[e].to);
      child_branches[u].push_back(e);
      q.push_back(v);
    }
  }
  for (int i = 0; i < nb; ++i)
    if (parent_bus[i] == -2)
      throw std::runtime_error("bus " + std::to_string(buses[i].id) + " is not connected");

  oltc_on_branch.assign(n_branch(), -1);
  for (size_t k = 0; k < oltcs.size(); ++k) {
    Oltc& t = oltcs[k];
    if (t.branch < 0 || t.branch >= n_branch())
      throw std::runtime_error("oltc references branch index " + std::to_string(t.branch));
    if (oltc_on_branch[t.branch] != -1)
      throw std::runtime_error("two tap changers on one branch");
    if (t.n_positions < 2 || static_cast<int>(t.ratio_sq.size()) != t.n_positions)
      throw std::runtime_error("oltc ratio table size mismatch");
    for (int p = 1; p < t.n_positions; ++p)
      if (t.ratio_sq[p] <= t.ratio_sq[p - 1])
        throw std::runtime_error("oltc ratio table not strictly increasing");
    if (t.position < 1 || t.position > t.n_positions)
      throw std::runtime_error("oltc position out of range");
    if (t.max_move < 0) throw std::runtime_error("oltc max_move negative");
    oltc_on_branch[t.branch] = static_cast<int>(k);
  }

  pv_at_bus.assign(nb, -1);
  for (size_t k = 0; k < pv_units.size(); ++k) {
    const PvUnit& pv = pv_units[k];
    int bi = -1;
    auto it = idx.find(pv.bus);
    if (it == idx.end())
      throw std::runtime_error("pv unit references unknown bus " + std::to_string(pv.bus));
    bi = it->second;
    if (pv_at_bus[bi] != -1)
      throw std::runtime_error("two pv units at bus " + std::to_string(pv.bus));
    if (bi == slack) throw std::runtime_error("pv unit at slack bus");
    if (pv.s_rating <= 0.0 || pv.p_rating < 0.0 || pv.p_rating > pv.s_rating)
      throw std::runtime_error("pv ratings invalid at bus " + std::to_string(pv.bus));
    pv_at_bus[bi] = static_cast<int>(k);
  }

  cb_at_bus.assign(nb, -1);
  for (size_t k = 0; k < capbanks.size(); ++k) {
    const CapBank& cb = capbanks[k];
    auto it = idx.find(cb.bus);
    if (it == idx.end())
      throw std::runtime_error("capacitor bank references unknown bus " + std::to_string(cb.bus));
    if (cb_at_bus[it->second] != -1)
      throw std::runtime_error("two capacitor banks at bus " + std::to_string(cb.bus));
    if (cb.n_units_total < 1 || cb.units_on < 0 || cb.units_on > cb.n_units_total)
      throw std::runtime_error("capacitor bank unit state invalid at bus " +
                               std::to_string(cb.bus));
    cb_at_bus[it->second] = static_cast<int>(k);
  }

  for (auto [a, b] : comm_edges) {
    int ia = index_of(a), ib = index_of(b);
    if (pv_at_bus[ia] < 0 || pv_at_bus[ib] < 0)
      throw std::runtime_error("comm edge endpoint without pv unit");
  }
}

namespace {

double get_num(const json& j, const char* key, double fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->get<double>();
}

}  // namespace

Network network_from_json_text(const std::string& text) {
  json j = json::parse(text);
  Network net;
  net.mva_base = get_num(j, "mva_base", 1.0);
  net.kv_base = get_num(j, "kv_base", 12.66);
  if (net.mva_base <= 0.0 || net.kv_base <= 0.0)
    throw std::runtime_error("per-unit bases must be positive");
  const double z_base = net.kv_base * net.kv_base / net.mva_base;
  const double s_base_kw = net.mva_base * 1000.0;

  const double v_min = get_num(j, "v_min", 0.95);
  const double v_max = get_num(j, "v_max", 1.05);

  for (const auto& jb : j.at("buses")) {
    Bus b;
    b.id = jb.at("id").get<int>();
    b.is_slack = jb.value("slack", false);
    b.load_p = jb.contains("p_kw") ? jb["p_kw"].get<double>() / s_base_kw : get_num(jb, "p_pu", 0.0);
    b.load_q = jb.contains("q_kvar") ? jb["q_kvar"].get<double>() / s_base_kw : get_num(jb, "q_pu", 0.0);
    double bvmin = get_num(jb, "v_min", v_min);
    double bvmax = get_num(jb, "v_max", v_max);
    b.v_min_sq = bvmin * bvmin;
    b.v_max_sq = bvmax * bvmax;
    net.buses.push_back(b);
  }

  for (const auto& je : j.at("branches")) {
    Branch br;
    br.from = je.at("from").get<int>();
    br.to = je.at("to").get<int>();
    br.r = je.contains("r_ohm") ? je["r_ohm"].get<double>() / z_base : get_num(je, "r_pu", 0.0);
    br.x = je.contains("x_ohm") ? je["x_ohm"].get<double>() / z_base : get_num(je, "x_pu", 0.0);
    br.i_max_sq = get_num(je, "i_max_pu2", 1e4);
    net.branches.push_back(br);
  }

  if (j.contains("oltcs")) {
    for (const auto& jt : j["oltcs"]) {
      Oltc t;
      if (jt.contains("branch_index")) {
        t.branch = jt["branch_index"].get<int>();
      } else {
        // Locate by terminal pair.
        int a = jt.at("from").get<int>(), b = jt.at("to").get<int>();
        t.branch = -1;
        for (int e = 0; e < net.n_branch(); ++e) {
          const Branch& br = net.branches[e];
          if ((br.from == a && br.to == b) || (br.from == b && br.to == a)) t.branch = e;
        }
        if (t.branch < 0)
          throw std::runtime_error("oltc branch " + std::to_string(a) + "-" + std::to_string(b) +
                                   " not found");
      }
      t.n_positions = jt.value("positions", 17);
      t.max_move = jt.value("max_move", 3);
      t.position = jt.value("position", t.neutral());
      if (jt.contains("ratio_sq")) {
        t.ratio_sq = jt["ratio_sq"].get<std::vector<double>>();
      } else {
        double step = jt.value("step_pu", 0.00625);
        t.ratio_sq.resize(t.n_positions);
        for (int p = 0; p < t.n_positions; ++p) {
          double a = 1.0 + step * (p + 1 - t.neutral());
          t.ratio_sq[p] = a * a;
        }
      }
      net.oltcs.push_back(t);
    }
  }

  if (j.contains("capbanks")) {
    for (const auto& jc : j["capbanks"]) {
      CapBank cb;
      cb.bus = jc.at("bus").get<int>();
      cb.n_units_total = jc.value("units", 3);
      cb.q_total = jc.contains("q_total_kvar") ? jc["q_total_kvar"].get<double>() / s_base_kw
                                               : get_num(jc, "q_total_pu", 0.0);
      cb.max_move = jc.value("max_move", 1);
      cb.units_on = jc.value("units_on", 0);
      net.capbanks.push_back(cb);
    }
  }

  if (j.contains("pv")) {
    for (const auto& jp : j["pv"]) {
      PvUnit pv;
      pv.bus = jp.at("bus").get<int>();
      pv.p_rating = jp.contains("p_kw") ? jp["p_kw"].get<double>() / s_base_kw
                                        : get_num(jp, "p_pu", 0.0);
      if (jp.contains("s_kva"))
        pv.s_rating = jp["s_kva"].get<double>() / s_base_kw;
      else if (jp.contains("s_pu"))
        pv.s_rating = jp["s_pu"].get<double>();
      else
        pv.s_rating = pv.p_rating * jp.value("oversize", 1.1);
      pv.cost_a = jp.value("cost_a", 1.0);
      pv.cost_b = jp.value("cost_b", 0.0);
      pv.cost_c = jp.value("cost_c", 0.0);
      pv.group = jp.value("group", 0);
      net.pv_units.push_back(pv);
    }
  }

  if (j.contains("comm_edges"))
    for (const auto& je : j["comm_edges"])
      net.comm_edges.push_back({je.at(0).get<int>(), je.at(1).get<int>()});

  net.finalize();
  return net;
}

Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open network file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return network_from_json_text(ss.str());
}

std::string to_physical_json(const Network& net) {
  json j;
  j["mva_base"] = net.mva_base;
  j["kv_base"] = net.kv_base;
  const double z_base = net.kv_base * net.kv_base / net.mva_base;
  const double s_base_kw = net.mva_base * 1000.0;

  for (const Bus& b : net.buses) {
    json jb;
    jb["id"] = b.id;
    if (b.is_slack) jb["slack"] = true;
    jb["p_kw"] = b.load_p * s_base_kw;
    jb["q_kvar"] = b.load_q * s_base_kw;
    jb["v_min"] = std::sqrt(b.v_min_sq);
    jb["v_max"] = std::sqrt(b.v_max_sq);
    j["buses"].push_back(jb);
  }
  for (const Branch& br : net.branches) {
    json je;
    je["from"] = br.from;
    je["to"] = br.to;
    je["r_ohm"] = br.r * z_base;
    je["x_ohm"] = br.x * z_base;
    je["i_max_pu2"] = br.i_max_sq;
    j["branches"].push_back(je);
  }
  j["oltcs"] = json::array();
  for (const Oltc& t : net.oltcs) {
    json jt;
    jt["branch_index"] = t.branch;
    jt["positions"] = t.n_positions;
    jt["ratio_sq"] = t.ratio_sq;
    jt["max_move"] = t.max_move;
    jt["position"] = t.position;
    j["oltcs"].push_back(jt);
  }
  j["capbanks"] = json::array();
  for (const CapBank& cb : net.capbanks) {
    json jc;
    jc["bus"] = cb.bus;
    jc["units"] = cb.n_units_total;
    jc["q_total_kvar"] = cb.q_total * s_base_kw;
    jc["max_move"] = cb.max_move;
    jc["units_on"] = cb.units_on;
    j["capbanks"].push_back(jc);
  }
  j["pv"] = json::array();
  for (const PvUnit& pv : net.pv_units) {
    json jp;
    jp["bus"] = pv.bus;
    jp["p_kw"] = pv.p_rating * s_base_kw;
    jp["s_kva"] = pv.s_rating * s_base_kw;
    jp["cost_a"] = pv.cost_a;
    jp["cost_b"] = pv.cost_b;
    jp["cost_c"] = pv.cost_c;
    jp["group"] = pv.group;
    j["pv"].push_back(jp);
  }
  if (!net.comm_edges.empty()) {
    for (auto [a, b] : net.comm_edges) j["comm_edges"].push_back({a, b});
  }
  return j.dump(2);
}

SensitivityMatrix compute_x_matrix(const Network& net) {
  const int nb = net.n_bus();
  // Reactance depth: sum of x on the slack-to-bus path. X_ij is twice the
  // depth of the deepest common ancestor, so compute depths first.
  std::vector<double> xdepth(nb, 0.0);
  std::vector<int> depth(nb, 0);
  for (int u : net.bus_topo_order) {
    int p = net.parent_bus[u];
    if (p < 0) continue;
    xdepth[u] = xdepth[p] + net.branches[net.parent_branch[u]].x;
    depth[u] = depth[p] + 1;
  }

  auto lca = [&](int a, int b) {
    while (a != b) {
      if (depth[a] < depth[b]) std::swap(a, b);
      a = net.parent_bus[a];
    }
    return a;
  };

  SensitivityMatrix sx;
  sx.full = Eigen::MatrixXd::Zero(nb, nb);
  for (int i = 0; i < nb; ++i)
    for (int k = i; k < nb; ++k) {
      double v = 2.0 * xdepth[lca(i, k)];
      sx.full(i, k) = v;
      sx.full(k, i) = v;
    }

  const int npv = static_cast<int>(net.pv_units.size());
  sx.pv_bus_index.resize(npv);
  for (int g = 0; g < npv; ++g) sx.pv_bus_index[g] = net.index_of(net.pv_units[g].bus);
  sx.gg.resize(npv, npv);
  for (int g = 0; g < npv; ++g)
    for (int h = 0; h < npv; ++h) sx.gg(g, h) = sx.full(sx.pv_bus_index[g], sx.pv_bus_index[h]);

  if (npv > 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(sx.gg);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("pv sensitivity block is not positive definite");
  }
  return sx;
}

std::pair<double, double> q_limits(const PvUnit& pv, double p_now) {
  if (p_now < 0.0) throw std::invalid_argument("pv active output negative");
  if (p_now > pv.s_rating + 1e-12)
    throw std::invalid_argument("pv active output " + std::to_string(p_now) +
                                " exceeds apparent rating " + std::to_string(pv.s_rating));
  double head = pv.s_rating * pv.s_rating - p_now * p_now;
  double qmax = head > 0.0 ? std::sqrt(head) : 0.0;
  return {-qmax, qmax};
}

std::vector<std::pair<int, int>> build_comm_graph(const Network& net) {
  std::vector<std::pair<int, int>> edges;
  const int npv = static_cast<int>(net.pv_units.size());

  // Walk the path between two buses via parent pointers; true when no
  // intermediate node hosts a pv unit.
  std::vector<int> depth(net.n_bus(), 0);
  for (int u : net.bus_topo_order)
    if (net.parent_bus[u] >= 0) depth[u] = depth[net.parent_bus[u]] + 1;

  auto path_clear = [&](int a, int b) {
    int u = a, v = b;
    while (u != v) {
      if (depth[u] < depth[v]) std::swap(u, v);
      u = net.parent_bus[u];
      if (u != v && net.pv_at_bus[u] >= 0) return false;
    }
    // u is the meet point; it is interior unless it coincides with a or b.
    if (u != a && u != b && net.pv_at_bus[u] >= 0) return false;
    return true;
  };

  for (int g = 0; g < npv; ++g)
    for (int h = g + 1; h < npv; ++h) {
      if (net.pv_units[g].group != net.pv_units[h].group) continue;
      int bg = net.index_of(net.pv_units[g].bus);
      int bh = net.index_of(net.pv_units[h].bus);
      if (path_clear(bg, bh)) {
        int a = net.pv_units[g].bus, b = net.pv_units[h].bus;
        edges.push_back({std::min(a, b), std::max(a, b)});
      }
    }
  std::sort(edges.begin(), edges.end());
  return edges;
}

}  // namespace vvc::grid
