#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

namespace vvc::grid {

/// One network node. Loads are nominal per-unit demands on the system MVA
/// base; voltage limits are stored as squared magnitudes.
struct Bus {
  int id = 0;
  double load_p = 0.0;
  double load_q = 0.0;
  double v_min_sq = 0.9025;
  double v_max_sq = 1.1025;
  bool is_slack = false;
};

/// Directed branch, oriented substation -> downstream after load.
struct Branch {
  int from = 0;  // bus id
  int to = 0;    // bus id
  double r = 0.0;
  double x = 0.0;
  double i_max_sq = 1e4;  // bound on squared current magnitude
};

/// On-load tap changer installed on one branch. Positions are 1-based;
/// ratio_sq[k-1] holds the squared turns ratio at position k and the table
/// must be strictly increasing. The downstream squared voltage is the branch
/// recursion value multiplied by the active ratio.
struct Oltc {
  int branch = 0;  // index into Network::branches
  int n_positions = 17;
  std::vector<double> ratio_sq;
  int max_move = 3;  // tap steps per dispatch period
  int position = 9;  // current position

  int neutral() const { return (n_positions + 1) / 2; }
  double ratio_at(int pos) const { return ratio_sq.at(static_cast<size_t>(pos) - 1); }
};

/// Switched capacitor bank: n identical units, each contributing
/// q_total / n_units_total of reactive injection.
struct CapBank {
  int bus = 0;  // bus id
  int n_units_total = 3;
  double q_total = 0.0;  // per-unit at all units on
  int max_move = 1;      // unit switches per dispatch period
  int units_on = 0;

  double injection(int units) const {
    return q_total * static_cast<double>(units) / static_cast<double>(n_units_total);
  }
};

/// Smart PV inverter. The apparent rating exceeds the panel rating so
/// reactive headroom survives full active output. Quadratic reactive-power
/// cost coefficients (a^2 q^2 + b q + c) belong to the unit.
struct PvUnit {
  int bus = 0;  // bus id
  double s_rating = 0.0;
  double p_rating = 0.0;
  double cost_a = 1.0;
  double cost_b = 0.0;
  double cost_c = 0.0;
  int group = 0;
};

/// Radial distribution network plus devices. Derived topology (parent
/// pointers, traversal orders, id -> index maps) is rebuilt by finalize()
/// and the object is treated as immutable afterwards.
struct Network {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Oltc> oltcs;
  std::vector<CapBank> capbanks;
  std::vector<PvUnit> pv_units;
  double mva_base = 1.0;
  double kv_base = 12.66;
  std::vector<std::pair<int, int>> comm_edges;  // bus-id pairs

  // Derived topology (bus/branch indices, not ids).
  std::vector<int> parent_bus;      // per bus index, -1 at slack
  std::vector<int> parent_branch;   // branch index feeding the bus, -1 at slack
  std::vector<std::vector<int>> child_branches;  // per bus index
  std::vector<int> bus_topo_order;  // parents before children
  std::vector<int> oltc_on_branch;  // per branch index, oltc index or -1
  std::vector<int> pv_at_bus;       // per bus index, pv index or -1
  std::vector<int> cb_at_bus;       // per bus index, capbank index or -1
  int slack = 0;                    // bus index

  int n_bus() const { return static_cast<int>(buses.size()); }
  int n_branch() const { return static_cast<int>(branches.size()); }
  int index_of(int bus_id) const;

  /// Rebuild derived topology and check structural invariants (single
  /// slack, radial connected tree, device references, monotone tap tables).
  /// Throws std::runtime_error naming the offending element.
  void finalize();
};

/// Load a network from a JSON file. Fields may be physical (kW, kVAr, ohm)
/// or per-unit; physical values are converted on the stored bases.
Network load_network(const std::string& path);
Network network_from_json_text(const std::string& text);

/// Emit the network with all quantities in physical units (kW, kVAr, ohm).
std::string to_physical_json(const Network& net);

/// Voltage sensitivity matrix X_ij = 2 * sum of branch reactances on the
/// shared slack-to-bus path of i and j, plus its PV-block restriction.
struct SensitivityMatrix {
  Eigen::MatrixXd full;           // n_bus x n_bus, slack row/col zero
  Eigen::MatrixXd gg;             // PV block, order of Network::pv_units
  std::vector<int> pv_bus_index;  // bus index per PV unit
};

/// Build the sensitivity matrix. Verifies symmetry and that the PV block is
/// positive definite; throws on non-radial input.
SensitivityMatrix compute_x_matrix(const Network& net);

/// Inverter reactive capability at a given active output:
/// q in [-sqrt(s^2 - p^2), +sqrt(s^2 - p^2)]. Throws if p is negative or
/// exceeds the apparent rating.
std::pair<double, double> q_limits(const PvUnit& pv, double p_now);

/// Communication edges between PV buses: i and j are neighbors when the
/// unique tree path between them passes through no other PV bus and both
/// units belong to the same group. Returns bus-id pairs, lower id first.
std::vector<std::pair<int, int>> build_comm_graph(const Network& net);

}  // namespace vvc::grid
