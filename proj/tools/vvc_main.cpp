#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vvc/harness.hpp"

namespace fs = std::filesystem;
using namespace vvc;

namespace {

constexpr int kOk = 0, kUsage = 2, kNumerical = 3, kInfeasible = 4;

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write file: " + path.string());
  f << text;
  std::cout << path.string() << "\n";
}

grid::Network load_net(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("network file not found: " + path);
  return grid::load_network(path);
}

// Snapshot JSON on top of nominal: any of load_p, load_q, pv_p, pv_q,
// tap_position, cb_units, slack_v_sq may be given; omitted fields keep the
// network's stored state.
pf::PfInput read_snapshot(const grid::Network& net, const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("snapshot file not found: " + path);
  auto j = nlohmann::json::parse(slurp(path));
  auto in = pf::PfInput::nominal(net);
  auto vec = [&](const char* key, Eigen::VectorXd& dst) {
    if (!j.contains(key)) return;
    auto v = j.at(key).get<std::vector<double>>();
    if (static_cast<int>(v.size()) != dst.size())
      throw std::invalid_argument(std::string("snapshot field ") + key + " expects " +
                                  std::to_string(dst.size()) + " entries");
    dst = Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
  };
  vec("load_p", in.load_p);
  vec("load_q", in.load_q);
  vec("pv_p", in.pv_p);
  vec("pv_q", in.pv_q);
  if (j.contains("tap_position")) in.tap_position = j.at("tap_position").get<std::vector<int>>();
  if (j.contains("cb_units")) in.cb_units = j.at("cb_units").get<std::vector<int>>();
  if (j.contains("slack_v_sq")) in.slack_v_sq = j.at("slack_v_sq").get<double>();
  return in;
}

struct ScenarioArgs {
  std::string net_path;
  unsigned seed = 7;
  int periods = 24;
  int steps = 60;
  bool hold_hourly = false;
  std::string objective = "weighted";
  double weight_cost = 1.0;
  double weight_loss = 1.0;
  int leader = 18;
  std::string out_dir = "out";
  std::string run_id;
};

void add_scenario_flags(CLI::App* cmd, ScenarioArgs& a, bool with_profiles = true) {
  cmd->add_option("--net", a.net_path, "network JSON path")->required();
  cmd->add_option("--seed", a.seed, "timeline seed");
  if (with_profiles) {
    cmd->add_option("--periods", a.periods, "dispatch periods in the horizon");
    cmd->add_option("--steps", a.steps, "profile steps per period");
    cmd->add_flag("--hold-hourly", a.hold_hourly, "freeze profiles at hourly means");
  }
  cmd->add_option("--objective", a.objective, "cost | loss | equal_ratio | weighted");
  cmd->add_option("--wc", a.weight_cost, "weighted objective: cost weight");
  cmd->add_option("--wl", a.weight_loss, "weighted objective: loss weight");
  cmd->add_option("--leader", a.leader, "equal_ratio leader bus id");
  cmd->add_option("--out", a.out_dir, "output directory");
  cmd->add_option("--run-id", a.run_id, "artifact subdirectory (defaults from the arguments)");
}

agents::LowerObjectiveSpec spec_of(const ScenarioArgs& a) {
  agents::LowerObjectiveSpec spec;
  spec.kind = agents::objective_kind_from(a.objective);
  spec.weight_cost = a.weight_cost;
  spec.weight_loss = a.weight_loss;
  if (spec.kind == agents::ObjectiveKind::equal_ratio) spec.leader_bus = a.leader;
  return spec;
}

harness::ScenarioTimeline timeline_of(const grid::Network& net, const ScenarioArgs& a) {
  harness::ProfileOptions po;
  po.periods = a.periods;
  po.steps_per_period = a.steps;
  po.hold_hourly = a.hold_hourly;
  return harness::make_profiles(net, a.seed, po);
}

// Hourly forecast for one period with the network's stored device state as
// the previous position.
dispatcher::PeriodForecast forecast_at(const grid::Network& net,
                                       const harness::ScenarioTimeline& tl, int period) {
  if (period < 0 || period >= tl.periods)
    throw std::invalid_argument("period outside the timeline horizon");
  auto fc = dispatcher::PeriodForecast::nominal(net);
  fc.load_p = tl.fc_load_p.row(period).transpose();
  fc.load_q = tl.fc_load_q.row(period).transpose();
  fc.pv_p = tl.fc_pv_p.row(period).transpose();
  return fc;
}

std::string default_run_id(const std::string& cmd, const ScenarioArgs& a, int period = -1) {
  std::string id = cmd + "-s" + std::to_string(a.seed);
  if (period >= 0) id += "-p" + std::to_string(period);
  return id;
}

int decision_exit(const dispatcher::DispatchDecision& dec) {
  if (!dec.feasible) {
    std::cerr << "dispatch infeasible";
    for (const auto& w : dec.warnings) std::cerr << "\n  " << w;
    std::cerr << "\n";
    return kInfeasible;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bi-level volt/var control toolkit"};
  app.require_subcommand(1);

  // pf
  std::string pf_net, pf_in, pf_out = "out", pf_runid;
  auto* pf_cmd = app.add_subcommand("pf", "solve one power-flow snapshot");
  pf_cmd->add_option("--net", pf_net, "network JSON path")->required();
  pf_cmd->add_option("--in", pf_in, "snapshot JSON path")->required();
  pf_cmd->add_option("--out", pf_out, "output directory");
  pf_cmd->add_option("--run-id", pf_runid, "artifact subdirectory");

  ScenarioArgs da, oa, la, sa;
  int d_period = 13, o_period = 13, l_period = 13;
  auto* d_cmd = app.add_subcommand("dispatch", "single-period device dispatch");
  add_scenario_flags(d_cmd, da);
  d_cmd->add_option("--period", d_period, "period index within the timeline");
  auto* o_cmd = app.add_subcommand("oracle", "exact enumeration ground truth for one period");
  add_scenario_flags(o_cmd, oa);
  o_cmd->add_option("--period", o_period, "period index within the timeline");
  auto* l_cmd = app.add_subcommand("lower", "lower-level solve at one snapshot");
  add_scenario_flags(l_cmd, la);
  l_cmd->add_option("--period", l_period, "period index within the timeline");

  std::string s_mode = "bilevel";
  int s_rounds = 2;
  auto* s_cmd = app.add_subcommand("simulate", "closed-loop scenario run");
  add_scenario_flags(s_cmd, sa);
  s_cmd->add_option("--mode", s_mode, "bilevel | model1 | model2 | no-control | all");
  s_cmd->add_option("--rounds-per-step", s_rounds, "agent rounds per profile step");

  std::vector<std::string> c_inputs;
  std::string c_out;
  auto* c_cmd = app.add_subcommand("compare", "align metrics files into one table");
  c_cmd->add_option("--in", c_inputs, "metrics JSON files (two or more)")->required();
  c_cmd->add_option("--out", c_out, "write the table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*pf_cmd) {
      auto net = load_net(pf_net);
      auto in = read_snapshot(net, pf_in);
      auto sol = pf::solve_pf(net, in);
      if (pf_runid.empty()) pf_runid = "pf";
      write_file(fs::path(pf_out) / pf_runid / "pf.json", pf::to_json(net, sol));
      if (!sol.converged) {
        std::cerr << "power flow did not converge: " << sol.diagnostic << " (max mismatch "
                  << sol.max_mismatch << ")\n";
        return kNumerical;
      }
      return kOk;
    }

    if (*d_cmd) {
      auto net = load_net(da.net_path);
      auto fc = forecast_at(net, timeline_of(net, da), d_period);
      auto dec = dispatcher::dispatch_period(net, fc, spec_of(da), {});
      if (da.run_id.empty()) da.run_id = default_run_id("dispatch", da, d_period);
      write_file(fs::path(da.out_dir) / da.run_id / "dispatch.json", dispatcher::to_json(net, dec));
      return decision_exit(dec);
    }

    if (*o_cmd) {
      auto net = load_net(oa.net_path);
      auto fc = forecast_at(net, timeline_of(net, oa), o_period);
      auto dec = dispatcher::enumerate_bilevel(net, fc, spec_of(oa), {});
      if (oa.run_id.empty()) oa.run_id = default_run_id("oracle", oa, o_period);
      write_file(fs::path(oa.out_dir) / oa.run_id / "oracle.json", dispatcher::to_json(net, dec));
      return decision_exit(dec);
    }

    if (*l_cmd) {
      auto net = load_net(la.net_path);
      auto spec = spec_of(la);
      auto tl = timeline_of(net, la);
      auto in = harness::input_at(net, tl, l_period, tl.steps_per_period / 2,
                                  dispatcher::PeriodForecast::nominal(net).prev_tap,
                                  dispatcher::PeriodForecast::nominal(net).prev_cb);
      auto X = grid::compute_x_matrix(net);
      auto plant = [&](const Eigen::VectorXd& qv) {
        pf::PfInput pin = in;
        pin.pv_q = qv;
        return pf::solve_pf(net, pin);
      };
      agents::RoundConfig rc;
      agents::DistributedRun run;
      if (spec.kind == agents::ObjectiveKind::equal_ratio)
        run = agents::run_consensus_equal_ratio(net, plant, spec.leader_bus, in, rc);
      else
        run = agents::run_distributed(net, X, plant, in, spec, rc);
      auto central = agents::solve_lower_central(net, X, in, spec);

      nlohmann::json j;
      j["objective"] = agents::to_string(spec.kind);
      j["rounds"] = run.rounds;
      j["converged"] = run.converged;
      j["diverged"] = run.diverged;
      j["q"] = std::vector<double>(run.q_final.data(), run.q_final.data() + run.q_final.size());
      j["q_central"] = std::vector<double>(central.q.data(), central.q.data() + central.q.size());
      j["max_q_error"] = run.q_final.size() == central.q.size()
                             ? (run.q_final - central.q).cwiseAbs().maxCoeff()
                             : -1.0;
      if (run.ratio_final.size() > 0) {
        j["ratio"] = std::vector<double>(run.ratio_final.data(),
                                         run.ratio_final.data() + run.ratio_final.size());
        double lo = 2.0, hi = -2.0;
        for (int k = 0; k < run.ratio_final.size(); ++k) {
          double u = run.ratio_final[k];
          if (std::abs(std::abs(u) - 1.0) < 1e-9) continue;  // saturated units excluded
          lo = std::min(lo, u);
          hi = std::max(hi, u);
        }
        j["ratio_spread_unsaturated"] = hi >= lo ? hi - lo : 0.0;
      }
      if (la.run_id.empty()) la.run_id = default_run_id("lower", la, l_period);
      write_file(fs::path(la.out_dir) / la.run_id / "lower.json", j.dump(2));
      write_file(fs::path(la.out_dir) / la.run_id / "trajectory.csv",
                 agents::trajectory_csv(net, run));
      return run.diverged ? kNumerical : kOk;
    }

    if (*s_cmd) {
      auto net = load_net(sa.net_path);
      auto spec = spec_of(sa);
      auto tl = timeline_of(net, sa);
      harness::HarnessConfig hc;
      hc.rounds_per_step = s_rounds;
      std::vector<harness::RunMode> modes;
      if (s_mode == "all")
        modes = {harness::RunMode::bilevel, harness::RunMode::model1, harness::RunMode::model2,
                 harness::RunMode::no_control};
      else
        modes = {harness::run_mode_from(s_mode)};
      if (sa.run_id.empty()) sa.run_id = default_run_id("simulate", sa);
      fs::path dir = fs::path(sa.out_dir) / sa.run_id;

      std::vector<harness::RunMetrics> runs;
      for (auto mode : modes) {
        auto m = harness::run_closed_loop(net, tl, mode, spec, hc);
        write_file(dir / ("metrics_" + harness::to_string(mode) + ".json"), harness::to_json(m));

        std::ostringstream period_csv;
        period_csv << "period,loss_pu,eps,dispatch_time_s,taps,cbs\n";
        for (int p = 0; p < m.periods; ++p) {
          period_csv << p << "," << m.period_loss[p] << "," << m.eps[p] << ","
                     << m.dispatch_time_s[p] << ",";
          for (size_t t = 0; t < m.taps[p].size(); ++t)
            period_csv << (t ? ";" : "") << m.taps[p][t];
          period_csv << ",";
          for (size_t c = 0; c < m.cbs[p].size(); ++c) period_csv << (c ? ";" : "") << m.cbs[p][c];
          period_csv << "\n";
        }
        write_file(dir / ("periods_" + harness::to_string(mode) + ".csv"), period_csv.str());

        std::ostringstream step_csv;
        step_csv << "step,over_pu_s,under_pu_s\n";
        for (int r = 0; r < m.periods * m.steps_per_period; ++r)
          step_csv << r << "," << m.step_over[r] << "," << m.step_under[r] << "\n";
        write_file(dir / ("steps_" + harness::to_string(mode) + ".csv"), step_csv.str());

        if (m.aborted) {
          std::cerr << "run aborted: " << m.abort_reason << "\n";
          return kNumerical;
        }
        runs.push_back(std::move(m));
      }
      if (runs.size() >= 2)
        write_file(dir / "compare.csv", harness::compare_report(runs));
      return kOk;
    }

    if (*c_cmd) {
      std::vector<harness::RunMetrics> runs;
      for (const auto& p : c_inputs) {
        if (!fs::exists(p)) throw std::invalid_argument("metrics file not found: " + p);
        runs.push_back(harness::metrics_from_json(slurp(p)));
      }
      auto table = harness::compare_report(runs);
      if (c_out.empty())
        std::cout << table;
      else
        write_file(c_out, table);
      return kOk;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kNumerical;
  }
  return kUsage;
}
