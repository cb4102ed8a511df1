#include "vvc/harness.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace vvc::harness {

RunMode run_mode_from(const std::string& name) {
  if (name == "bilevel") return RunMode::bilevel;
  if (name == "model1") return RunMode::model1;
  if (name == "model2") return RunMode::model2;
  if (name == "no-control" || name == "no_control") return RunMode::no_control;
  throw std::invalid_argument("unknown run mode: " + name);
}

std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::bilevel: return "bilevel";
    case RunMode::model1: return "model1";
    case RunMode::model2: return "model2";
    case RunMode::no_control: return "no-control";
  }
  return "unknown";
}

namespace {

// Platform-stable uniform in [0, 1): fixed mapping from raw mt19937_64 draws
// so identical seeds give identical timeline bytes everywhere.
double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform_pm(std::mt19937_64& rng, double mag) {
  return (2.0 * uniform01(rng) - 1.0) * mag;
}

// Double-hump day curve: morning and evening humps with a midday plateau,
// night base around 0.34, evening peak around 0.94 of nominal.
double load_shape(double t_hours) {
  auto g = [](double t, double c, double w) {
    double z = (t - c) / w;
    return std::exp(-z * z);
  };
  return 0.34 + 0.16 * g(t_hours, 8.0, 1.6) + 0.19 * g(t_hours, 13.2, 2.6) +
         0.60 * g(t_hours, 19.6, 1.9);
}

// Solar production as a fraction of rating: zero outside 06:00-20:00.
double pv_shape(double t_hours) {
  if (t_hours < 6.0 || t_hours > 20.0) return 0.0;
  double x = (t_hours - 6.0) / 14.0;
  return 0.97 * std::pow(std::sin(M_PI * x), 1.3);
}

Eigen::MatrixXd read_csv_matrix(const std::string& path, int rows, int cols) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open profile csv: " + path);
  Eigen::MatrixXd m(rows, cols);
  std::string line;
  int r = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (r >= rows) throw std::invalid_argument("profile csv has extra rows: " + path);
    std::stringstream ss(line);
    std::string cell;
    int c = 0;
    while (std::getline(ss, cell, ',')) {
      if (c >= cols) throw std::invalid_argument("profile csv has extra columns: " + path);
      m(r, c++) = std::stod(cell);
    }
    if (c != cols) throw std::invalid_argument("profile csv row length mismatch: " + path);
    ++r;
  }
  if (r != rows) throw std::invalid_argument("profile csv row count mismatch: " + path);
  return m;
}

}  // namespace

ScenarioTimeline make_profiles(const grid::Network& net, unsigned seed,
                               const ProfileOptions& opt) {
  const int nb = net.n_bus();
  const int npv = static_cast<int>(net.pv_units.size());
  const int T = opt.periods * opt.steps_per_period;

  ScenarioTimeline tl;
  tl.periods = opt.periods;
  tl.steps_per_period = opt.steps_per_period;
  tl.seed = seed;
  tl.load_p.resize(T, nb);
  tl.load_q.resize(T, nb);
  tl.pv_p.resize(T, npv);

  std::mt19937_64 rng(seed);
  auto nominal = pf::PfInput::nominal(net);

  if (opt.shape == ProfileShape::csv) {
    Eigen::MatrixXd ls = read_csv_matrix(opt.csv_load, T, 1);
    Eigen::MatrixXd ps = read_csv_matrix(opt.csv_pv, T, 1);
    for (int r = 0; r < T; ++r) {
      tl.load_p.row(r) = nominal.load_p.transpose() * ls(r, 0);
      tl.load_q.row(r) = nominal.load_q.transpose() * ls(r, 0);
      for (int k = 0; k < npv; ++k) tl.pv_p(r, k) = net.pv_units[k].p_rating * ps(r, 0);
    }
  } else {
    const double dt_h = 24.0 / static_cast<double>(T);
    for (int r = 0; r < T; ++r) {
      double t = (r + 0.5) * dt_h;
      double ls = load_shape(t);
      tl.load_p.row(r) = nominal.load_p.transpose() * ls;
      tl.load_q.row(r) = nominal.load_q.transpose() * ls;
      double base = pv_shape(t);
      for (int k = 0; k < npv; ++k) {
        double noisy = base * (1.0 + uniform_pm(rng, opt.pv_noise));
        tl.pv_p(r, k) = net.pv_units[k].p_rating * std::clamp(noisy, 0.0, 1.0);
      }
    }
  }

  // Hourly means first, then the injected forecast errors.
  tl.fc_load_p.resize(opt.periods, nb);
  tl.fc_load_q.resize(opt.periods, nb);
  tl.fc_pv_p.resize(opt.periods, npv);
  for (int p = 0; p < opt.periods; ++p) {
    auto block_mean = [&](const Eigen::MatrixXd& m) {
      return m.middleRows(p * opt.steps_per_period, opt.steps_per_period).colwise().mean();
    };
    tl.fc_load_p.row(p) = block_mean(tl.load_p);
    tl.fc_load_q.row(p) = block_mean(tl.load_q);
    tl.fc_pv_p.row(p) = block_mean(tl.pv_p);
    for (int b = 0; b < nb; ++b) {
      double e = uniform_pm(rng, opt.load_forecast_err);
      tl.fc_load_p(p, b) *= 1.0 + e;
      tl.fc_load_q(p, b) *= 1.0 + e;
    }
    // errors stay inside the physical panel rating
    for (int k = 0; k < npv; ++k)
      tl.fc_pv_p(p, k) = std::min(net.pv_units[k].p_rating,
                                  tl.fc_pv_p(p, k) * (1.0 + uniform_pm(rng, opt.pv_forecast_err)));
  }

  if (opt.hold_hourly) {
    for (int p = 0; p < opt.periods; ++p) {
      auto hold = [&](Eigen::MatrixXd& m) {
        Eigen::RowVectorXd mean =
            m.middleRows(p * opt.steps_per_period, opt.steps_per_period).colwise().mean();
        for (int s = 0; s < opt.steps_per_period; ++s)
          m.row(p * opt.steps_per_period + s) = mean;
      };
      hold(tl.load_p);
      hold(tl.load_q);
      hold(tl.pv_p);
    }
  }
  return tl;
}

pf::PfInput input_at(const grid::Network& net, const ScenarioTimeline& tl, int period, int step,
                     const std::vector<int>& taps, const std::vector<int>& cbs) {
  if (period < 0 || period >= tl.periods || step < 0 || step >= tl.steps_per_period)
    throw std::out_of_range("timeline index outside the horizon");
  int row = period * tl.steps_per_period + step;
  pf::PfInput in;
  in.load_p = tl.load_p.row(row).transpose();
  in.load_q = tl.load_q.row(row).transpose();
  in.pv_p = tl.pv_p.row(row).transpose();
  in.pv_q = Eigen::VectorXd::Zero(tl.pv_p.cols());
  in.tap_position = taps;
  in.cb_units = cbs;
  return in;
}

RunMetrics run_closed_loop(const grid::Network& net, const ScenarioTimeline& tl, RunMode mode,
                           const agents::LowerObjectiveSpec& lower_spec,
                           const HarnessConfig& cfg) {
  const int npv = static_cast<int>(net.pv_units.size());
  RunMetrics m;
  m.mode = mode;
  m.seed = tl.seed;
  m.periods = tl.periods;
  m.steps_per_period = tl.steps_per_period;
  m.period_loss.assign(tl.periods, 0.0);
  m.step_over.assign(tl.n_steps(), 0.0);
  m.step_under.assign(tl.n_steps(), 0.0);

  grid::SensitivityMatrix X;
  if (mode != RunMode::no_control && npv > 0) X = grid::compute_x_matrix(net);

  std::vector<int> taps, cbs;
  for (const auto& o : net.oltcs) taps.push_back(o.position);
  for (const auto& c : net.capbanks) cbs.push_back(c.units_on);
  std::vector<int> neutral_taps, zero_cbs;
  for (const auto& o : net.oltcs) neutral_taps.push_back(o.neutral());
  zero_cbs.assign(net.capbanks.size(), 0);

  Eigen::VectorXd q = Eigen::VectorXd::Zero(npv);
  std::optional<agents::AgentInit> agent_state;
  double loss_sum = 0.0;

  for (int p = 0; p < tl.periods; ++p) {
    dispatcher::PeriodForecast fc;
    fc.load_p = tl.fc_load_p.row(p).transpose();
    fc.load_q = tl.fc_load_q.row(p).transpose();
    fc.pv_p = tl.fc_pv_p.row(p).transpose();
    fc.prev_tap = taps;
    fc.prev_cb = cbs;

    if (mode == RunMode::no_control) {
      taps = neutral_taps;
      cbs = zero_cbs;
      m.dispatch_time_s.push_back(0.0);
      m.dispatch_nodes.push_back(0);
      m.eps.push_back(0.0);
    } else {
      dispatcher::DispatchDecision dec;
      switch (mode) {
        case RunMode::bilevel: dec = dispatcher::dispatch_period(net, fc, lower_spec, cfg.dispatch); break;
        case RunMode::model1: dec = dispatcher::dispatch_model1(net, fc, cfg.dispatch); break;
        default: dec = dispatcher::dispatch_model2(net, fc, cfg.dispatch); break;
      }
      for (const auto& w : dec.warnings)
        m.warnings.push_back("period " + std::to_string(p) + ": " + w);
      m.dispatch_time_s.push_back(dec.solve_time_s);
      m.dispatch_nodes.push_back(dec.nodes);
      if (!dec.feasible) {
        m.warnings.push_back("period " + std::to_string(p) +
                             ": dispatch infeasible; holding previous devices");
        m.eps.push_back(0.0);
      } else {
        for (size_t t = 0; t < taps.size(); ++t) m.tap_moves += std::abs(dec.tap[t] - taps[t]);
        for (size_t c = 0; c < cbs.size(); ++c) m.cb_moves += std::abs(dec.cb[c] - cbs[c]);
        taps = dec.tap;
        cbs = dec.cb;
        m.eps.push_back(dec.eps_gap);
        m.max_eps = std::max(m.max_eps, dec.eps_gap);
      }
    }
    m.taps.push_back(taps);
    m.cbs.push_back(cbs);

    double dq_last = 0.0;
    for (int s = 0; s < tl.steps_per_period; ++s) {
      int row = p * tl.steps_per_period + s;
      pf::PfInput in = input_at(net, tl, p, s, taps, cbs);

      // the plant's inverters run their own local control in every mode but
      // no-control; the modes differ only in how the devices were scheduled
      if (mode != RunMode::no_control && npv > 0) {
        in.pv_q = q;  // seed the linearization at the carried state
        auto plant = [&](const Eigen::VectorXd& qv) {
          pf::PfInput pin = in;
          pin.pv_q = qv;
          return pf::solve_pf(net, pin, cfg.pf);
        };
        agents::RoundConfig rc = cfg.rounds;
        rc.max_rounds = cfg.rounds_per_step;
        rc.conv_window = std::max(rc.conv_window, cfg.rounds_per_step + 1);
        agents::DistributedRun run;
        if (lower_spec.kind == agents::ObjectiveKind::equal_ratio)
          run = agents::run_consensus_equal_ratio(net, plant, lower_spec.leader_bus, in, rc, {},
                                                  {}, agent_state);
        else
          run = agents::run_distributed(net, X, plant, in, lower_spec, rc, agent_state);
        if (run.diverged) {
          m.aborted = true;
          m.abort_reason = "agent divergence at period " + std::to_string(p) + " step " +
                           std::to_string(s) + ": " + run.message;
          return m;
        }
        agent_state = run.state_final;
        if (run.trajectory.size() >= 2) {
          const auto& a = run.trajectory[run.trajectory.size() - 2].q;
          const auto& b = run.trajectory.back().q;
          dq_last = (b - a).cwiseAbs().maxCoeff();
        }
        q = run.q_final;
      } else {
        q.setZero();
      }

      in.pv_q = q;
      auto ps = pf::solve_pf(net, in, cfg.pf);
      if (!ps.converged) {
        m.aborted = true;
        m.abort_reason =
            "plant divergence at period " + std::to_string(p) + " step " + std::to_string(s);
        return m;
      }

      loss_sum += ps.total_loss;
      m.period_loss[p] += ps.total_loss / tl.steps_per_period;
      for (int b = 0; b < net.n_bus(); ++b) {
        double v = std::sqrt(ps.v_sq[b]);
        double over = v - std::sqrt(net.buses[b].v_max_sq);
        double under = std::sqrt(net.buses[b].v_min_sq) - v;
        if (over > 0.0) {
          m.step_over[row] += over * tl.step_seconds;
          ++m.violation_count;
        }
        if (under > 0.0) {
          m.step_under[row] += under * tl.step_seconds;
          ++m.violation_count;
        }
      }
      m.violation_integral += m.step_over[row] + m.step_under[row];
    }
    m.final_dq.push_back(dq_last);
  }
  m.avg_loss = loss_sum / tl.n_steps();
  return m;
}

std::string compare_report(const std::vector<RunMetrics>& runs) {
  if (runs.size() < 2) throw std::invalid_argument("compare_report needs at least two runs");
  for (const auto& r : runs)
    if (r.seed != runs[0].seed || r.periods != runs[0].periods ||
        r.steps_per_period != runs[0].steps_per_period)
      throw std::invalid_argument("compare_report refuses runs from different timelines");

  auto mean = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(6);
  os << "metric";
  for (const auto& r : runs) os << "," << to_string(r.mode);
  os << "\n";
  auto row = [&](const std::string& name, auto get) {
    os << name;
    for (const auto& r : runs) os << "," << get(r);
    os << "\n";
  };
  row("max_relaxation_gap", [&](const RunMetrics& r) { return r.max_eps; });
  row("avg_solve_time_s", [&](const RunMetrics& r) { return mean(r.dispatch_time_s); });
  row("avg_loss_pu", [&](const RunMetrics& r) { return r.avg_loss; });
  row("violation_count", [&](const RunMetrics& r) { return static_cast<double>(r.violation_count); });
  row("violation_integral_pu_s", [&](const RunMetrics& r) { return r.violation_integral; });
  row("tap_moves", [&](const RunMetrics& r) { return static_cast<double>(r.tap_moves); });
  row("cb_moves", [&](const RunMetrics& r) { return static_cast<double>(r.cb_moves); });
  return os.str();
}

std::string to_json(const RunMetrics& m) {
  nlohmann::json j;
  j["mode"] = to_string(m.mode);
  j["seed"] = m.seed;
  j["periods"] = m.periods;
  j["steps_per_period"] = m.steps_per_period;
  j["avg_loss_pu"] = m.avg_loss;
  j["period_loss"] = m.period_loss;
  j["max_eps"] = m.max_eps;
  j["eps"] = m.eps;
  j["violation_count"] = m.violation_count;
  j["violation_integral_pu_s"] = m.violation_integral;
  j["step_over"] = m.step_over;
  j["step_under"] = m.step_under;
  j["taps"] = m.taps;
  j["cbs"] = m.cbs;
  j["tap_moves"] = m.tap_moves;
  j["cb_moves"] = m.cb_moves;
  j["dispatch_time_s"] = m.dispatch_time_s;
  j["dispatch_nodes"] = m.dispatch_nodes;
  j["final_dq"] = m.final_dq;
  j["warnings"] = m.warnings;
  j["aborted"] = m.aborted;
  j["abort_reason"] = m.abort_reason;
  return j.dump(2);
}

RunMetrics metrics_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  RunMetrics m;
  m.mode = run_mode_from(j.at("mode").get<std::string>());
  m.seed = j.at("seed").get<unsigned>();
  m.periods = j.at("periods").get<int>();
  m.steps_per_period = j.at("steps_per_period").get<int>();
  m.avg_loss = j.at("avg_loss_pu").get<double>();
  m.period_loss = j.at("period_loss").get<std::vector<double>>();
  m.max_eps = j.at("max_eps").get<double>();
  m.eps = j.at("eps").get<std::vector<double>>();
  m.violation_count = j.at("violation_count").get<long>();
  m.violation_integral = j.at("violation_integral_pu_s").get<double>();
  m.step_over = j.at("step_over").get<std::vector<double>>();
  m.step_under = j.at("step_under").get<std::vector<double>>();
  m.taps = j.at("taps").get<std::vector<std::vector<int>>>();
  m.cbs = j.at("cbs").get<std::vector<std::vector<int>>>();
  m.tap_moves = j.at("tap_moves").get<int>();
  m.cb_moves = j.at("cb_moves").get<int>();
  m.dispatch_time_s = j.at("dispatch_time_s").get<std::vector<double>>();
  m.dispatch_nodes = j.at("dispatch_nodes").get<std::vector<int>>();
  m.final_dq = j.at("final_dq").get<std::vector<double>>();
  m.warnings = j.at("warnings").get<std::vector<std::string>>();
  m.aborted = j.at("aborted").get<bool>();
  m.abort_reason = j.at("abort_reason").get<std::string>();
  return m;
}

}  // namespace vvc::harness
