#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "vvc/agents.hpp"
#include "vvc/dispatcher.hpp"
#include "vvc/grid.hpp"
#include "vvc/powerflow.hpp"

namespace vvc::harness {

enum class RunMode { bilevel, model1, model2, no_control };
RunMode run_mode_from(const std::string& name);
std::string to_string(RunMode m);

/// Minute-resolution day of per-bus loads and per-unit PV output, plus the
/// hourly forecast table the dispatcher sees (period means with injected
/// percent errors).
struct ScenarioTimeline {
  int periods = 24;
  int steps_per_period = 60;  // profile steps per period, one minute each
  double step_seconds = 60.0;
  Eigen::MatrixXd load_p, load_q;        // (periods*steps) x n_bus
  Eigen::MatrixXd pv_p;                  // (periods*steps) x n_pv
  Eigen::MatrixXd fc_load_p, fc_load_q;  // periods x n_bus
  Eigen::MatrixXd fc_pv_p;               // periods x n_pv
  unsigned seed = 0;

  int n_steps() const { return periods * steps_per_period; }
};

enum class ProfileShape { synthetic_solar_day, csv };

struct ProfileOptions {
  ProfileShape shape = ProfileShape::synthetic_solar_day;
  int periods = 24;
  int steps_per_period = 60;
  double pv_noise = 0.05;          // multiplicative minute noise on pv
  double pv_forecast_err = 0.20;   // uniform +- fraction on hourly pv means
  double load_forecast_err = 0.10; // uniform +- fraction on hourly load means
  // Freeze each period's profile at its hourly mean. Disturbances then occur
  // only at period boundaries, which makes steady-state voltage windows
  // between them well defined.
  bool hold_hourly = false;
  std::string csv_load, csv_pv;  // csv shape: minute rows, comma separated
};

/// Synthetic solar day: pv zero outside 06:00-20:00 with a smooth midday
/// peak and multiplicative minute noise; load follows a double-hump day
/// curve with an evening peak. Same seed, same bytes.
ScenarioTimeline make_profiles(const grid::Network& net, unsigned seed,
                               const ProfileOptions& opt = {});

struct HarnessConfig {
  dispatcher::DispatchConfig dispatch;
  agents::RoundConfig rounds;
  pf::PfOptions pf;
  int rounds_per_step = 2;  // agent rounds per profile step (compressed inner timescale)
};

struct RunMetrics {
  RunMode mode = RunMode::bilevel;
  unsigned seed = 0;
  int periods = 0, steps_per_period = 0;
  double avg_loss = 0.0;            // time-average plant loss, p.u.
  std::vector<double> period_loss;  // per period mean plant loss, p.u.
  double max_eps = 0.0;             // worst relaxation gap among accepted dispatches
  std::vector<double> eps;          // per period
  long violation_count = 0;           // bus-steps outside the voltage band
  double violation_integral = 0.0;    // p.u.-s beyond band, magnitude scale
  std::vector<double> step_over, step_under;  // per step p.u.-s, split by side
  std::vector<std::vector<int>> taps, cbs;    // device schedule per period
  int tap_moves = 0, cb_moves = 0;            // summed |delta| across the run
  std::vector<double> dispatch_time_s;
  std::vector<int> dispatch_nodes;
  std::vector<double> final_dq;  // last inner-round |dq| per period
  std::vector<std::string> warnings;
  bool aborted = false;
  std::string abort_reason;  // stamped "period P step S" on plant divergence
};

/// Two-timescale closed loop: per period dispatch devices from the forecast
/// (mode selects the upper-level model; no_control pins neutral devices and
/// q = 0), then per profile step refresh the plant inputs and run the
/// distributed inverter rounds against it. All metrics come from plant
/// solves; conic quantities only appear as the eps predictions.
RunMetrics run_closed_loop(const grid::Network& net, const ScenarioTimeline& tl, RunMode mode,
                           const agents::LowerObjectiveSpec& lower_spec,
                           const HarnessConfig& cfg = {});

/// Plant input at one profile step under explicit device settings.
pf::PfInput input_at(const grid::Network& net, const ScenarioTimeline& tl, int period, int step,
                     const std::vector<int>& taps, const std::vector<int>& cbs);

/// Aligned comparison of runs on one timeline: paper-style rows (max gap,
/// average solve time, average loss) plus violation metrics, one column per
/// run. Throws when the runs disagree on seed or horizon.
std::string compare_report(const std::vector<RunMetrics>& runs);

std::string to_json(const RunMetrics& m);
RunMetrics metrics_from_json(const std::string& text);

}  // namespace vvc::harness
