#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "vbsim/kinetics.hpp"

namespace vbsim {

struct PowerSegment {
  double duration_ns = 0.0;
  double target_power_mw = 0.0;
};

// Piecewise laser-power profile. Within each segment the instantaneous
// power approaches the target exponentially: rise_time_ns when stepping
// up, fall_time_ns (defaults to the rise time) when stepping down.
struct PowerProfile {
  std::vector<PowerSegment> segments;
  double rise_time_ns = 0.0;
  std::optional<double> fall_time_ns;
  double initial_power_mw = 0.0;

  double fall_ns() const { return fall_time_ns.value_or(rise_time_ns); }
  double total_duration_ns() const;
  void validate() const;
};

struct Trajectory {
  std::vector<double> times_ns;
  std::vector<Eigen::VectorXd> populations;  // clamped to >= 0
  std::vector<double> power_mw;
  double max_negative = 0.0;       // largest clamped magnitude
  double max_sum_deviation = 0.0;  // largest |sum(p) - 1|

  int n_samples() const { return static_cast<int>(times_ns.size()); }
};

// exp(M * t) p0 with M in MHz and t in ns.
Eigen::VectorXd propagate_constant(const Eigen::MatrixXd& generator_mhz,
                                   const Eigen::VectorXd& p0, double t_ns);

// Evolve p0 through a power profile, sampling every sample_dt_ns. The
// exponential power approach is handled by sub-stepping with
// piecewise-constant power on sub-intervals <= min(sample_dt, tau/5)
// until the remaining deviation from the target is below 0.1%.
Trajectory propagate_profile(const LevelGraph& graph, const PowerProfile& profile,
                             const Eigen::VectorXd& p0, double sample_dt_ns);

// --- advanced driver -------------------------------------------------
// The pieces below power both propagate_profile and the fitting path,
// which additionally carries exact parameter sensitivities d p / d theta
// (via the block matrix-exponential derivative).

class Propagator {
 public:
  explicit Propagator(const LevelGraph& graph);
  // derivative_graphs: same state space, edge coefficients differentiated
  // with respect to each free parameter.
  Propagator(const LevelGraph& graph,
             std::span<const LevelGraph* const> derivative_graphs);

  void reset(const Eigen::VectorXd& p0);  // also zeroes sensitivities
  void advance(double power_mw, double dt_ns);

  const Eigen::VectorXd& population() const { return p_; }
  std::span<const Eigen::VectorXd> sensitivities() const { return dp_; }
  int n_params() const { return static_cast<int>(deriv_pieces_.size()); }

 private:
  struct Step {
    Eigen::MatrixXd propagator;
    std::vector<Eigen::MatrixXd> frechet;  // d(expm)/d theta_j applied maps
  };
  const Step& step_for(double power_mw, double dt_ns);

  const LevelGraph* graph_;
  std::vector<std::array<Eigen::MatrixXd, 3>> deriv_pieces_;
  std::map<std::pair<double, double>, Step> cache_;
  Eigen::VectorXd p_;
  std::vector<Eigen::VectorXd> dp_;
};

struct StepSample {
  double t_ns = 0.0;
  double power_mw = 0.0;
  const Eigen::VectorXd& population;
  std::span<const Eigen::VectorXd> sensitivities;
};

using SampleSink = std::function<void(const StepSample&)>;

// Drive a propagator through a profile, resetting the spin state to the
// thermal distribution at each reset time (times must be sorted). Emits a
// sample at t = 0 and every sample_dt_ns thereafter.
void propagate_events(Propagator& prop, const LevelGraph& graph,
                      const PowerProfile& profile,
                      std::span<const double> reset_times_ns,
                      const Eigen::VectorXd& p0, double sample_dt_ns,
                      const SampleSink& sink);

}  // namespace vbsim
